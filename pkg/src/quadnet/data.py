"""Synthetic sign datasets, the on-disk dataset format, and preprocessing.

A dataset directory holds::

    templates/<class_id>.ppm
    real/<class_id>/<sample_id>.ppm
    index.csv       path,class_id,partition
    meta.json       classes, seen/unseen split, channel means, generator seed

Images are 48x48 RGB, binary PPM.  In memory they are uint8 ``[3, 48, 48]``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .seeding import stream

log = logging.getLogger(__name__)

SIZE = 48
SEEN_PARTITIONS = ("phi_s", "psi_s", "omega_s")
UNSEEN_PARTITIONS = ("phi_u", "psi_u", "omega_u")
PARTITIONS = SEEN_PARTITIONS + UNSEEN_PARTITIONS
TRAINING_PARTITIONS = ("phi_s", "psi_s")

SHAPES = ("circle", "triangle", "inverted-triangle", "square", "diamond", "octagon")
BORDER_COLORS = {
    "red": (0.80, 0.10, 0.10),
    "blue": (0.10, 0.25, 0.75),
    "green": (0.10, 0.55, 0.20),
    "black": (0.10, 0.10, 0.10),
    "orange": (0.95, 0.50, 0.10),
    "purple": (0.50, 0.15, 0.60),
}
FILL_COLORS = {
    "white": (0.95, 0.95, 0.95),
    "yellow": (0.95, 0.85, 0.10),
    "blue": (0.15, 0.35, 0.85),
    "gray": (0.55, 0.55, 0.55),
}
NEUTRAL = 0.5


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SignSpec:
    border_shape: str
    border_color: str
    fill_color: str
    glyph_id: int

    def __post_init__(self):
        if self.border_shape not in SHAPES:
            raise ValueError(f"unknown shape {self.border_shape!r}")
        if self.border_color not in BORDER_COLORS:
            raise ValueError(f"unknown border color {self.border_color!r}")
        if self.fill_color not in FILL_COLORS:
            raise ValueError(f"unknown fill color {self.fill_color!r}")

    @property
    def identity(self) -> tuple:
        return self.border_shape, self.border_color, self.glyph_id


# ---------------------------------------------------------------------------
# rendering

_SS = 4  # supersampling factor


def _outline(shape: str, scale: float = 1.0) -> tuple[list[tuple[float, float]] | None, tuple[float, float]]:
    """Polygon vertices in 48px units (None for a circle) and the centroid."""
    c = SIZE / 2
    if shape == "circle":
        return None, (c, c)
    if shape == "square":
        pts = [(c - 19, c - 19), (c + 19, c - 19), (c + 19, c + 19), (c - 19, c + 19)]
    elif shape == "diamond":
        pts = [(c, c - 23), (c + 23, c), (c, c + 23), (c - 23, c)]
    elif shape == "octagon":
        ang = np.deg2rad(22.5 + 45 * np.arange(8))
        pts = list(zip(c + 22 * np.cos(ang), c + 22 * np.sin(ang)))
    elif shape == "triangle":
        pts = [(c, 4), (46, 44), (2, 44)]
    else:  # inverted-triangle
        pts = [(2, 4), (46, 4), (c, 44)]
    cx = sum(p[0] for p in pts) / len(pts)
    cy = sum(p[1] for p in pts) / len(pts)
    pts = [(cx + (x - cx) * scale, cy + (y - cy) * scale) for x, y in pts]
    return pts, (cx, cy)


def _draw_mask(shape: str, scale: float) -> np.ndarray:
    img = Image.new("L", (SIZE * _SS, SIZE * _SS), 0)
    draw = ImageDraw.Draw(img)
    pts, (cx, cy) = _outline(shape, scale)
    if pts is None:
        r = 22 * scale * _SS
        draw.ellipse([cx * _SS - r, cy * _SS - r, cx * _SS + r, cy * _SS + r], fill=255)
    else:
        draw.polygon([(x * _SS, y * _SS) for x, y in pts], fill=255)
    return np.asarray(img, dtype=np.float64) / 255.0


@lru_cache(maxsize=1)
def _glyph_table() -> list[tuple[int, ...]]:
    lattice = [(i, j) for j in range(3) for i in range(3)]
    segments = [(a, b) for a, b in itertools.combinations(range(9), 2)
                if max(abs(lattice[a][0] - lattice[b][0]), abs(lattice[a][1] - lattice[b][1])) == 1]
    combos = list(itertools.combinations(range(len(segments)), 3))
    order = np.random.default_rng(12345).permutation(len(combos))
    return [tuple(segments[s] for s in combos[i]) for i in order]


def num_glyphs() -> int:
    return len(_glyph_table())


def _draw_glyph(shape: str, glyph_id: int) -> np.ndarray:
    lattice = [(i, j) for j in range(3) for i in range(3)]
    _, (cx, cy) = _outline(shape)
    half = 6.0 if "triangle" in shape else 9.0
    img = Image.new("L", (SIZE * _SS, SIZE * _SS), 0)
    draw = ImageDraw.Draw(img)
    for a, b in _glyph_table()[glyph_id % num_glyphs()]:
        (xa, ya), (xb, yb) = lattice[a], lattice[b]
        p = ((cx + (xa - 1) * half) * _SS, (cy + (ya - 1) * half) * _SS)
        q = ((cx + (xb - 1) * half) * _SS, (cy + (yb - 1) * half) * _SS)
        draw.line([p, q], fill=255, width=2 * _SS)
    return np.asarray(img, dtype=np.float64) / 255.0


def _downsample(a: np.ndarray) -> np.ndarray:
    return a.reshape(SIZE, _SS, SIZE, _SS, *a.shape[2:]).mean(axis=(1, 3))


@lru_cache(maxsize=512)
def _sign_layers(spec: SignSpec) -> tuple[np.ndarray, np.ndarray]:
    """Sign colors ``[3,48,48]`` and coverage alpha ``[48,48]``."""
    outer = _draw_mask(spec.border_shape, 1.0)
    inner = _draw_mask(spec.border_shape, 0.72)
    glyph = _draw_glyph(spec.border_shape, spec.glyph_id) * inner
    border = np.asarray(BORDER_COLORS[spec.border_color])
    fill = np.asarray(FILL_COLORS[spec.fill_color])
    ink = np.zeros(3) if fill @ (0.299, 0.587, 0.114) > 0.5 else np.full(3, 0.95)
    rgb = (border[None, None] * (1 - inner)[..., None]
           + fill[None, None] * (inner - glyph)[..., None]
           + ink[None, None] * glyph[..., None])
    # colors are premultiplied by coverage at the supersampled level
    rgb = rgb * outer[..., None]
    alpha = _downsample(outer)
    color = _downsample(rgb) / np.maximum(alpha, 1e-12)[..., None]
    color = np.where(alpha[..., None] > 0, color, 0.0)
    rgb_out = color.transpose(2, 0, 1).copy()
    rgb_out.setflags(write=False)
    alpha.setflags(write=False)
    return rgb_out, alpha


def _composite(rgb: np.ndarray, alpha: np.ndarray, background: np.ndarray) -> np.ndarray:
    return alpha[None] * rgb + (1 - alpha[None]) * background


def render_template(spec: SignSpec) -> np.ndarray:
    """Noise-free, centered sign over a neutral gray background, ``[3,48,48]`` in [0,1]."""
    rgb, alpha = _sign_layers(spec)
    return _composite(rgb, alpha, np.full((3, SIZE, SIZE), NEUTRAL))


def synthesize_real(spec: SignSpec, rng: np.random.Generator, severity: float) -> np.ndarray:
    """A corrupted capture of the sign; every distortion scales with ``severity``.

    Random background, affine jitter (translate, rotate, scale), brightness
    and contrast shift, an optional occlusion bar, Gaussian blur and additive
    noise.  At severity 0 this equals :func:`render_template`.
    """
    if not 0.0 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0, 1], got {severity}")
    s = float(severity)
    rgb, alpha = _sign_layers(spec)

    angle = np.deg2rad(rng.uniform(-10, 10) * s)
    zoom = 1.0 + rng.uniform(-0.2, 0.2) * s
    shift = rng.uniform(-0.1, 0.1, size=2) * SIZE * s
    field = ndimage.zoom(rng.uniform(0, 1, size=(3, 4, 4)), (1, SIZE / 4, SIZE / 4), order=1)
    contrast = 1.0 + rng.uniform(-0.4, 0.4) * s
    brightness = rng.uniform(-0.25, 0.25) * s
    occlude = rng.uniform() < 0.5 * s
    bar = (rng.integers(2), rng.integers(0, SIZE), rng.integers(4, 9), rng.uniform(0, 0.3, size=3))
    sigma = rng.uniform(0, 1.5) * s
    noise = rng.standard_normal((3, SIZE, SIZE)) * 0.06 * s

    if angle != 0 or zoom != 1 or np.any(shift != 0):
        c = (SIZE - 1) / 2
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / zoom
        center = np.array([c, c])
        offset = center - rot @ (center + shift)
        warp = lambda a: ndimage.affine_transform(a, rot, offset=offset, order=1, mode="constant")
        alpha = warp(alpha)
        rgb = np.stack([warp(ch) for ch in rgb])

    background = NEUTRAL * (1 - s) + s * field
    img = _composite(rgb, alpha, background)
    img = img * contrast + (0.5 * (1 - contrast) + brightness)
    if occlude:
        vertical, pos, width, color = bar
        sl = (slice(None), slice(None), slice(pos, pos + width)) if vertical else \
             (slice(None), slice(pos, pos + width), slice(None))
        img[sl] = color[:, None, None]
    if sigma > 0:
        img = np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in img])
    return np.clip(img + noise, 0.0, 1.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def make_sign_specs(num_classes: int, rng: np.random.Generator) -> list[SignSpec]:
    """Distinct sign designs; no two share (shape, border color, glyph)."""
    specs, seen = [], set()
    borders, fills = sorted(BORDER_COLORS), sorted(FILL_COLORS)
    while len(specs) < num_classes:
        spec = SignSpec(SHAPES[rng.integers(len(SHAPES))], borders[rng.integers(len(borders))],
                        fills[rng.integers(len(fills))], int(rng.integers(num_glyphs())))
        if spec.identity not in seen:
            seen.add(spec.identity)
            specs.append(spec)
    return specs


# ---------------------------------------------------------------------------
# bundle


@dataclass
class DatasetBundle:
    """Templates, real samples and their six-way partition.

    ``templates[i]`` belongs to ``classes[i]``; real images are rows of
    ``real_images`` with parallel ``real_labels``, ``real_paths`` and
    ``partitions`` arrays.
    """

    classes: list[int]
    seen: list[int]
    unseen: list[int]
    templates: np.ndarray
    real_images: np.ndarray
    real_labels: np.ndarray
    real_paths: list[str]
    partitions: np.ndarray
    channel_means: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.real_labels = np.asarray(self.real_labels, dtype=np.int64)
        self.partitions = np.asarray(self.partitions, dtype="<U7")
        if self.channel_means is None:
            self.channel_means = compute_channel_means(self)
        self.channel_means = np.asarray(self.channel_means, dtype=np.float64)
        self._cache = {}
        self.validate()

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def class_row(self, class_id: int) -> int:
        return self.classes.index(class_id)

    def indices(self, *partitions: str, classes=None) -> np.ndarray:
        for p in partitions:
            if p not in PARTITIONS:
                raise DatasetError(f"unknown partition {p!r}")
        mask = np.isin(self.partitions, partitions)
        if classes is not None:
            mask &= np.isin(self.real_labels, list(classes))
        return np.flatnonzero(mask)

    def validate(self) -> None:
        if len(set(self.classes)) != len(self.classes):
            raise DatasetError("duplicate class ids")
        if set(self.seen) & set(self.unseen):
            raise DatasetError("seen and unseen classes overlap")
        if set(self.seen) | set(self.unseen) != set(self.classes):
            raise DatasetError("every class must be marked seen or unseen")
        if self.templates.shape != (len(self.classes), 3, SIZE, SIZE):
            raise DatasetError(f"templates must be [{len(self.classes)},3,48,48], got {self.templates.shape}")
        m = len(self.real_labels)
        if self.real_images.shape != (m, 3, SIZE, SIZE):
            raise DatasetError(f"real images must be [{m},3,48,48], got {self.real_images.shape}")
        if len(self.real_paths) != m or len(self.partitions) != m:
            raise DatasetError("real image arrays have inconsistent lengths")
        if len(set(self.real_paths)) != m:
            raise DatasetError("duplicate real image paths")
        unknown = set(self.real_labels.tolist()) - set(self.classes)
        if unknown:
            raise DatasetError(f"real images of classes without a template: {sorted(unknown)}")
        bad = ~np.isin(self.partitions, PARTITIONS)
        if bad.any():
            raise DatasetError(f"unknown partition name {self.partitions[bad][0]!r}")
        seen_rows = np.isin(self.real_labels, self.seen)
        if np.isin(self.partitions[seen_rows], UNSEEN_PARTITIONS).any() or \
                np.isin(self.partitions[~seen_rows], SEEN_PARTITIONS).any():
            raise DatasetError("partition suffix disagrees with the seen/unseen marking")

    def preprocessed_reals(self) -> np.ndarray:
        if "reals" not in self._cache:
            self._cache["reals"] = preprocess(self.real_images, self.channel_means)
        return self._cache["reals"]

    def preprocessed_templates(self) -> np.ndarray:
        if "templates" not in self._cache:
            self._cache["templates"] = preprocess(self.templates, self.channel_means)
        return self._cache["templates"]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps([self.classes, self.seen, self.unseen]).encode())
        h.update(self.templates.tobytes())
        h.update(self.real_images.tobytes())
        h.update(self.real_labels.tobytes())
        h.update("\n".join(self.real_paths).encode())
        h.update("\n".join(self.partitions.tolist()).encode())
        return h.hexdigest()[:16]

    def relabel(self, mapping: dict[int, int]) -> "DatasetBundle":
        """Copy with class ids renamed through ``mapping``."""
        order = np.argsort([mapping[c] for c in self.classes], kind="stable")
        return DatasetBundle(
            classes=[mapping[self.classes[i]] for i in order],
            seen=sorted(mapping[c] for c in self.seen),
            unseen=sorted(mapping[c] for c in self.unseen),
            templates=self.templates[order],
            real_images=self.real_images,
            real_labels=np.array([mapping[c] for c in self.real_labels.tolist()], dtype=np.int64),
            real_paths=list(self.real_paths),
            partitions=self.partitions.copy(),
            channel_means=self.channel_means,
            meta=dict(self.meta),
        )


def compute_channel_means(bundle: DatasetBundle) -> np.ndarray:
    """Per-channel mean intensity in [0,1] over the seen train+val images."""
    rows = np.flatnonzero(np.isin(bundle.partitions, TRAINING_PARTITIONS))
    if rows.size == 0:
        return np.zeros(3)
    imgs = bundle.real_images[rows].astype(np.float64) / 255.0
    return imgs.mean(axis=(0, 2, 3))


def preprocess(images: np.ndarray, means) -> np.ndarray:
    """uint8 or [0,1] float images ``[...,3,48,48]`` minus per-channel means, float32."""
    images = np.asarray(images)
    if images.shape[-3:] != (3, SIZE, SIZE):
        raise ValueError(f"expected images of shape [...,3,48,48], got {images.shape}")
    x = images.astype(np.float64) / 255.0 if images.dtype == np.uint8 else images.astype(np.float64)
    return (x - np.asarray(means, dtype=np.float64)[:, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# generation and I/O


def _split_sizes(n: int, val_fraction: float, test_fraction: float) -> tuple[int, int, int]:
    n_val = int(round(n * val_fraction))
    n_test = int(round(n * test_fraction))
    return n - n_val - n_test, n_val, n_test


def generate_dataset(num_classes: int = 12, num_seen: int = 8, samples_per_class: int = 60,
                     val_fraction: float = 0.2, test_fraction: float = 0.3, seed: int = 0,
                     severity: float = 0.5, out_dir=None) -> DatasetBundle:
    """Procedural sign dataset; optionally written to ``out_dir``."""
    seed = int(seed)
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    if not 0 < num_seen < num_classes:
        raise ValueError(f"num_seen must satisfy 0 < num_seen < num_classes, got {num_seen}/{num_classes}")
    if not (0 < val_fraction < 1 and 0 < test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError("fractions must lie in (0,1) and sum to less than 1")
    n_train, n_val, n_test = _split_sizes(samples_per_class, val_fraction, test_fraction)
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{samples_per_class} samples/class leaves an empty partition")

    design = stream(seed, "dataset-design")
    specs = make_sign_specs(num_classes, design)
    classes = list(range(num_classes))
    seen = sorted(design.permutation(num_classes)[:num_seen].tolist())
    unseen = [c for c in classes if c not in seen]

    templates = np.stack([to_uint8(render_template(s)) for s in specs])
    images, labels, paths, parts = [], [], [], []
    for c in classes:
        rng = stream(seed, "dataset-real", c)
        order = rng.permutation(samples_per_class)
        suffix = "_s" if c in seen else "_u"
        names = np.empty(samples_per_class, dtype=object)
        names[order[:n_val]] = "psi" + suffix
        names[order[n_val:n_val + n_test]] = "omega" + suffix
        names[order[n_val + n_test:]] = "phi" + suffix
        for i in range(samples_per_class):
            images.append(to_uint8(synthesize_real(specs[c], rng, severity)))
            labels.append(c)
            paths.append(f"real/{c}/{i:04d}.ppm")
            parts.append(names[i])

    meta = {
        "generator": {"num_classes": num_classes, "num_seen": num_seen,
                      "samples_per_class": samples_per_class, "val_fraction": val_fraction,
                      "test_fraction": test_fraction, "severity": severity},
        "seed": seed,
        "specs": [vars(s) for s in specs],
    }
    bundle = DatasetBundle(classes, seen, unseen, templates, np.stack(images), np.array(labels),
                           paths, np.array(parts), meta=meta)
    if out_dir is not None:
        write_dataset(bundle, out_dir)
    return bundle


def _ppm_bytes(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0)), mode="RGB").save(buf, format="PPM")
    return buf.getvalue()


def _read_ppm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "RGB":
                raise DatasetError(f"{path}: expected an RGB PPM image, got {im.format}/{im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise DatasetError(f"{path}: unreadable image ({exc})") from exc
    if arr.shape != (SIZE, SIZE, 3):
        raise DatasetError(f"{path}: expected 48x48 RGB, got {arr.shape}")
    return arr.transpose(2, 0, 1).copy()


def write_dataset(bundle: DatasetBundle, out_dir) -> Path:
    out = Path(out_dir)
    (out / "templates").mkdir(parents=True, exist_ok=True)
    for c, img in zip(bundle.classes, bundle.templates):
        (out / "templates" / f"{c}.ppm").write_bytes(_ppm_bytes(img))
    for path, img in zip(bundle.real_paths, bundle.real_images):
        target = out / path
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(_ppm_bytes(img))
    with open(out / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "class_id", "partition"])
        for path, c, p in zip(bundle.real_paths, bundle.real_labels.tolist(), bundle.partitions.tolist()):
            w.writerow([path, c, p])
    meta = dict(bundle.meta)
    meta.update(classes=bundle.classes, seen=bundle.seen, unseen=bundle.unseen,
                channel_means=[float(v) for v in bundle.channel_means])
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_dataset(path) -> DatasetBundle:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
        with open(root / "index.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset at {root}: {exc}") from exc
    try:
        classes = [int(c) for c in meta["classes"]]
        seen = [int(c) for c in meta["seen"]]
        unseen = [int(c) for c in meta["unseen"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"meta.json lacks a valid class list: {exc}") from exc

    templates = []
    for c in classes:
        tpath = root / "templates" / f"{c}.ppm"
        if not tpath.exists():
            raise DatasetError(f"missing template for class {c}")
        templates.append(_read_ppm(tpath))

    paths, labels, parts, images = [], [], [], []
    seen_paths = set()
    for row in rows:
        try:
            p, c, part = row["path"], int(row["class_id"]), row["partition"]
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"malformed index row {row}") from exc
        if p in seen_paths:
            raise DatasetError(f"duplicate index entry {p}")
        seen_paths.add(p)
        paths.append(p)
        labels.append(c)
        parts.append(part)
        images.append(_read_ppm(root / p))

    bundle = DatasetBundle(classes, seen, unseen, np.stack(templates),
                           np.stack(images) if images else np.zeros((0, 3, SIZE, SIZE), np.uint8),
                           np.array(labels, dtype=np.int64), paths, np.array(parts),
                           meta={k: v for k, v in meta.items()
                                 if k not in ("classes", "seen", "unseen", "channel_means")})
    stored = meta.get("channel_means")
    if stored is not None and np.max(np.abs(np.asarray(stored) - bundle.channel_means)) > 1e-6:
        raise DatasetError("channel means in meta.json disagree with the images")
    return bundle
