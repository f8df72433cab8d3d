"""One-shot nearest-template evaluation, convergence detection and statistics."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import SEEN_PARTITIONS, UNSEEN_PARTITIONS, DatasetBundle
from .nn.model import EmbedderParams, embed

log = logging.getLogger(__name__)


def embed_batches(params: EmbedderParams, images: np.ndarray, chunk: int = 256,
                  fc1: bool = False) -> np.ndarray:
    """Inference-only embedding (nothing recorded), in chunks."""
    outs = []
    for start in range(0, len(images), chunk):
        e, h = embed(params, images[start:start + chunk], return_fc1=True)
        outs.append((h if fc1 else e).data)
    if not outs:
        width = params.arch.fc1 if fc1 else params.dim
        return np.zeros((0, width), dtype=np.float32)
    return np.concatenate(outs)


@dataclass
class EvalReport:
    per_class_accuracy: dict[int, float]
    per_class_queries: dict[int, int]
    seen_avg: float | None
    unseen_avg: float | None
    overall_avg: float | None
    n_queries: int
    partitions: list[str]
    excluded_classes: list[int] = field(default_factory=list)
    sample_avg: float | None = None
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_accuracy"] = {str(k): v for k, v in self.per_class_accuracy.items()}
        d["per_class_queries"] = {str(k): v for k, v in self.per_class_queries.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["per_class_accuracy"] = {int(k): v for k, v in d["per_class_accuracy"].items()}
        d["per_class_queries"] = {int(k): v for k, v in d["per_class_queries"].items()}
        return cls(**d)


def _mean_or_none(values) -> float | None:
    values = list(values)
    return float(np.mean(values)) if values else None


def nearest_anchor(anchors: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Row index of the closest anchor for each query; ties go to the lower index."""
    a = anchors.astype(np.float64)
    out = np.empty(len(queries), dtype=np.int64)
    for start in range(0, len(queries), 512):
        q = queries[start:start + 512].astype(np.float64)
        d2 = ((q[:, None, :] - a[None, :, :]) ** 2).sum(-1)
        out[start:start + 512] = np.argmin(d2, axis=1)
    return out


def one_shot_nn(params_t: EmbedderParams, params_r: EmbedderParams, bundle: DatasetBundle,
                partitions: Sequence[str] = ("omega_s", "omega_u")) -> EvalReport:
    """C-way nearest-template classification of real queries.

    Every class's template is embedded with the template tower and each
    query image with the real tower; the prediction is the class of the
    nearest anchor.  Aggregates are unweighted means of per-class accuracy.
    """
    if params_t.dim != params_r.dim:
        raise ValueError(f"tower dimensions differ: {params_t.dim} vs {params_r.dim}")
    partitions = list(partitions)
    rows = bundle.indices(*partitions)
    if rows.size == 0:
        raise ValueError(f"partitions {partitions} contain no images")
    order = np.argsort(bundle.classes, kind="stable")
    anchor_ids = np.asarray(bundle.classes)[order]
    anchors = embed_batches(params_t, bundle.preprocessed_templates()[order])
    queries = embed_batches(params_r, bundle.preprocessed_reals()[rows])
    predicted = anchor_ids[nearest_anchor(anchors, queries)]
    truth = bundle.real_labels[rows]

    expected = set()
    if any(p in SEEN_PARTITIONS for p in partitions):
        expected |= set(bundle.seen)
    if any(p in UNSEEN_PARTITIONS for p in partitions):
        expected |= set(bundle.unseen)
    acc, counts, excluded = {}, {}, []
    for c in sorted(expected):
        mask = truth == c
        if not mask.any():
            excluded.append(c)
            continue
        counts[c] = int(mask.sum())
        acc[c] = float(np.mean(predicted[mask] == c))
    if excluded:
        log.warning("%d classes have no queries in %s and are excluded", len(excluded), partitions)
    return EvalReport(
        per_class_accuracy=acc,
        per_class_queries=counts,
        seen_avg=_mean_or_none(acc[c] for c in acc if c in bundle.seen),
        unseen_avg=_mean_or_none(acc[c] for c in acc if c in bundle.unseen),
        overall_avg=_mean_or_none(acc.values()),
        n_queries=int(rows.size),
        partitions=partitions,
        excluded_classes=excluded,
        metadata={"dataset": bundle.fingerprint()},
    )


def transfer_eval(params_t: EmbedderParams, params_r: EmbedderParams, bundle: DatasetBundle,
                  partitions: Sequence[str] = ("omega_s", "omega_u")) -> EvalReport:
    """One-shot evaluation of towers trained elsewhere against ``bundle``'s own templates.

    Adds the sample-weighted accuracy to the class-averaged report.
    """
    report = one_shot_nn(params_t, params_r, bundle, partitions)
    total = sum(report.per_class_queries.values())
    report.sample_avg = float(sum(report.per_class_accuracy[c] * n
                                  for c, n in report.per_class_queries.items()) / total)
    return report


# ---------------------------------------------------------------------------
# convergence


def convergence_check(loss_history: Sequence[float], threshold: float = 0.05) -> bool:
    """True when the last relative change |L_t - L_{t-1}| / L_{t-1} is below ``threshold``.

    A non-positive previous loss never counts as converged.
    """
    if len(loss_history) < 2:
        raise ValueError("need at least two loss values")
    prev, cur = float(loss_history[-2]), float(loss_history[-1])
    if not prev > 0:
        log.warning("previous loss %r is not positive; treating as not converged", prev)
        return False
    return abs(cur - prev) / prev < threshold


class ConvergenceMonitor:
    """Feeds per-iteration losses into fixed windows and applies
    :func:`convergence_check` to consecutive window means; converged after
    ``patience`` consecutive passes."""

    def __init__(self, window: int = 1000, patience: int = 3, threshold: float = 0.05):
        self.window, self.patience, self.threshold = window, patience, threshold
        self.window_means: list[float] = []
        self._buf: list[float] = []
        self.streak = 0

    def update(self, loss: float) -> bool:
        self._buf.append(float(loss))
        if len(self._buf) < self.window:
            return False
        self.window_means.append(float(np.mean(self._buf)))
        self._buf = []
        if len(self.window_means) >= 2:
            ok = convergence_check(self.window_means, self.threshold)
            self.streak = self.streak + 1 if ok else 0
        return self.converged

    @property
    def converged(self) -> bool:
        return self.streak >= self.patience


# ---------------------------------------------------------------------------
# statistics


def ci95(values: Sequence[float]) -> tuple[float, float]:
    """Mean and normal-approximation 95% half-width, 1.96 * s / sqrt(n)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("ci95 needs at least two values")
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def binomial_threshold(n: int, p: float, sigmas: float = 3.0) -> float:
    """Accuracy that exceeds chance ``p`` by ``sigmas`` binomial standard errors."""
    return p + sigmas * math.sqrt(p * (1 - p) / n)


# ---------------------------------------------------------------------------
# ablation


ABLATION_HEADER = ["dim", "variant", "avg", "seen", "unseen"]


def ablation_sweep(bundle: DatasetBundle, dims: Sequence[int], variants: Sequence[str],
                   config, seed: int | None = None) -> list[dict]:
    """Train one model per (dim, variant) on the seen training split and
    evaluate on both validation splits."""
    from .train import train  # training depends on this module

    rows = []
    for dim in dims:
        for variant in variants:
            cfg = config.replace(dim=int(dim), loss=variant,
                                 seed=config.seed if seed is None else seed)
            result = train(bundle, cfg, partitions=("phi_s",))
            report = one_shot_nn(result.params_t, result.params_r, bundle, ("psi_s", "psi_u"))
            rows.append({"dim": int(dim), "variant": cfg.loss, "avg": report.overall_avg,
                         "seen": report.seen_avg, "unseen": report.unseen_avg, "report": report})
    return rows


def write_ablation_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for r in rows:
            w.writerow([r["dim"], r["variant"]] + [f"{r[k]:.6f}" for k in ("avg", "seen", "unseen")])
