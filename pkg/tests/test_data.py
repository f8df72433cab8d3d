import csv
import json

import numpy as np
import pytest

from quadnet.data import (NEUTRAL, PARTITIONS, SHAPES, DatasetError, SignSpec, compute_channel_means,
                          generate_dataset, load_dataset, make_sign_specs, preprocess, render_template,
                          synthesize_real, to_uint8, write_dataset)
from quadnet.seeding import stream


def spec(shape="circle", glyph=3):
    return SignSpec(shape, "red", "white", glyph)


def test_template_deterministic_and_glyph_sensitive():
    a, b = render_template(spec()), render_template(spec())
    assert a.shape == (3, 48, 48)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, render_template(spec(glyph=4)))


@pytest.mark.parametrize("shape", SHAPES)
def test_border_shape_coverage(shape):
    img = render_template(spec(shape))
    # pixel-count oracle: anything not equal to the neutral background
    covered = np.any(np.abs(img - NEUTRAL) > 1e-6, axis=0).mean()
    assert 0.30 <= covered <= 0.90


def test_severity_zero_is_template():
    s = spec()
    real = synthesize_real(s, np.random.default_rng(0), 0.0)
    np.testing.assert_allclose(real, render_template(s), atol=1e-12)


def test_synthesis_deterministic():
    s = spec()
    a = synthesize_real(s, np.random.default_rng(5), 0.7)
    b = synthesize_real(s, np.random.default_rng(5), 0.7)
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1


def test_distance_to_template_grows_with_severity():
    s = spec("octagon", 11)
    tmpl = render_template(s)
    means = []
    for sev in (0.0, 0.25, 0.5, 0.75, 1.0):
        rng = np.random.default_rng(100)
        means.append(np.mean([np.abs(synthesize_real(s, rng, sev) - tmpl).mean() for _ in range(100)]))
    assert all(b > a for a, b in zip(means, means[1:])), means


def test_sign_specs_distinct():
    specs = make_sign_specs(40, np.random.default_rng(0))
    triples = {(s.border_shape, s.border_color, s.glyph_id) for s in specs}
    assert len(triples) == 40


def test_partition_sizes_and_invariants():
    b = generate_dataset(num_classes=5, num_seen=3, samples_per_class=100, seed=0)
    assert len(b.unseen) == 2 and not set(b.seen) & set(b.unseen)
    for c in b.classes:
        parts = b.partitions[b.real_labels == c]
        sfx = "_s" if c in b.seen else "_u"
        assert [int((parts == p + sfx).sum()) for p in ("phi", "psi", "omega")] == [50, 20, 30]
    # disjoint and covering by construction of the per-row label
    assert sum(b.indices(p).size for p in PARTITIONS) == len(b.real_labels)


def test_twelve_classes_four_unseen():
    b = generate_dataset(num_classes=12, num_seen=8, samples_per_class=5, val_fraction=0.2,
                         test_fraction=0.4, seed=0)
    assert len(b.seen) == 8 and len(b.unseen) == 4


@pytest.mark.parametrize("kwargs", [
    dict(num_classes=1, num_seen=0), dict(num_classes=4, num_seen=4),
    dict(val_fraction=0.6, test_fraction=0.5), dict(val_fraction=0.0),
])
def test_generate_rejects_bad_args(kwargs):
    with pytest.raises(ValueError):
        generate_dataset(samples_per_class=10, **kwargs)


def test_round_trip_and_byte_identical(tmp_path):
    b = generate_dataset(num_classes=4, num_seen=2, samples_per_class=10, seed=7, out_dir=tmp_path / "a")
    generate_dataset(num_classes=4, num_seen=2, samples_per_class=10, seed=7, out_dir=tmp_path / "b")
    loaded = load_dataset(tmp_path / "a")
    assert loaded.fingerprint() == b.fingerprint()
    assert np.array_equal(loaded.real_images, b.real_images)
    assert np.array_equal(loaded.templates, b.templates)
    assert loaded.seen == b.seen and loaded.classes == b.classes
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with open(tmp_path / "a" / "index.csv") as fh:
        assert fh.readline().strip() == "path,class_id,partition"


def test_channel_means_recomputed_from_files(tmp_path):
    generate_dataset(num_classes=4, num_seen=2, samples_per_class=10, seed=1, out_dir=tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    from PIL import Image
    acc, n = np.zeros(3), 0
    with open(tmp_path / "index.csv") as fh:
        for row in csv.DictReader(fh):
            if row["partition"] in ("phi_s", "psi_s"):
                acc += np.asarray(Image.open(tmp_path / row["path"]), dtype=np.float64).mean(axis=(0, 1)) / 255
                n += 1
    np.testing.assert_allclose(acc / n, meta["channel_means"], atol=1e-6)


def _dataset(tmp_path):
    generate_dataset(num_classes=3, num_seen=2, samples_per_class=10, seed=2, out_dir=tmp_path)
    return tmp_path


def test_load_errors(tmp_path):
    root = _dataset(tmp_path / "dup")
    lines = (root / "index.csv").read_text().splitlines()
    (root / "index.csv").write_text("\n".join(lines + [lines[1]]) + "\n")
    with pytest.raises(DatasetError, match="duplicate"):
        load_dataset(root)

    root = _dataset(tmp_path / "tmpl")
    (root / "templates" / "0.ppm").unlink()
    with pytest.raises(DatasetError, match="template"):
        load_dataset(root)

    root = _dataset(tmp_path / "bad")
    first = lines[1].split(",")[0]
    (root / first).write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(DatasetError):
        load_dataset(root)

    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "missing")


def test_overlapping_partition_marking_rejected(tmp_path):
    root = _dataset(tmp_path)
    text = (root / "index.csv").read_text()
    meta = json.loads((root / "meta.json").read_text())
    cls = meta["unseen"][0]
    text = text.replace(f"real/{cls}/0000.ppm,{cls},", f"real/{cls}/0000.ppm,{cls},phi_s#", 1)
    text = text.replace("phi_s#phi_u", "phi_s").replace("phi_s#psi_u", "phi_s").replace("phi_s#omega_u", "phi_s")
    (root / "index.csv").write_text(text)
    with pytest.raises(DatasetError):
        load_dataset(root)


def test_preprocess_examples(rng):
    means = np.array([0.2, 0.4, 0.6])
    const = np.broadcast_to(means[:, None, None], (3, 48, 48))
    assert np.all(preprocess(const, means) == 0)
    x = rng.uniform(0, 1, (3, 48, 48))
    np.testing.assert_allclose(preprocess(x, means) + means[:, None, None], x, atol=1e-6)
    with pytest.raises(ValueError):
        preprocess(np.zeros((3, 32, 32)), means)


def test_training_images_centred():
    b = generate_dataset(num_classes=4, num_seen=3, samples_per_class=40, seed=3)
    rows = b.indices("phi_s", "psi_s")
    centred = b.preprocessed_reals()[rows].astype(np.float64)
    assert np.all(np.abs(centred.mean(axis=(0, 2, 3))) < 1e-3)
    np.testing.assert_allclose(compute_channel_means(b), b.channel_means)


def test_templates_not_in_real_partitions():
    b = generate_dataset(num_classes=4, num_seen=2, samples_per_class=10, seed=0)
    assert not any(p.startswith("templates/") for p in b.real_paths)


def test_relabel_permutes_consistently():
    b = generate_dataset(num_classes=4, num_seen=2, samples_per_class=6, seed=0)
    mapping = {0: 3, 1: 2, 2: 1, 3: 0}
    r = b.relabel(mapping)
    for c in b.classes:
        assert np.array_equal(r.templates[r.class_row(mapping[c])], b.templates[b.class_row(c)])
    assert r.seen == sorted(mapping[c] for c in b.seen)


def test_to_uint8_round_trip():
    x = to_uint8(render_template(spec()))
    assert x.dtype == np.uint8 and x.shape == (3, 48, 48)


def test_write_then_load_passes_validation(tmp_path):
    b = generate_dataset(num_classes=3, num_seen=2, samples_per_class=10, seed=stream(0, "x").integers(100))
    write_dataset(b, tmp_path)
    load_dataset(tmp_path).validate()
