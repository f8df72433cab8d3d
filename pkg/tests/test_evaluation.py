import csv
import logging

import numpy as np
import pytest

from oracles import binomial_null_threshold
from quadnet.config import RunConfig
from quadnet.data import generate_dataset
from quadnet.evaluation import (ABLATION_HEADER, ConvergenceMonitor, EvalReport, ablation_sweep,
                                binomial_threshold, ci95, convergence_check, nearest_anchor, one_shot_nn,
                                transfer_eval, write_ablation_csv)
from quadnet.nn.model import DESK, init_params

from conftest import SMOKE_TRAIN


def check_report(report: EvalReport, bundle):
    accs = report.per_class_accuracy
    assert all(0.0 <= a <= 1.0 for a in accs.values())
    seen = [a for c, a in accs.items() if c in bundle.seen]
    unseen = [a for c, a in accs.items() if c in bundle.unseen]
    if seen:
        assert report.seen_avg == pytest.approx(np.mean(seen))
    if unseen:
        assert report.unseen_avg == pytest.approx(np.mean(unseen))
    assert report.overall_avg == pytest.approx(np.mean(list(accs.values())))
    assert sum(report.per_class_queries.values()) == report.n_queries


def test_nearest_anchor_exact_and_ties():
    anchors = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    assert nearest_anchor(anchors, anchors[[1, 0]]).tolist() == [1, 0]
    # equidistant from anchor 0 and 1 -> lower index
    assert nearest_anchor(anchors, np.array([[0.5, 0.0]])).tolist() == [0]


def test_orthogonal_invariance(rng):
    anchors, queries = rng.standard_normal((6, 5)), rng.standard_normal((40, 5))
    rot, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert np.array_equal(nearest_anchor(anchors, queries), nearest_anchor(anchors @ rot.T, queries @ rot.T))


def test_report_on_smoke_model(smoke_model):
    bundle, pt, pr = smoke_model
    before = {n: t.data.copy() for n, t in pt.items()}
    report = one_shot_nn(pt, pr, bundle, ("omega_s", "omega_u"))
    check_report(report, bundle)
    assert report.partitions == ["omega_s", "omega_u"]
    assert all(np.array_equal(before[n], t.data) for n, t in pt.items())
    again = EvalReport.from_dict(report.to_dict())
    assert again == report


def test_two_class_average():
    report = EvalReport({0: 1.0, 1: 0.5}, {0: 2, 1: 2}, 0.75, None, 0.75, 4, ["omega_s"])
    assert report.overall_avg == 0.75


def test_random_towers_at_chance():
    bundle = generate_dataset(num_classes=12, num_seen=8, samples_per_class=140, seed=5)
    pt, pr = init_params(0, 100, DESK), init_params(1, 100, DESK)
    report = one_shot_nn(pt, pr, bundle, ("omega_s", "omega_u"))
    assert report.n_queries >= 500
    p = 1 / 12
    correct = sum(report.per_class_accuracy[c] * n for c, n in report.per_class_queries.items())
    acc = correct / report.n_queries
    half = binomial_null_threshold(report.n_queries, p, 3.0) - p
    assert abs(acc - p) < half


def test_missing_class_is_excluded(smoke_bundle, caplog):
    pt = init_params(0, 8, DESK)
    keep = smoke_bundle.seen[0]
    rows = np.flatnonzero((smoke_bundle.partitions != "omega_s") | (smoke_bundle.real_labels == keep))
    from quadnet.data import DatasetBundle
    b = DatasetBundle(smoke_bundle.classes, smoke_bundle.seen, smoke_bundle.unseen, smoke_bundle.templates,
                      smoke_bundle.real_images[rows], smoke_bundle.real_labels[rows],
                      [smoke_bundle.real_paths[i] for i in rows], smoke_bundle.partitions[rows])
    with caplog.at_level(logging.WARNING):
        report = one_shot_nn(pt, pt, b, ("omega_s",))
    assert report.excluded_classes == [c for c in b.seen if c != keep]
    assert list(report.per_class_accuracy) == [keep]
    assert "excluded" in caplog.text


def test_dimension_mismatch(smoke_bundle):
    with pytest.raises(ValueError, match="dimension"):
        one_shot_nn(init_params(0, 8, DESK), init_params(0, 9, DESK), smoke_bundle)


def test_transfer_identity_and_relabeling(smoke_model):
    bundle, pt, pr = smoke_model
    base = one_shot_nn(pt, pr, bundle)
    same = transfer_eval(pt, pr, bundle)
    assert same.per_class_accuracy == base.per_class_accuracy
    weighted = sum(base.per_class_accuracy[c] * n for c, n in base.per_class_queries.items()) / base.n_queries
    assert same.sample_avg == pytest.approx(weighted)
    mapping = {c: (c * 5 + 2) % len(bundle.classes) for c in bundle.classes}
    moved = transfer_eval(pt, pr, bundle.relabel(mapping))
    assert {mapping[c]: a for c, a in base.per_class_accuracy.items()} == moved.per_class_accuracy


def test_transfer_to_disjoint_bundle_beats_chance(smoke_model):
    _, pt, pr = smoke_model
    other = generate_dataset(num_classes=8, num_seen=4, samples_per_class=40, seed=99)
    report = transfer_eval(pt, pr, other)
    p = 1 / len(other.classes)
    assert report.sample_avg > binomial_null_threshold(report.n_queries, p, 3.0)


def test_convergence_examples():
    assert convergence_check([1.0, 0.96]) is True
    assert convergence_check([1.0, 0.90]) is False
    assert convergence_check([1.0, 1.04]) is True
    assert convergence_check([0.0, 1.0]) is False
    with pytest.raises(ValueError):
        convergence_check([1.0])


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_convergence_scale_invariant(scale):
    for hist in ([1.0, 0.97], [2.0, 1.5], [3.0, 3.1], [0.3, 0.2]):
        assert convergence_check([v * scale for v in hist]) == convergence_check(hist)


def test_monitor_needs_consecutive_windows():
    mon = ConvergenceMonitor(window=2, patience=3)
    seq = [10, 10, 9.8, 9.8, 20, 20, 19.9, 19.9, 19.8, 19.8, 19.7, 19.7]
    flags = [mon.update(v) for v in seq]
    assert flags.index(True) == len(seq) - 1
    assert mon.window_means[:3] == [10, 9.8, 20]


def test_ci95_examples():
    assert ci95([5, 5, 5, 5]) == (5.0, 0.0)
    m, h = ci95([4, 6])
    assert m == 5.0 and h == pytest.approx(1.96)
    with pytest.raises(ValueError):
        ci95([1.0])


def test_ci95_coverage():
    rng = np.random.default_rng(2024)
    hits = 0
    for _ in range(1000):
        m, h = ci95(rng.standard_normal(100))
        hits += abs(m) <= h
    rate = hits / 1000
    assert abs(rate - 0.95) < 3 * np.sqrt(0.95 * 0.05 / 1000)


def test_binomial_threshold_matches_oracle():
    for n, p in ((72, 1 / 12), (500, 0.1), (30, 0.5)):
        assert binomial_threshold(n, p) == pytest.approx(binomial_null_threshold(n, p, 3.0), rel=1e-12)


def test_ablation_table(smoke_bundle, tmp_path):
    cfg = RunConfig(**{**SMOKE_TRAIN, "max_iters": 10, "window": 5})
    rows = ablation_sweep(smoke_bundle, [50, 100, 150], ["hingem5"], cfg, seed=0)
    assert [r["dim"] for r in rows] == [50, 100, 150]
    for r in rows:
        rep = r["report"]
        assert rep.partitions == ["psi_s", "psi_u"]
        assert r["avg"] == pytest.approx(np.mean(list(rep.per_class_accuracy.values())))
    path = tmp_path / "ablation.csv"
    write_ablation_csv(rows, path)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert table[0] == ABLATION_HEADER == ["dim", "variant", "avg", "seen", "unseen"]
    assert len(table) == 4
    again = ablation_sweep(smoke_bundle, [50], ["hingem5"], cfg, seed=0)
    assert again[0]["avg"] == rows[0]["avg"] and again[0]["report"] == rows[0]["report"]
