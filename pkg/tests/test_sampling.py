import numpy as np
import pytest

from oracles import chi2_3sigma_limit, chi2_uniform, unordered_pairs
from quadnet.data import generate_dataset
from quadnet.losses import Variant
from quadnet.sampling import (SamplingError, TuplePool, make_batch, sample_quadruple, sample_triplet,
                              sample_triplet_da)


@pytest.fixture(scope="module")
def bundle5():
    # 5 seen classes, 2 unseen
    return generate_dataset(num_classes=7, num_seen=5, samples_per_class=10, seed=2)


@pytest.fixture(scope="module")
def bundle2():
    return generate_dataset(num_classes=3, num_seen=2, samples_per_class=10, seed=3)


def test_two_classes_forced(bundle2):
    pool = TuplePool(bundle2)
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = sample_quadruple(pool, rng)
        assert {q.class_a, q.class_b} == set(bundle2.seen)
        t = sample_triplet_da(pool, rng)
        assert t.negative in pool.by_class[[c for c in bundle2.seen if c != t.anchor][0]]


def test_quadruple_sequence_is_deterministic(bundle5):
    pool = TuplePool(bundle5)
    a = [sample_quadruple(pool, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_quadruple(pool, np.random.default_rng(9)) for _ in range(3)]
    assert a == b


def test_unordered_pair_frequencies_uniform(bundle5):
    pool = TuplePool(bundle5)
    rng = np.random.default_rng(11)
    counts = {p: 0 for p in unordered_pairs(pool.classes)}
    assert len(counts) == 10
    for _ in range(10_000):
        q = sample_quadruple(pool, rng)
        counts[tuple(sorted((q.class_a, q.class_b)))] += 1
    freq = np.array(list(counts.values())) / 10_000
    sigma = np.sqrt(0.1 * 0.9 / 10_000)
    assert np.all(np.abs(freq - 0.1) < 3 * sigma)
    chi2, df = chi2_uniform(list(counts.values()))
    assert chi2 < chi2_3sigma_limit(df)


def test_triplet_labels_and_no_templates(bundle5):
    pool = TuplePool(bundle5)
    labels = bundle5.real_labels
    allowed = set(pool.rows().tolist())
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        t = sample_triplet(pool, rng)
        assert not t.anchor_is_template
        assert labels[t.anchor] == labels[t.positive] != labels[t.negative]
        assert t.anchor != t.positive
        assert {t.anchor, t.positive, t.negative} <= allowed


def test_triplet_minimal_class(bundle2):
    # keep two images of one class and one of the other
    c0, c1 = bundle2.seen
    pool = TuplePool(bundle2)
    pool.by_class = {c0: pool.by_class[c0][:2], c1: pool.by_class[c1][:1]}
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = sample_triplet(pool, rng)
        assert {t.anchor, t.positive} == set(pool.by_class[c0].tolist())
    pool.by_class = {c0: pool.by_class[c0][:1], c1: pool.by_class[c1][:1]}
    with pytest.raises(SamplingError):
        sample_triplet(pool, rng)


def test_triplet_da_anchor_uniform(bundle5):
    pool = TuplePool(bundle5)
    rng = np.random.default_rng(4)
    counts = {c: 0 for c in pool.classes.tolist()}
    for _ in range(10_000):
        t = sample_triplet_da(pool, rng)
        assert t.anchor_is_template
        assert bundle5.real_labels[t.positive] == t.anchor != bundle5.real_labels[t.negative]
        counts[t.anchor] += 1
    chi2, df = chi2_uniform(list(counts.values()))
    assert chi2 < chi2_3sigma_limit(df)


def test_unseen_and_test_images_never_sampled(bundle5):
    pool = TuplePool(bundle5)
    forbidden = set(bundle5.indices("omega_s", "phi_u", "psi_u", "omega_u").tolist())
    assert not forbidden & set(pool.rows().tolist())


@pytest.mark.parametrize("mode,n_templates,n_reals", [
    ("hingem5", 200, 200), ("triplet-da", 100, 200), ("triplet", 0, 300)])
def test_batch_routing(bundle5, mode, n_templates, n_reals):
    pool = TuplePool(bundle5)
    b = make_batch(pool, np.random.default_rng(0), 100, mode)
    assert b.size == 100 and len(b.template_classes) == n_templates and len(b.real_rows) == n_reals
    again = make_batch(pool, np.random.default_rng(0), 100, mode)
    assert np.array_equal(b.real_rows, again.real_rows)
    assert np.array_equal(b.template_classes, again.template_classes)
    labels = bundle5.real_labels
    if Variant.parse(mode).is_quadruplet:
        for i, q in enumerate(b.tuples):
            assert q.class_a != q.class_b
            assert b.template_classes[i] == q.class_a == labels[b.real_rows[i]]
            assert b.template_classes[100 + i] == q.class_b == labels[b.real_rows[100 + i]]
    assert b.real_images(bundle5).shape == (n_reals, 3, 48, 48)


def test_errors(bundle5):
    pool = TuplePool(bundle5, classes=bundle5.seen[:1])
    with pytest.raises(SamplingError):
        sample_quadruple(pool, np.random.default_rng(0))
    with pytest.raises(SamplingError):
        sample_triplet_da(pool, np.random.default_rng(0))
