"""Seeded construction of quadruples, triplets and mini-batches.

Image references are integers: a template is referenced by its class id and
a real image by its row in ``DatasetBundle.real_images``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import TRAINING_PARTITIONS, DatasetBundle
from .losses import Variant


class SamplingError(ValueError):
    pass


class Quadruple(NamedTuple):
    class_a: int
    class_b: int
    real_a: int
    real_b: int


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int
    anchor_is_template: bool = False


class TuplePool:
    """Real images eligible for training, grouped by class."""

    def __init__(self, bundle: DatasetBundle, partitions=TRAINING_PARTITIONS, classes=None):
        classes = bundle.seen if classes is None else classes
        rows = bundle.indices(*partitions, classes=classes)
        self.bundle = bundle
        self.partitions = tuple(partitions)
        self.by_class = {c: rows[bundle.real_labels[rows] == c] for c in sorted(classes)}
        self.classes = np.array([c for c, r in self.by_class.items() if r.size > 0], dtype=np.int64)
        self.empty = [c for c, r in self.by_class.items() if r.size == 0]

    def rows(self) -> np.ndarray:
        return np.concatenate([self.by_class[c] for c in self.classes.tolist()])


def sample_quadruple(pool: TuplePool, rng: np.random.Generator) -> Quadruple:
    """Two distinct classes (uniform unordered pair), then one real image of each."""
    if pool.empty:
        raise SamplingError(f"classes without real training images: {pool.empty}")
    if pool.classes.size < 2:
        raise SamplingError("quadruples need at least 2 classes")
    a, b = rng.choice(pool.classes, size=2, replace=False)
    xa = rng.choice(pool.by_class[int(a)])
    xb = rng.choice(pool.by_class[int(b)])
    return Quadruple(int(a), int(b), int(xa), int(xb))


def sample_triplet(pool: TuplePool, rng: np.random.Generator) -> Triplet:
    """Real-only triplet: anchor and positive share a class, negative does not."""
    if pool.classes.size < 2:
        raise SamplingError("triplets need at least 2 classes")
    rich = np.array([c for c in pool.classes.tolist() if pool.by_class[c].size >= 2])
    if rich.size == 0:
        raise SamplingError("no class has 2 or more real images")
    y = int(rng.choice(rich))
    anchor, positive = rng.choice(pool.by_class[y], size=2, replace=False)
    others = pool.classes[pool.classes != y]
    k = int(rng.choice(others))
    negative = rng.choice(pool.by_class[k])
    return Triplet(int(anchor), int(positive), int(negative))


def sample_triplet_da(pool: TuplePool, rng: np.random.Generator) -> Triplet:
    """Template anchor of class y, positive from class y, negative from k != y.

    ``anchor`` holds the class id of the template.
    """
    if pool.classes.size < 2:
        raise SamplingError("triplets need at least 2 classes")
    y = int(rng.choice(pool.classes))
    positive = rng.choice(pool.by_class[y])
    k = int(rng.choice(pool.classes[pool.classes != y]))
    negative = rng.choice(pool.by_class[k])
    return Triplet(y, int(positive), int(negative), anchor_is_template=True)


@dataclass
class Batch:
    """A mini-batch routed to the two towers.

    ``template_classes`` and ``real_rows`` list the images each tower embeds,
    in blocks of ``size``: (A, B) templates and (A, B) reals for quadruples,
    anchors and (positive, negative) reals for template-anchored triplets,
    (anchor, positive, negative) reals for real triplets.
    """

    mode: Variant
    tuples: list
    template_classes: np.ndarray
    real_rows: np.ndarray

    def template_images(self, bundle: DatasetBundle) -> np.ndarray:
        rows = [bundle.class_row(c) for c in self.template_classes.tolist()]
        return bundle.preprocessed_templates()[rows]

    def real_images(self, bundle: DatasetBundle) -> np.ndarray:
        return bundle.preprocessed_reals()[self.real_rows]

    @property
    def size(self) -> int:
        return len(self.tuples)


def make_batch(pool: TuplePool, rng: np.random.Generator, batch_size: int = 100,
               mode: Variant | str = Variant.HINGEM5) -> Batch:
    """``batch_size`` independent tuples for the given training mode.

    Quadruple batches route 2 templates and 2 reals per tuple; template-
    anchored triplets 1 and 2; real triplets 0 and 3.
    """
    mode = Variant.parse(mode)
    if mode.is_quadruplet:
        tuples = [sample_quadruple(pool, rng) for _ in range(batch_size)]
        tcls = np.array([q.class_a for q in tuples] + [q.class_b for q in tuples], dtype=np.int64)
        rrows = np.array([q.real_a for q in tuples] + [q.real_b for q in tuples], dtype=np.int64)
    elif mode is Variant.TRIPLET_DA:
        tuples = [sample_triplet_da(pool, rng) for _ in range(batch_size)]
        tcls = np.array([t.anchor for t in tuples], dtype=np.int64)
        rrows = np.array([t.positive for t in tuples] + [t.negative for t in tuples], dtype=np.int64)
    else:
        tuples = [sample_triplet(pool, rng) for _ in range(batch_size)]
        tcls = np.zeros(0, dtype=np.int64)
        rrows = np.array([t.anchor for t in tuples] + [t.positive for t in tuples]
                         + [t.negative for t in tuples], dtype=np.int64)
    return Batch(mode, tuples, tcls, rrows)
