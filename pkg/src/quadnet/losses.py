"""Margin losses over quadruplet and triplet embeddings.

Every function accepts single embeddings ``[D]`` or batches ``[N, D]``; a
batch is reduced by the mean over tuples.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

from .tensor import Tensor, euclidean_distance, relu

__all__ = [
    "LossConfig", "QuadrupleEmbeddings", "Variant", "push_loss", "pull_loss", "loss_hingem3",
    "loss_hingem5", "loss_hingem6", "loss_contrastive5", "loss_triplet", "quadruplet_loss",
]


class Variant(str, enum.Enum):
    HINGEM3 = "hingem3"
    HINGEM5 = "hingem5"
    HINGEM6 = "hingem6"
    CONTRASTIVE5 = "contrastive5"
    TRIPLET = "triplet"
    TRIPLET_DA = "triplet-da"

    @property
    def is_quadruplet(self) -> bool:
        return self in (Variant.HINGEM3, Variant.HINGEM5, Variant.HINGEM6, Variant.CONTRASTIVE5)

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "-")
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown loss variant {value!r}; choose from {[v.value for v in cls]}")


@dataclass(frozen=True)
class LossConfig:
    push_margin: float = 1.0
    pull_margin: float = 0.2
    variant: Variant = Variant.HINGEM5

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if not self.push_margin > 0:
            raise ValueError(f"push margin must be positive, got {self.push_margin}")
        if not 0 <= self.pull_margin < self.push_margin:
            raise ValueError(
                f"pull margin must satisfy 0 <= m' < m, got m'={self.pull_margin}, m={self.push_margin}")


@dataclass
class QuadrupleEmbeddings:
    template_a: Tensor
    template_b: Tensor
    real_a: Tensor
    real_b: Tensor

    def __post_init__(self):
        shapes = {t.shape for t in (self.template_a, self.template_b, self.real_a, self.real_b)}
        if len(shapes) != 1:
            raise ValueError(f"quadruple embeddings disagree in shape: {sorted(shapes)}")


def push_loss(d: Tensor, m: float) -> Tensor:
    """max(0, m - d)"""
    return relu(m - d)


def pull_loss(d: Tensor, m_pull: float) -> Tensor:
    """max(0, d - m')"""
    return relu(d - m_pull)


def _reduce(per_tuple: Tensor) -> Tensor:
    return per_tuple.mean() if per_tuple.ndim else per_tuple


def _hingem3_terms(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    m, mp = cfg.push_margin, cfg.pull_margin
    return (push_loss(euclidean_distance(q.template_a, q.template_b), m)
            + pull_loss(euclidean_distance(q.template_a, q.real_a), mp)
            + pull_loss(euclidean_distance(q.template_b, q.real_b), mp))


def _cross_push(q: QuadrupleEmbeddings, m: float) -> Tensor:
    return (push_loss(euclidean_distance(q.template_a, q.real_b), m)
            + push_loss(euclidean_distance(q.real_a, q.template_b), m))


def loss_hingem3(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    return _reduce(_hingem3_terms(q, cfg))


def loss_hingem5(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    return _reduce(_hingem3_terms(q, cfg) + _cross_push(q, cfg.push_margin))


def loss_hingem6(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    m = cfg.push_margin
    terms = (_hingem3_terms(q, cfg) + _cross_push(q, m)
             + push_loss(euclidean_distance(q.real_a, q.real_b), m))
    return _reduce(terms)


def loss_contrastive5(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    """HingeM-5 with the two pull hinges replaced by the raw distances."""
    m = cfg.push_margin
    terms = (push_loss(euclidean_distance(q.template_a, q.template_b), m)
             + euclidean_distance(q.template_a, q.real_a)
             + euclidean_distance(q.template_b, q.real_b)
             + _cross_push(q, m))
    return _reduce(terms)


def loss_triplet(anchor: Tensor, positive: Tensor, negative: Tensor, cfg: LossConfig) -> Tensor:
    """push(d(anchor, negative)) + pull(d(anchor, positive)).

    Shared by plain triplets (real anchor) and template-anchored triplets.
    """
    terms = (push_loss(euclidean_distance(anchor, negative), cfg.push_margin)
             + pull_loss(euclidean_distance(anchor, positive), cfg.pull_margin))
    return _reduce(terms)


_QUAD = {
    Variant.HINGEM3: loss_hingem3,
    Variant.HINGEM5: loss_hingem5,
    Variant.HINGEM6: loss_hingem6,
    Variant.CONTRASTIVE5: loss_contrastive5,
}


def quadruplet_loss(q: QuadrupleEmbeddings, cfg: LossConfig) -> Tensor:
    try:
        fn = _QUAD[cfg.variant]
    except KeyError:
        raise ValueError(f"{cfg.variant.value} is not a quadruplet loss") from None
    return fn(q, cfg)
