"""Finite-difference checks for every differentiable operation.

Probe points are drawn away from kinks (relu at 0, pooling ties, hinge
margins, coincident points) so central differences are valid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .nn import layers
from .nn.model import Architecture, PARAM_ORDER, embed, init_params

OP_TOL = 1e-5
LAYER_TOL = 1e-4
COMPOSITE_TOL = 1e-3


@dataclass
class Case:
    name: str
    fn: Callable
    inputs: list
    tol: float


def _away_from_zero(rng, shape, gap=1e-3):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


def _distinct(rng, shape):
    # a permutation of well-separated values: no pooling ties
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.001, n)).reshape(shape) - n * 0.005


def _weights(rng, shape):
    return T.Tensor(rng.standard_normal(shape))


def _quad_embeddings(rng, cfg: L.LossConfig, dim: int = 5):
    """Random quadruple batch whose pairwise distances avoid the hinge kinks."""
    while True:
        e = [rng.standard_normal((3, dim)) * 0.6 for _ in range(4)]
        dists = [np.linalg.norm(a - b, axis=1) for i, a in enumerate(e) for b in e[i + 1:]]
        d = np.concatenate(dists)
        if np.min(np.abs(d - cfg.push_margin)) > 1e-3 and np.min(np.abs(d - cfg.pull_margin)) > 1e-3:
            return e


def cases(seed: int = 0) -> list[Case]:
    rng = np.random.default_rng(seed)
    out: list[Case] = []

    def add(name, fn, inputs, tol=OP_TOL):
        out.append(Case(name, fn, inputs, tol))

    a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    w = _weights(rng, (3, 4))
    add("add", lambda x, y: (T.add(x, y) * w).sum(), [a, b])
    add("sub", lambda x, y: (T.sub(x, y) * w).sum(), [a, b])
    add("mul", lambda x, y: (T.mul(x, y) * w).sum(), [a, b])
    add("div", lambda x, y: (T.div(x, y) * w).sum(), [a, rng.uniform(0.5, 2.0, (3, 4))])
    add("scale", lambda x: (T.scale(x, -2.5) * w).sum(), [a])
    add("scalar-broadcast", lambda x, s: (T.mul(x, s) * w).sum(), [a, np.array(1.7)])
    add("matmul", lambda x, y: (T.matmul(x, y) * _fixed).sum(),
        [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    _fixed = _weights(rng, (3, 2))
    add("sum-axis", lambda x: (x.sum(axis=1) * T.Tensor([1.0, -2.0, 0.5])).sum(), [a])
    add("mean", lambda x: T.mean(T.mul(x, x)), [a])
    add("reshape", lambda x: (x.reshape((4, 3)) * T.Tensor(np.arange(12.0).reshape(4, 3))).sum(), [a])
    add("expand", lambda x: (T.expand(x, (3, 4)) * w).sum(), [rng.standard_normal((3, 1))])
    add("take", lambda x: (T.take(x, [2, 0, 2]) * w).sum(), [a])
    add("concat", lambda x, y: (T.concat([x, y], axis=0) * _weights(np.random.default_rng(1), (6, 4))).sum(),
        [a, b])
    add("relu", lambda x: (T.relu(x) * w).sum(), [_away_from_zero(rng, (3, 4))])
    add("sqrt", lambda x: (T.sqrt(x) * w).sum(), [rng.uniform(0.2, 2.0, (3, 4))])
    add("maximum", lambda x, y: (T.maximum(x, y) * w).sum(), [a, a + _away_from_zero(rng, (3, 4))])
    add("euclidean_distance", lambda x, y: T.euclidean_distance(x, y),
        [rng.standard_normal(100), rng.standard_normal(100)])
    add("euclidean_distance-batch", lambda x, y: (T.euclidean_distance(x, y) * T.Tensor([1.0, -0.5, 2.0])).sum(),
        [rng.standard_normal((3, 6)), rng.standard_normal((3, 6))])

    gconv = _weights(rng, (2, 4, 7, 7))
    add("conv2d", lambda x, k, bias: (layers.conv2d(x, k, bias, pad=2) * gconv).sum(),
        [rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 4, 4)) * 0.3,
         rng.standard_normal(4)], LAYER_TOL)
    gpool = _weights(rng, (2, 3, 3))
    add("maxpool2", lambda x: (layers.maxpool2(x) * gpool).sum(), [_distinct(rng, (2, 7, 6))], LAYER_TOL)
    glcn7 = _weights(rng, (2, 3, 9, 9))
    add("lcn-7", lambda x: (layers.lcn(x, 7) * glcn7).sum(),
        [rng.standard_normal((2, 3, 9, 9))], LAYER_TOL)
    glcn6 = _weights(rng, (1, 2, 6, 6))
    add("lcn-6", lambda x: (layers.lcn(x, 6) * glcn6).sum(),
        [rng.standard_normal((1, 2, 6, 6))], LAYER_TOL)
    glin = _weights(rng, (3, 5))
    add("linear", lambda x, k, bias: (layers.linear(x, k, bias) * glin).sum(),
        [rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)], LAYER_TOL)

    cfg = L.LossConfig(1.0, 0.2)
    quad = _quad_embeddings(rng, cfg)
    for variant, fn in (("hingem3", L.loss_hingem3), ("hingem5", L.loss_hingem5),
                        ("hingem6", L.loss_hingem6), ("contrastive5", L.loss_contrastive5)):
        add(f"loss-{variant}", lambda ta, tb, xa, xb, fn=fn: fn(L.QuadrupleEmbeddings(ta, tb, xa, xb), cfg),
            quad, COMPOSITE_TOL)
    add("loss-triplet", lambda a_, p_, n_: L.loss_triplet(a_, p_, n_, cfg), quad[:3], COMPOSITE_TOL)

    # composite graph conv -> relu -> pool -> lcn -> ... -> fc through the real tower
    tiny = Architecture(conv1=2, conv2=2, conv3=2, fc1=4)
    params = init_params(np.random.default_rng(seed), 3, tiny)
    image = T.Tensor(rng.standard_normal((3, 48, 48)))
    gemb = _weights(rng, (3,))

    def composite(*tensors):
        from .nn.model import EmbedderParams
        p = EmbedderParams(dict(zip(PARAM_ORDER, tensors)))
        return (embed(p, T.Tensor(image.data)) * gemb).sum()

    add("embed-composite", composite, [params[n].data for n in PARAM_ORDER], COMPOSITE_TOL)
    return out


def run_suite(seed: int = 0, names=None) -> list[tuple[str, float, float, bool]]:
    """(name, max relative error, tolerance, passed) for each case."""
    results = []
    for case in cases(seed):
        if names is not None and case.name not in names:
            continue
        err = T.grad_check(case.fn, case.inputs)
        results.append((case.name, err, case.tol, err < case.tol))
    return results
