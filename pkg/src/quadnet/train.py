"""SGD training of the template and real towers."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import TRAINING_PARTITIONS, DatasetBundle
from .evaluation import ConvergenceMonitor
from .losses import QuadrupleEmbeddings, Variant, loss_triplet, quadruplet_loss
from .nn.model import EmbedderParams, embed, init_params
from .nn.optim import OptimizerState, sgd_step
from .sampling import Batch, TuplePool, make_batch
from .seeding import stream
from .tensor import Tape, Tensor, backward, take

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass
class TrainResult:
    params_t: EmbedderParams
    params_r: EmbedderParams
    window_losses: list[float]
    iterations: int
    converged: bool
    final_loss: float
    seconds: float = 0.0
    first_window_loss: float | None = None
    loss_trace: list[float] = field(default_factory=list, repr=False)

    @property
    def shared(self) -> bool:
        return self.params_t is self.params_r


def build_towers(cfg: RunConfig) -> tuple[EmbedderParams, EmbedderParams]:
    """Separate template/real towers for quadruplet losses; one shared tower
    for both triplet baselines.

    The two quadruplet towers start from the same random weights and are
    updated independently from then on.
    """
    params_t = init_params(stream(cfg.seed, "init"), cfg.dim, cfg.architecture)
    if cfg.variant.is_quadruplet:
        return params_t, params_t.copy()
    return params_t, params_t


def _embed_templates(params: EmbedderParams, batch: Batch, bundle: DatasetBundle) -> Tensor:
    # each distinct template is embedded once and gathered, which leaves the
    # loss and its gradient unchanged
    uniq, inverse = np.unique(batch.template_classes, return_inverse=True)
    rows = [bundle.class_row(c) for c in uniq.tolist()]
    e = embed(params, bundle.preprocessed_templates()[rows])
    return take(e, inverse)


def batch_loss(params_t: EmbedderParams, params_r: EmbedderParams, batch: Batch,
               bundle: DatasetBundle, cfg: RunConfig) -> Tensor:
    """Mean tuple loss of one mini-batch (records on the active tape)."""
    n = batch.size
    loss_cfg = cfg.loss_config()
    blocks = lambda t, k: take(t, np.arange(k * n, (k + 1) * n))
    real = embed(params_r, batch.real_images(bundle))
    if batch.mode.is_quadruplet:
        tmpl = _embed_templates(params_t, batch, bundle)
        q = QuadrupleEmbeddings(blocks(tmpl, 0), blocks(tmpl, 1), blocks(real, 0), blocks(real, 1))
        return quadruplet_loss(q, loss_cfg)
    if batch.mode is Variant.TRIPLET_DA:
        anchor = _embed_templates(params_t, batch, bundle)
        return loss_triplet(anchor, blocks(real, 0), blocks(real, 1), loss_cfg)
    return loss_triplet(blocks(real, 0), blocks(real, 1), blocks(real, 2), loss_cfg)


def train(bundle: DatasetBundle, cfg: RunConfig, partitions=TRAINING_PARTITIONS,
          progress=None) -> TrainResult:
    """Run SGD until the windowed convergence rule fires or ``cfg.max_iters``.

    Only seen classes, restricted to ``partitions``, feed the sampler.
    """
    params_t, params_r = build_towers(cfg)
    towers = [("T.", params_t)] if params_t is params_r else [("T.", params_t), ("R.", params_r)]
    state = OptimizerState(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    pool = TuplePool(bundle, partitions=partitions, classes=bundle.seen)
    rng = stream(cfg.seed, "sampler")
    monitor = ConvergenceMonitor(window=cfg.window, patience=cfg.patience)
    trace: list[float] = []
    t0 = time.perf_counter()

    it = 0
    for it in range(1, cfg.max_iters + 1):
        batch = make_batch(pool, rng, cfg.batch, cfg.variant)
        for _, p in towers:
            p.zero_grad()
        with Tape() as tape:
            loss = batch_loss(params_t, params_r, batch, bundle, cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at iteration {it}")
        backward(loss, tape)
        for prefix, p in towers:
            sgd_step(p, None, state, prefix=prefix)
        trace.append(value)
        done = monitor.update(value)
        if progress is not None and len(trace) % cfg.window == 0:
            progress(it, monitor.window_means[-1])
        if done:
            break

    means = monitor.window_means
    tail = trace[len(means) * cfg.window:]
    final = means[-1] if means else float(np.mean(trace))
    if tail and not means:
        final = float(np.mean(tail))
    return TrainResult(params_t, params_r, list(means), it, monitor.converged, final,
                       seconds=time.perf_counter() - t0,
                       first_window_loss=means[0] if means else None, loss_trace=trace)
