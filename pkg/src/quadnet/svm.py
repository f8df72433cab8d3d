"""RBF soft-margin SVM (SMO) and the frozen-feature probing protocol."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .data import DatasetBundle
from .evaluation import ci95, embed_batches
from .nn.model import EmbedderParams
from .seeding import stream

log = logging.getLogger(__name__)

TAU = 1e-12


def rbf_kernel(x, y, gamma: float) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"feature dimensions differ: {x.shape} vs {y.shape}")
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    d = x - y
    return float(np.exp(-gamma * (d @ d)))


def rbf_matrix(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    d2 = (a * a).sum(1)[:, None] - 2 * a @ b.T + (b * b).sum(1)[None, :]
    return np.exp(-gamma * np.maximum(d2, 0.0))


def default_gamma(features: np.ndarray) -> float:
    """1 / (n_features * variance of all feature values); 1.0 for constant data."""
    x = np.asarray(features, dtype=np.float64)
    var = x.var()
    return 1.0 / (x.shape[1] * var) if var > 0 else 1.0


@dataclass
class SvmModel:
    """Binary decision function sum_i coef_i K(sv_i, x) + bias, for one class vs rest."""

    class_id: int
    support_vectors: np.ndarray
    dual_coef: np.ndarray     # alpha_i * y_i
    alphas: np.ndarray
    bias: float
    gamma: float
    c_reg: float
    iterations: int = 0

    def decision(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.support_vectors.size and x.shape[1] != self.support_vectors.shape[1]:
            raise ValueError(f"feature dimension {x.shape[1]} != {self.support_vectors.shape[1]}")
        if not self.support_vectors.size:
            return np.full(len(x), self.bias)
        return rbf_matrix(x, self.support_vectors, self.gamma) @ self.dual_coef + self.bias


def smo_solve(kernel: np.ndarray, y: np.ndarray, c_reg: float, tol: float,
              max_iter: int = 200_000) -> tuple[np.ndarray, float, int]:
    """Dual soft-margin SVM by SMO with maximal-violating-pair selection.

    Returns (alpha, rho, iterations); the decision function is
    sum_i alpha_i y_i K(x_i, x) - rho.  Stops once the KKT gap m - M < tol.
    """
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    q = y[:, None] * y[None, :] * kernel
    qd = np.diag(q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    it = 0
    for it in range(1, max_iter + 1):
        yg = -y * grad
        up = ((y > 0) & (alpha < c_reg)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < c_reg))
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(yg[up])])
        j = int(np.flatnonzero(low)[np.argmin(yg[low])])
        if yg[i] - yg[j] < tol:
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(qd[i] + qd[j] + 2 * q[i, j], TAU)
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > c_reg:
                    alpha[i], alpha[j] = c_reg, c_reg - diff
            elif alpha[j] > c_reg:
                alpha[j], alpha[i] = c_reg, c_reg + diff
        else:
            quad = max(qd[i] + qd[j] - 2 * q[i, j], TAU)
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            alpha[i] -= delta
            alpha[j] += delta
            if total > c_reg:
                if alpha[i] > c_reg:
                    alpha[i], alpha[j] = c_reg, total - c_reg
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > c_reg:
                if alpha[j] > c_reg:
                    alpha[j], alpha[i] = c_reg, total - c_reg
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        grad += q[i] * (alpha[i] - ai) + q[j] * (alpha[j] - aj)
    else:
        log.warning("SMO hit the iteration cap (%d) before reaching tol=%g", max_iter, tol)
    return alpha, _rho(alpha, grad, y, c_reg), it


def _rho(alpha, grad, y, c_reg) -> float:
    yg = y * grad
    free = (alpha > 0) & (alpha < c_reg)
    if free.any():
        return float(yg[free].mean())
    at_upper = alpha >= c_reg
    at_lower = alpha <= 0
    ub_mask = (at_upper & (y < 0)) | (at_lower & (y > 0))
    lb_mask = (at_upper & (y > 0)) | (at_lower & (y < 0))
    ub = yg[ub_mask].min() if ub_mask.any() else np.inf
    lb = yg[lb_mask].max() if lb_mask.any() else -np.inf
    if not np.isfinite(ub + lb):
        return float(ub if np.isfinite(ub) else lb)
    return float((ub + lb) / 2)


def svm_train(features, labels, c_reg: float = 100.0, tol: float = 1e-3,
              gamma: float | None = None) -> list[SvmModel]:
    """One-vs-rest RBF SVMs, one per class, sorted by class id."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("SVM training needs at least two classes")
    gamma = default_gamma(x) if gamma is None else float(gamma)
    kernel = rbf_matrix(x, x, gamma)
    models = []
    for c in classes.tolist():
        y = np.where(labels == c, 1.0, -1.0)
        alpha, rho, iters = smo_solve(kernel, y, c_reg, tol)
        sv = alpha > 0
        models.append(SvmModel(int(c), x[sv], alpha[sv] * y[sv], alpha, -rho, gamma, c_reg, iters))
    return models


def svm_decisions(models: Sequence[SvmModel], x) -> tuple[np.ndarray, np.ndarray]:
    """(class ids sorted ascending, decision values [n, classes])."""
    ordered = sorted(models, key=lambda m: m.class_id)
    ids = np.array([m.class_id for m in ordered])
    return ids, np.stack([m.decision(x) for m in ordered], axis=1)


def svm_predict(models: Sequence[SvmModel], x) -> np.ndarray:
    """Class with the largest one-vs-rest decision value; ties go to the lowest id."""
    ids, dec = svm_decisions(models, x)
    return ids[np.argmax(dec, axis=1)]


# ---------------------------------------------------------------------------
# representation probing


@dataclass
class ReprRow:
    network: str
    instances_per_class: int
    partition: str
    mean_error_pct: float
    ci95: float
    errors: list[float] = field(default_factory=list, repr=False)


@dataclass
class ReprResult:
    rows: list[ReprRow]
    sample_log: list[dict]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["network", "instances_per_class", "partition", "mean_error_pct", "ci95"])
            for r in self.rows:
                w.writerow([r.network, r.instances_per_class, r.partition,
                            f"{r.mean_error_pct:.6f}", f"{r.ci95:.6f}"])

    def table(self, partition: str) -> str:
        """Networks by instances/class, cells "err (±ci)"."""
        rows = [r for r in self.rows if r.partition == partition]
        counts = sorted({r.instances_per_class for r in rows})
        nets = list(dict.fromkeys(r.network for r in rows))
        cell = {(r.network, r.instances_per_class): f"{r.mean_error_pct:.2f} (±{r.ci95:.2f})" for r in rows}
        lines = ["network," + ",".join(str(n) for n in counts)]
        lines += [net + "," + ",".join(cell.get((net, n), "") for n in counts) for net in nets]
        return "\n".join(lines)


SVM_POOL = {"seen": ("phi_s", "psi_s"), "unseen": ("phi_u", "psi_u")}
TEST_PARTITIONS = ("omega_s", "omega_u")


def sample_svm_training_rows(bundle: DatasetBundle, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` rows per class from the train and validation partitions of all classes."""
    rows = []
    for c in sorted(bundle.classes):
        pool = bundle.indices(*(SVM_POOL["seen"] if c in bundle.seen else SVM_POOL["unseen"]),
                              classes=[c])
        if pool.size < n:
            raise ValueError(f"class {c} has only {pool.size} training images, {n} requested")
        rows.append(rng.choice(pool, size=n, replace=False))
    return np.sort(np.concatenate(rows))


def representation_eval(networks: Mapping[str, EmbedderParams], bundle: DatasetBundle,
                        instances_per_class: Sequence[int] = (10, 50, 100, 200),
                        repeats: int | Mapping[int, int] | None = None, seed: int = 0,
                        c_reg: float = 100.0, tol: float = 1e-3) -> ReprResult:
    """SVM error on frozen fc1 features, per network and training-set size.

    Each trial draws its training rows from a seed shared by all networks, so
    every network sees the same data.  Errors are percentages on the seen
    and unseen test partitions separately.
    """
    if repeats is None:
        repeats = {n: (100 if n <= 10 else 10) for n in instances_per_class}
    elif isinstance(repeats, int):
        repeats = {n: repeats for n in instances_per_class}
    test_rows = {p: bundle.indices(p) for p in TEST_PARTITIONS}
    held_out = np.concatenate(list(test_rows.values()))

    sample_log, draws = [], {}
    for n in instances_per_class:
        if repeats[n] < 2:
            raise ValueError("at least 2 repeats are needed for a confidence interval")
        for trial in range(repeats[n]):
            rows = sample_svm_training_rows(bundle, n, stream(seed, "svm", n, trial))
            if np.intersect1d(rows, held_out).size:
                raise AssertionError("test images leaked into SVM training")
            draws[n, trial] = rows
            sample_log.append({"instances_per_class": n, "trial": trial, "rows": rows.tolist()})

    needed = np.unique(np.concatenate([*draws.values(), held_out]))
    images = bundle.preprocessed_reals()
    result = []
    for name, params in networks.items():
        feats = np.zeros((len(images), params.arch.fc1), dtype=np.float32)
        feats[needed] = embed_batches(params, images[needed], fc1=True)
        for n in instances_per_class:
            errs = {p: [] for p in TEST_PARTITIONS}
            for trial in range(repeats[n]):
                rows = draws[n, trial]
                models = svm_train(feats[rows], bundle.real_labels[rows], c_reg=c_reg, tol=tol)
                for p, tr in test_rows.items():
                    if tr.size:
                        pred = svm_predict(models, feats[tr])
                        errs[p].append(100.0 * float(np.mean(pred != bundle.real_labels[tr])))
            for p in TEST_PARTITIONS:
                if errs[p]:
                    m, h = ci95(errs[p])
                    result.append(ReprRow(name, n, p, m, h, errs[p]))
    return ReprResult(result, sample_log)
