"""Loss terms for deforming a source cloud onto a target.

Every loss here takes deformed source positions (``(N, 3)``) and returns its
value; the ``*_and_grad`` variants also return the gradient with respect to
those positions, with nearest-neighbour correspondences held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple

import numpy as np

from .errors import EmptyCloud, IndexMismatch, KTooLarge, SingularGram
from .spatial import SpatialIndex

KernelMode = Literal["per_coordinate", "euclidean"]

# Gram matrices with eps = 0 whose condition number exceeds this are
# treated as singular.
_SINGULAR_COND = 1e12


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel ``exp(-x^2 / (2 sigma2))``; note ``k(0) = 1``."""

    sigma2: float = 1.0
    mode: KernelMode = "per_coordinate"

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if self.mode not in ("per_coordinate", "euclidean"):
            raise ValueError(f"unknown kernel mode {self.mode!r}")


def _pts(x) -> np.ndarray:
    x = x.points if hasattr(x, "points") else x
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# correntropy-induced metric


def mcc_squared(residuals: np.ndarray, kcfg: KernelConfig) -> np.ndarray:
    """``M^2`` for each residual row ``a - b``.

    ``1 - exp(-x)`` is evaluated with ``expm1`` so small residuals keep full
    relative precision.
    """
    d = np.asarray(residuals, dtype=np.float64)
    if kcfg.mode == "per_coordinate":
        return np.mean(-np.expm1(-(d * d) / (2.0 * kcfg.sigma2)), axis=-1)
    return -np.expm1(-np.sum(d * d, axis=-1) / (2.0 * kcfg.sigma2))


def mcc_rows(residuals: np.ndarray, kcfg: KernelConfig, grad: bool = False):
    """Metric per residual row, optionally with ``dM/d(residual)``.

    The gradient at a zero residual is taken as zero.
    """
    d = np.asarray(residuals, dtype=np.float64)
    m = np.sqrt(mcc_squared(d, kcfg))
    if not grad:
        return m
    if kcfg.mode == "per_coordinate":
        dm2 = np.exp(-(d * d) / (2.0 * kcfg.sigma2)) * d / (kcfg.sigma2 * d.shape[-1])
    else:
        dm2 = np.exp(-np.sum(d * d, axis=-1, keepdims=True) / (2.0 * kcfg.sigma2)) * d / kcfg.sigma2
    safe = np.where(m > 0, m, 1.0)
    g = np.where((m > 0)[..., None], dm2 / (2.0 * safe[..., None]), 0.0)
    return m, g


def mcc_metric(a, b, kcfg: KernelConfig = KernelConfig()) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(mcc_rows((a - b)[None, :], kcfg)[0])


def influence_rho(e, sigma: float) -> np.ndarray:
    """Robust-statistics view of the correntropy loss for a scalar residual."""
    e = np.asarray(e, dtype=np.float64)
    return -np.expm1(-(e * e) / (2.0 * sigma * sigma)) / (math.sqrt(2.0 * math.pi) * sigma)


def influence_weight(e, sigma: float) -> np.ndarray:
    e = np.asarray(e, dtype=np.float64)
    return np.exp(-(e * e) / (2.0 * sigma * sigma)) / (math.sqrt(2.0 * math.pi) * sigma ** 3)


# ---------------------------------------------------------------------------
# correspondences


class Correspondences(NamedTuple):
    target_to_source: np.ndarray  # for each target point, nearest deformed-source index
    source_to_target: np.ndarray  # for each deformed-source point, nearest target index


def find_correspondences(deformed, target, target_index: SpatialIndex | None = None) -> Correspondences:
    deformed, target = _pts(deformed), _pts(target)
    if len(deformed) == 0 or len(target) == 0:
        raise EmptyCloud("correspondence search needs two non-empty clouds")
    tgt_index = target_index if target_index is not None else SpatialIndex(target)
    src_index = SpatialIndex(deformed)
    t2s, _ = src_index.nearest_many(target)
    s2t, _ = tgt_index.nearest_many(deformed)
    return Correspondences(t2s, s2t)


def _check_nonempty(deformed, target):
    if len(deformed) == 0 or len(target) == 0:
        raise EmptyCloud("losses need two non-empty clouds")


def correntropy_loss_and_grad(deformed, target, kcfg: KernelConfig = KernelConfig(),
                              corr: Correspondences | None = None):
    """Bidirectional mean correntropy metric and its gradient."""
    deformed, target = _pts(deformed), _pts(target)
    _check_nonempty(deformed, target)
    if corr is None:
        corr = find_correspondences(deformed, target)
    t2s, s2t = corr
    # target -> source: residual x_i - T(y_c(i)); T enters with a minus sign
    m1, g1 = mcc_rows(target - deformed[t2s], kcfg, grad=True)
    m2, g2 = mcc_rows(deformed - target[s2t], kcfg, grad=True)
    value = m1.mean() + m2.mean()
    grad = g2 / len(deformed)
    np.add.at(grad, t2s, -g1 / len(target))
    return float(value), grad


def correntropy_loss(deformed, target, kcfg: KernelConfig = KernelConfig(),
                     corr: Correspondences | None = None) -> float:
    deformed, target = _pts(deformed), _pts(target)
    _check_nonempty(deformed, target)
    if corr is None:
        corr = find_correspondences(deformed, target)
    t2s, s2t = corr
    return float(mcc_rows(target - deformed[t2s], kcfg).mean()
                 + mcc_rows(deformed - target[s2t], kcfg).mean())


def chamfer_loss_and_grad(deformed, target, corr: Correspondences | None = None):
    """Bidirectional mean of squared nearest-neighbour distances."""
    deformed, target = _pts(deformed), _pts(target)
    _check_nonempty(deformed, target)
    if corr is None:
        corr = find_correspondences(deformed, target)
    t2s, s2t = corr
    d1 = target - deformed[t2s]
    d2 = deformed - target[s2t]
    value = (d1 * d1).sum(axis=1).mean() + (d2 * d2).sum(axis=1).mean()
    grad = 2.0 * d2 / len(deformed)
    np.add.at(grad, t2s, -2.0 * d1 / len(target))
    return float(value), grad


def chamfer_loss(deformed, target, corr: Correspondences | None = None) -> float:
    return chamfer_loss_and_grad(deformed, target, corr)[0]


# ---------------------------------------------------------------------------
# locally linear reconstruction


@dataclass(frozen=True)
class LLRWeights:
    neighbors: np.ndarray  # (N, k) indices into the source
    weights: np.ndarray    # (N, k), rows sum to one
    k: int
    eps: float

    def __len__(self) -> int:
        return self.neighbors.shape[0]


def compute_llr_weights(source, k: int = 30, eps: float = 1e-6) -> LLRWeights:
    """Affine reconstruction weights of each point from its k neighbours.

    Solves ``G_j w = 1`` for the (regularized) local Gram matrix and
    normalizes ``w`` to sum to one. Regularization adds
    ``eps * trace(G_j) / k`` to the diagonal, or ``eps`` when the trace is 0.
    """
    pts = _pts(source)
    n = len(pts)
    if k < 1:
        raise ValueError("k must be positive")
    if k >= n:
        raise KTooLarge(f"k={k} needs more than {n} points")
    if eps < 0:
        raise ValueError("eps must be non-negative")
    index = SpatialIndex(pts)
    nbrs, _ = index.knn_many(pts, k, exclude_self=np.arange(n))

    diff = pts[:, None, :] - pts[nbrs]  # (N, k, 3): y_j - z_jm
    G = diff @ diff.transpose(0, 2, 1)
    reg = np.zeros(n)
    if eps > 0:
        trace = np.trace(G, axis1=1, axis2=2)
        reg = np.where(trace > 0, eps * trace / k, eps)
        G = G + reg[:, None, None] * np.eye(k)
    else:
        cond = np.linalg.cond(G)
        bad = ~(cond < _SINGULAR_COND)
        if np.any(bad):
            raise SingularGram(f"{int(bad.sum())} Gram matrices are singular; use eps > 0")
    ones = np.ones((n, k, 1))
    try:
        x = np.linalg.solve(G, ones)
    except np.linalg.LinAlgError as exc:
        raise SingularGram(str(exc)) from exc
    # Near-degenerate neighbourhoods give condition numbers around 1e6-1e7 and
    # weights in the hundreds; refining against an extended-precision residual
    # recovers close to full float64 accuracy.
    d_ext = diff.astype(np.longdouble)
    G_ext = d_ext @ d_ext.transpose(0, 2, 1) + reg.astype(np.longdouble)[:, None, None] * np.eye(k)
    for _ in range(2):
        resid = (1 - G_ext @ x).astype(np.float64)
        x = x + np.linalg.solve(G, resid)
    x = x[..., 0].astype(np.longdouble)
    w = (x / x.sum(axis=1, keepdims=True)).astype(np.float64)
    return LLRWeights(neighbors=nbrs, weights=w, k=k, eps=eps)


def _check_llr(deformed, weights: LLRWeights):
    if deformed.shape[0] != weights.neighbors.shape[0]:
        raise IndexMismatch(
            f"LLR weights cover {weights.neighbors.shape[0]} points, cloud has {deformed.shape[0]}")
    nb = weights.neighbors
    if nb.size and (nb.min() < 0 or nb.max() >= deformed.shape[0]):
        raise IndexMismatch("LLR neighbour index out of range")


def llr_residuals(deformed, weights: LLRWeights) -> np.ndarray:
    deformed = _pts(deformed)
    _check_llr(deformed, weights)
    return deformed - np.einsum("nk,nkd->nd", weights.weights, deformed[weights.neighbors])


def llr_regularizer_and_grad(deformed, weights: LLRWeights):
    """Sum of reconstruction-residual norms (not squared) and its gradient."""
    deformed = _pts(deformed)
    r = llr_residuals(deformed, weights)
    norms = np.sqrt((r * r).sum(axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    u = np.where((norms > 0)[:, None], r / safe[:, None], 0.0)
    grad = u.copy()
    np.add.at(grad, weights.neighbors, -weights.weights[..., None] * u[:, None, :])
    return float(norms.sum()), grad


def llr_regularizer(deformed, weights: LLRWeights) -> float:
    r = llr_residuals(deformed, weights)
    return float(np.sqrt((r * r).sum(axis=1)).sum())


# ---------------------------------------------------------------------------
# external correspondences


@dataclass(frozen=True)
class MatchPairs:
    source_idx: np.ndarray     # (P,)
    target_points: np.ndarray  # (P, 3)

    @classmethod
    def empty(cls) -> "MatchPairs":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)))

    def __len__(self) -> int:
        return len(self.source_idx)


def matching_loss_and_grad(deformed, pairs: MatchPairs | None):
    deformed = _pts(deformed)
    grad = np.zeros_like(deformed)
    if pairs is None or len(pairs) == 0:
        return 0.0, grad
    idx = np.asarray(pairs.source_idx, dtype=np.int64)
    if idx.min() < 0 or idx.max() >= len(deformed):
        raise IndexMismatch("correspondence source index out of range")
    d = deformed[idx] - pairs.target_points
    value = (d * d).sum(axis=1).mean()
    np.add.at(grad, idx, 2.0 * d / len(idx))
    return float(value), grad


def matching_loss(deformed, pairs: MatchPairs | None) -> float:
    return matching_loss_and_grad(deformed, pairs)[0]


# ---------------------------------------------------------------------------
# total objective


@dataclass
class LossBreakdown:
    total: float
    data: float
    llr: float
    match: float
    grad: np.ndarray | None = None


def total_loss(deformed, target, weights: LLRWeights | None = None, pairs: MatchPairs | None = None,
               alpha1: float = 1e4, alpha2: float = 1e2, beta: float = 0.0,
               kcfg: KernelConfig = KernelConfig(), data_term: str = "mcc",
               corr: Correspondences | None = None, grad: bool = True) -> LossBreakdown:
    """``alpha1 * data + alpha2 * llr + beta * match``.

    ``data_term`` selects the correntropy loss (``"mcc"``) or the Chamfer
    baseline (``"cd"``). Terms with a zero coefficient are skipped.
    """
    deformed, target = _pts(deformed), _pts(target)
    _check_nonempty(deformed, target)
    if alpha1 < 0 or alpha2 < 0 or beta < 0:
        raise ValueError("loss coefficients must be non-negative")
    if corr is None:
        corr = find_correspondences(deformed, target)
    g = np.zeros_like(deformed)

    if data_term == "mcc":
        data, gd = correntropy_loss_and_grad(deformed, target, kcfg, corr)
    elif data_term == "cd":
        data, gd = chamfer_loss_and_grad(deformed, target, corr)
    else:
        raise ValueError(f"unknown data term {data_term!r}")
    g += alpha1 * gd

    llr = 0.0
    if weights is not None:
        llr, gr = llr_regularizer_and_grad(deformed, weights)
        g += alpha2 * gr

    match, gm = matching_loss_and_grad(deformed, pairs)
    g += beta * gm

    total = alpha1 * data + alpha2 * llr + beta * match
    return LossBreakdown(total=float(total), data=data, llr=llr, match=match, grad=g if grad else None)
