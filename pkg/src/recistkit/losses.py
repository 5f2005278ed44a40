"""Training losses for keypoint heatmaps and sub-cell offsets.

Both losses are implemented with analytic gradients plus a generic central
finite-difference checker, so gradient correctness can be verified without
any autograd framework. All reductions run in float64 with numpy's fixed
pairwise summation, making results bit-reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .targets import EXTREME_ROLES, TargetBundle


@dataclass(frozen=True, slots=True)
class FocalParams:
    """Exponents and log-clamping for the penalty-reduced focal loss.

    ``alpha`` weights easy predictions down, ``beta`` reduces the penalty on
    cells near (but not at) a ground-truth peak. Predictions are clamped to
    [clamp_eps, 1 - clamp_eps] before the logs.
    """

    alpha: float = 2.0
    beta: float = 4.0
    clamp_eps: float = 1e-12

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if not 0.0 < self.clamp_eps < 0.5:
            raise ValueError(f"clamp_eps must be in (0, 0.5), got {self.clamp_eps}")


def _check_shapes(pred: np.ndarray, target: np.ndarray) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")


def focal_loss(
    pred: np.ndarray,
    target: np.ndarray,
    n_objects: int,
    params: FocalParams = FocalParams(),
) -> float:
    """Penalty-reduced focal loss over one heatmap.

    Cells where the target is exactly 1 contribute (1-p)^alpha * log(p);
    every other cell, including Gaussian shoulders with 0 < target < 1,
    contributes (1-Y)^beta * p^alpha * log(1-p). The sum is negated and
    divided by ``n_objects`` (by 1 when there are zero objects).
    """
    _check_shapes(pred, target)
    if n_objects < 0:
        raise ValueError(f"n_objects must be >= 0, got {n_objects}")
    p = np.clip(pred.astype(np.float64), params.clamp_eps, 1.0 - params.clamp_eps)
    y = target.astype(np.float64)
    pos = y == 1.0

    pos_terms = np.where(pos, (1.0 - p) ** params.alpha * np.log(p), 0.0)
    neg_terms = np.where(
        pos, 0.0, (1.0 - y) ** params.beta * p ** params.alpha * np.log1p(-p)
    )
    total = np.sum(pos_terms) + np.sum(neg_terms)
    return float(-total / max(n_objects, 1))


def focal_loss_grad(
    pred: np.ndarray,
    target: np.ndarray,
    n_objects: int,
    params: FocalParams = FocalParams(),
) -> np.ndarray:
    """Analytic d(loss)/d(pred), zero at cells where the clamp is active."""
    _check_shapes(pred, target)
    if n_objects < 0:
        raise ValueError(f"n_objects must be >= 0, got {n_objects}")
    a, b = params.alpha, params.beta
    p = np.clip(pred.astype(np.float64), params.clamp_eps, 1.0 - params.clamp_eps)
    y = target.astype(np.float64)
    pos = y == 1.0

    d_pos = -a * (1.0 - p) ** (a - 1.0) * np.log(p) + (1.0 - p) ** a / p
    d_neg = (1.0 - y) ** b * (
        a * p ** (a - 1.0) * np.log1p(-p) - p ** a / (1.0 - p)
    )
    grad = -np.where(pos, d_pos, d_neg) / max(n_objects, 1)

    clamped = (pred < params.clamp_eps) | (pred > 1.0 - params.clamp_eps)
    grad[clamped] = 0.0
    return grad


def smooth_l1(x, beta: float = 1.0):
    """Smooth L1: quadratic below ``beta``, linear above, C1 everywhere.

    0.5 * x^2 / beta for |x| < beta, else |x| - 0.5 * beta. Accepts scalars
    or arrays.
    """
    ax = np.abs(np.asarray(x, dtype=np.float64))
    out = np.where(ax < beta, 0.5 * ax * ax / beta, ax - 0.5 * beta)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def smooth_l1_grad(x, beta: float = 1.0):
    """Derivative of :func:`smooth_l1`: x / beta inside, sign(x) outside."""
    xv = np.asarray(x, dtype=np.float64)
    out = np.where(np.abs(xv) < beta, xv / beta, np.sign(xv))
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(out)
    return out


def offset_loss(
    pred_offsets: np.ndarray, targets: TargetBundle, beta: float = 1.0
) -> float:
    """Smooth-L1 offset loss read only at ground-truth extreme cells.

    Sums over annotations, the four extreme roles, and the two offset
    components, then divides by the annotation count. The center role has
    no offsets; predictions anywhere else in the planes are ignored.
    Returns 0 for an empty annotation set.
    """
    expected = targets.bundle.offset_maps.shape
    if pred_offsets.shape != expected:
        raise ValueError(
            f"shape mismatch: pred {pred_offsets.shape} vs target {expected}"
        )
    n = targets.n_objects
    if n == 0:
        return 0.0
    total = 0.0
    for k in range(n):
        for role_idx, role in enumerate(EXTREME_ROLES):
            (row, col), (tx, ty) = targets.gt_cells[role][k]
            px = float(pred_offsets[2 * role_idx][row, col])
            py = float(pred_offsets[2 * role_idx + 1][row, col])
            total += smooth_l1(px - tx, beta) + smooth_l1(py - ty, beta)
    return total / n


def offset_loss_grad(
    pred_offsets: np.ndarray, targets: TargetBundle, beta: float = 1.0
) -> np.ndarray:
    """Analytic gradient of :func:`offset_loss` w.r.t. the offset planes."""
    expected = targets.bundle.offset_maps.shape
    if pred_offsets.shape != expected:
        raise ValueError(
            f"shape mismatch: pred {pred_offsets.shape} vs target {expected}"
        )
    grad = np.zeros(expected, dtype=np.float64)
    n = targets.n_objects
    if n == 0:
        return grad
    for k in range(n):
        for role_idx, role in enumerate(EXTREME_ROLES):
            (row, col), (tx, ty) = targets.gt_cells[role][k]
            px = float(pred_offsets[2 * role_idx][row, col])
            py = float(pred_offsets[2 * role_idx + 1][row, col])
            grad[2 * role_idx][row, col] += smooth_l1_grad(px - tx, beta) / n
            grad[2 * role_idx + 1][row, col] += smooth_l1_grad(py - ty, beta) / n
    return grad


@dataclass(frozen=True, slots=True)
class GradCheckReport:
    """Outcome of comparing an analytic gradient to central differences."""

    max_rel_err: float
    worst_cell: tuple[int, ...]
    passed: bool
    tol: float


def finite_diff_check(
    loss_fn,
    grad_fn,
    x: np.ndarray,
    h: float = 1e-6,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare ``grad_fn(x)`` against central differences of ``loss_fn``.

    Each cell's error is scored relative to its own gradient magnitude,
    floored at 1e-3 of the grid's largest gradient: cells near a gradient
    zero-crossing would otherwise amplify finite-difference roundoff (the
    difference quotient carries absolute noise around eps * |loss| / h)
    into meaningless relative errors. A constant loss reports 0.
    ``loss_fn`` maps an array like ``x`` to a scalar; ``grad_fn`` maps it
    to an array of the same shape.
    """
    analytic = np.asarray(grad_fn(x), dtype=np.float64)
    numeric = np.zeros_like(analytic)
    flat = x.astype(np.float64).copy()
    it = np.nditer(flat, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = flat[idx]
        flat[idx] = orig + h
        up = loss_fn(flat)
        flat[idx] = orig - h
        down = loss_fn(flat)
        flat[idx] = orig
        numeric[idx] = (up - down) / (2.0 * h)

    grid_scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    if grid_scale == 0.0:
        return GradCheckReport(0.0, (0,) * x.ndim, True, tol)
    scale = np.maximum(
        np.maximum(np.abs(analytic), np.abs(numeric)), 1e-3 * grid_scale
    )
    rel = np.abs(analytic - numeric) / scale
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_rel = float(rel[worst])
    return GradCheckReport(
        max_rel_err=max_rel, worst_cell=worst, passed=max_rel < tol, tol=tol
    )
