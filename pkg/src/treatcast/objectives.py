"""Training objectives: plain/weighted squared error over observed forecast
targets, cross-entropy for the observation process over the full forecast
grid, and their multitask combination.

Conventions shared by every loss:
- predictions are (N, horizon) Tensors (or arrays, for evaluation);
- masks are float arrays of the same shape; a term contributes only where
  its mask is 1;
- reduction is the mean over contributing terms (so the scale of the loss is
  independent of batch size and sampling density);
- an all-zero mask yields an exact 0 with zero gradient.

Inverse-intensity weights are plain numpy arrays by construction: they are
computed from prediction *values*, so no gradient ever flows through them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gradcore import Tensor, add, clip, const, log, mul, neg, sub, tsum

LOG_CLAMP = 1e-7
C_MIN = 0.001  # intensity truncation: caps weights at 1000


class ObjectiveError(ValueError):
    """Raised for invalid objective configuration."""


@dataclass(frozen=True)
class LossReport:
    """Per-evaluation loss bookkeeping."""

    wmse: float
    ce: float
    mt: float
    n_target_terms: int
    mean_weight: float


def make_report(wmse: float, ce: float, alpha: float,
                n_target_terms: int, mean_weight: float) -> LossReport:
    return LossReport(
        wmse=float(wmse), ce=float(ce),
        mt=loss_multitask(wmse, ce, alpha),
        n_target_terms=int(n_target_terms), mean_weight=float(mean_weight),
    )


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else const(np.asarray(x, dtype=np.float64))


def _masked_mean(terms: Tensor, mask: np.ndarray) -> Tensor:
    mask = np.asarray(mask, dtype=np.float64)
    n = float(mask.sum())
    return mul(tsum(mul(terms, const(mask))), 1.0 / max(n, 1.0))


def loss_mse(preds, targets, mask) -> Tensor:
    """Mean squared error over the masked terms."""
    diff = sub(_as_tensor(preds), const(np.asarray(targets, dtype=np.float64)))
    return _masked_mean(mul(diff, diff), mask)


def make_weights(lambda_hat, c_min: float = C_MIN) -> np.ndarray:
    """Inverse-intensity weights w = 1 / max(lambda_hat, c_min).

    Accepts a Tensor or array; returns a detached numpy array (gradients
    never propagate through the weights)."""
    lam = lambda_hat.data if isinstance(lambda_hat, Tensor) else np.asarray(lambda_hat)
    if c_min <= 0:
        raise ObjectiveError("weight truncation bound must be positive")
    return 1.0 / np.maximum(np.asarray(lam, dtype=np.float64), c_min)


def loss_wmse(preds, targets, mask, weights) -> Tensor:
    """Weighted mean squared error: mean over masked terms of w * err^2.

    With unit weights this equals loss_mse on the same mask."""
    diff = sub(_as_tensor(preds), const(np.asarray(targets, dtype=np.float64)))
    weighted = mul(mul(diff, diff), const(np.asarray(weights, dtype=np.float64)))
    return _masked_mean(weighted, mask)


def loss_ce(lambda_hat, dn, grid_mask) -> Tensor:
    """Binary cross-entropy of the observation indicators over every grid
    cell (observed and unobserved alike), mean-reduced over the grid."""
    lam = clip(_as_tensor(lambda_hat), LOG_CLAMP, 1.0 - LOG_CLAMP)
    dn = np.asarray(dn, dtype=np.float64)
    ll_obs = mul(log(lam), const(dn))
    ll_gap = mul(log(sub(const(np.ones_like(dn)), lam)), const(1.0 - dn))
    return _masked_mean(neg(add(ll_obs, ll_gap)), grid_mask)


def loss_multitask(wmse: float, ce: float, alpha: float) -> float:
    """Stopping-criterion combination (1-alpha)*wmse + alpha*ce.

    Parameter updates never use this scalar; each sub-loss reaches its own
    parameter blocks. alpha must lie strictly inside (0, 1)."""
    if not (0.0 < alpha < 1.0):
        raise ObjectiveError(f"alpha must lie in (0, 1), got {alpha}")
    return float((1.0 - alpha) * wmse + alpha * ce)


# ---------------------------------------------------------------------------
# Numpy-only estimators for the inverse-intensity identity
# ---------------------------------------------------------------------------

def grid_mean_squared_error(preds, targets, grid_mask) -> float:
    """Mean squared error over all existing grid cells (numpy, no autodiff)."""
    preds = np.asarray(preds, dtype=np.float64)
    err = (preds - np.asarray(targets, dtype=np.float64)) ** 2
    grid = np.asarray(grid_mask, dtype=np.float64)
    return float((err * grid).sum() / max(grid.sum(), 1.0))


def sampled_inverse_weighted_error(preds, targets, dn, grid_mask, lambda_true) -> float:
    """Observed-terms squared error reweighted by true inverse intensity and
    normalized by the grid size, so its expectation over the observation
    process equals grid_mean_squared_error."""
    preds = np.asarray(preds, dtype=np.float64)
    err = (preds - np.asarray(targets, dtype=np.float64)) ** 2
    dn = np.asarray(dn, dtype=np.float64)
    grid = np.asarray(grid_mask, dtype=np.float64)
    lam = np.asarray(lambda_true, dtype=np.float64)
    w = np.where(dn > 0, 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
    return float((err * dn * w).sum() / max(grid.sum(), 1.0))
