"""Error metrics, reported in the data's original units."""

from __future__ import annotations

import numpy as np

from .tensor import DimensionError


def relative_l2(u: np.ndarray, u_hat: np.ndarray) -> float:
    """Frobenius-norm ratio ||u - u_hat|| / ||u||.

    Degenerate zero-norm targets fall back to the absolute L2 norm (callers
    that need to surface the fallback can test the norm themselves)."""
    u = np.asarray(u, dtype=np.float64)
    u_hat = np.asarray(u_hat, dtype=np.float64)
    if u.shape != u_hat.shape:
        raise DimensionError(f"shape mismatch {u.shape} vs {u_hat.shape}")
    err = np.linalg.norm(u - u_hat)
    denom = np.linalg.norm(u)
    return float(err / denom) if denom > 0 else float(err)


def rmse_metric(u: np.ndarray, u_hat: np.ndarray) -> float:
    """Root mean squared error over points: sqrt(1/N sum_i ||u_i - u_hat_i||^2)."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    u_hat = np.atleast_2d(np.asarray(u_hat, dtype=np.float64))
    if u.shape != u_hat.shape:
        raise DimensionError(f"shape mismatch {u.shape} vs {u_hat.shape}")
    sq = ((u - u_hat) ** 2).sum(axis=1)
    return float(np.sqrt(sq.mean()))
