"""Empirical convex surrogate and its gradient in w for a fixed activation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, PiecewiseLinearActivation


@dataclass(frozen=True, eq=False)
class GradientReport:
    """Surrogate gradient at (w, u); ``loss`` is the empirical squared loss of the same pair."""

    gradient: np.ndarray
    norm_sq: float
    loss: float


def _projections(w, data: Dataset) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    if w.size != data.d:
        raise ValueError(f"weight dimension {w.size} != data dimension {data.d}")
    return data.X @ w


def activation_integral(u: PiecewiseLinearActivation, t):
    """Exact integral of ``u`` over [0, t]; convex in t since u is non-decreasing."""
    return u.integral(t)


def surrogate_loss(w, u: PiecewiseLinearActivation, data: Dataset) -> float:
    """(1/m) sum_i [ int_0^{w.x_i} u(r) dr - y_i (w.x_i) ]."""
    z = _projections(w, data)
    terms = u.integral(z) - data.y * z
    return float(np.mean(terms))


def gradient_from_residuals(X: np.ndarray, residuals: np.ndarray) -> np.ndarray:
    return X.T @ residuals / X.shape[0]


def surrogate_gradient(w, u: PiecewiseLinearActivation, data: Dataset) -> GradientReport:
    """(1/m) sum_i (u(w.x_i) - y_i) x_i, together with the empirical squared loss."""
    z = _projections(w, data)
    r = np.asarray(u(z)) - data.y
    g = gradient_from_residuals(data.X, r)
    return GradientReport(g, float(g @ g), float(r @ r) / data.m)
