"""Best-fit activation in U_(a,b) via chain-constrained least squares.

For fixed w the activation fit reduces to

    minimize   sum_i c_i (t_i - y_i)^2
    subject to lower_i <= t_{i+1} - t_i <= upper_i,   t_k = 0

over the projections sorted increasingly (c_i are tie multiplicities). The
anchor splits the chain into two independent halves, each solved exactly by
backward dynamic programming over convex piecewise-quadratic cost-to-go
functions. Only the derivative of the cost-to-go is tracked: it is continuous,
strictly increasing and piecewise linear, stored as two stacks of breakpoints
on either side of its root with lazy shift / linear-add tags.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .core import PiecewiseLinearActivation

ORACLE_MAX_N = 10
ENUMERATION_MAX_N = 5


@dataclass(frozen=True, eq=False)
class ChainQP:
    """Chain problem with 0-based anchor index; ``weights`` default to ones."""

    targets: np.ndarray
    lowers: np.ndarray
    uppers: np.ndarray
    anchor: int
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        lo = np.asarray(self.lowers, dtype=float).reshape(-1)
        hi = np.asarray(self.uppers, dtype=float).reshape(-1)
        c = np.ones_like(y) if self.weights is None else np.asarray(self.weights, dtype=float)
        n = y.size
        if n < 1 or lo.size != n - 1 or hi.size != n - 1 or c.shape != y.shape:
            raise ValueError("need n >= 1 targets, n - 1 lower/upper bounds and n weights")
        if not (0 <= self.anchor < n):
            raise ValueError(f"anchor index {self.anchor} outside 0..{n - 1}")
        if not all(np.all(np.isfinite(v)) for v in (y, lo, hi, c)):
            raise ValueError("non-finite problem data")
        if np.any(c <= 0):
            raise ValueError("weights must be positive")
        if np.any(lo > hi):
            raise ValueError("infeasible chain: some lower bound exceeds its upper bound")
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "lowers", lo)
        object.__setattr__(self, "uppers", hi)
        object.__setattr__(self, "weights", c)

    @property
    def n(self) -> int:
        return self.targets.size

    def objective(self, values) -> float:
        r = np.asarray(values, dtype=float) - self.targets
        return float(np.sum(self.weights * r * r))

    def kkt_residual(self, values) -> float:
        """Primal infeasibility plus complementarity violation of the chain multipliers.

        Stationarity pins the multiplier of every difference constraint: on the
        left of the anchor it is the running sum of objective gradients from the
        left end, on the right the negated running sum from the right end.
        """
        t = np.asarray(values, dtype=float)
        k = self.anchor
        d = np.diff(t)
        primal = max(0.0, abs(t[k]),
                     float(np.max(self.lowers - d, initial=0.0)),
                     float(np.max(d - self.uppers, initial=0.0)))
        grad = 2 * self.weights * (t - self.targets)
        nu = np.empty(self.n - 1)
        nu[:k] = np.cumsum(grad[:k])
        nu[k:] = -np.cumsum(grad[k + 1:][::-1])[::-1]
        # nu > 0 needs the upper bound active, nu < 0 the lower bound
        slack_hi = np.maximum(self.uppers - d, 0.0)
        slack_lo = np.maximum(d - self.lowers, 0.0)
        comp = np.where(nu > 0, np.minimum(nu, slack_hi), np.minimum(-nu, slack_lo))
        return float(max(primal, np.max(comp, initial=0.0)))


@dataclass(frozen=True, eq=False)
class FitResult:
    values: np.ndarray
    objective: float
    kkt_residual: float


@numba.njit(cache=True)
def _solve_side(y, c, lo, hi):
    """Chain t_0 = 0 (implicit) followed by nodes 1..M given as arrays of length M.

    Node j (0-based in the arrays) has target y[j], weight c[j] and the constraint
    lo[j] <= t_j - t_{j-1} <= hi[j].
    """
    M = y.size
    out = np.empty(M)
    if M == 0:
        return out
    cap = 2 * M + 4
    Lx = np.empty(cap)
    Lv = np.empty(cap)
    Rx = np.empty(cap)
    Rv = np.empty(cap)
    nL = 0
    nR = 0
    # actual x = raw x + sx;  actual derivative = raw v + al * raw x + be
    sxL = 0.0
    alL = 0.0
    beL = 0.0
    sxR = 0.0
    alR = 0.0
    beR = 0.0
    slope_left = 0.0
    slope_right = 0.0
    smin = np.empty(M)

    for j in range(M - 1, -1, -1):
        cj = 2.0 * c[j]
        if j == M - 1:
            Lx[0] = y[j]
            Lv[0] = 0.0
            nL = 1
            slope_left = cj
            slope_right = cj
        else:
            s = smin[j + 1]
            # split the derivative at its root and push the root onto both sides
            xr = s - sxL
            Lx[nL] = xr
            Lv[nL] = -(alL * xr + beL)
            nL += 1
            xr = s - sxR
            Rx[nR] = xr
            Rv[nR] = -(alR * xr + beR)
            nR += 1
            # min over t_{j+1} in [t_j + lo, t_j + hi]: left part moves by -hi, right by -lo
            sxL -= hi[j + 1]
            sxR -= lo[j + 1]
            alL += cj
            beL += cj * (sxL - y[j])
            alR += cj
            beR += cj * (sxR - y[j])
            slope_left += cj
            slope_right += cj
            # the shifted derivative vanishes on [s - hi, s - lo]; a target inside
            # that flat stretch is the new root and no breakpoint moves
            yj = y[j]
            if s - hi[j + 1] <= yj <= s - lo[j + 1]:
                smin[j] = yj
                continue

        # re-locate the root; rounding is monotone, so a breakpoint moved across the
        # root re-evaluates with the same sign and cannot bounce back
        while True:
            if nL > 0:
                top = nL - 1
                v = Lv[top] + alL * Lx[top] + beL
                if v > 0.0:
                    x = Lx[top] + sxL
                    xr = x - sxR
                    Rx[nR] = xr
                    Rv[nR] = v - alR * xr - beR
                    nR += 1
                    nL -= 1
                    continue
            if nR > 0:
                top = nR - 1
                v = Rv[top] + alR * Rx[top] + beR
                if v < 0.0:
                    x = Rx[top] + sxR
                    xr = x - sxL
                    Lx[nL] = xr
                    Lv[nL] = v - alL * xr - beL
                    nL += 1
                    nR -= 1
                    continue
            break

        if nL > 0 and nR > 0:
            xl = Lx[nL - 1] + sxL
            vl = Lv[nL - 1] + alL * Lx[nL - 1] + beL
            xr = Rx[nR - 1] + sxR
            vr = Rv[nR - 1] + alR * Rx[nR - 1] + beR
            if vr - vl <= 0.0 or xr <= xl:
                s = xl
            else:
                s = xl - vl * (xr - xl) / (vr - vl)
                if s < xl:
                    s = xl
                elif s > xr:
                    s = xr
        elif nL > 0:
            xl = Lx[nL - 1] + sxL
            vl = Lv[nL - 1] + alL * Lx[nL - 1] + beL
            s = xl - vl / slope_right
        else:
            xr = Rx[nR - 1] + sxR
            vr = Rv[nR - 1] + alR * Rx[nR - 1] + beR
            s = xr - vr / slope_left
        smin[j] = s

    prev = 0.0
    for j in range(M):
        t = smin[j]
        if t < prev + lo[j]:
            t = prev + lo[j]
        elif t > prev + hi[j]:
            t = prev + hi[j]
        out[j] = t
        prev = t
    return out


@numba.njit(cache=True)
def _solve_chain(y, c, lo, hi, k):
    n = y.size
    t = np.zeros(n)
    if k + 1 < n:
        t[k + 1:] = _solve_side(y[k + 1:], c[k + 1:], lo[k:], hi[k:])
    if k > 0:
        left = _solve_side(y[k - 1::-1].copy(), c[k - 1::-1].copy(),
                           -hi[k - 1::-1], -lo[k - 1::-1])
        t[:k] = left[::-1]
    return t


def solve_chain_qp(problem: ChainQP, tol: float = 1e-9) -> FitResult:
    """Exact minimizer of a chain problem by dynamic programming (O(n^2) worst case).

    ``tol`` bounds the accepted KKT residual (scaled by the data magnitude); a
    larger residual signals a numerical failure and raises.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    p = problem
    t = _solve_chain(p.targets, p.weights, p.lowers, p.uppers, p.anchor)
    kkt = p.kkt_residual(t)
    scale = 1.0 + float(np.abs(p.targets).max()) * float(p.weights.sum())
    if not kkt <= max(tol, 1e-9) * scale * max(1, p.n):
        raise ArithmeticError(f"chain solver KKT residual {kkt:.3g} exceeds tolerance")
    return FitResult(t, p.objective(t), kkt)


def _difference_map(problem: ChainQP) -> np.ndarray:
    """Matrix A with t = A d, d the n - 1 consecutive differences, t_anchor = 0."""
    n, k = problem.n, problem.anchor
    A = np.zeros((n, n - 1))
    for i in range(k + 1, n):
        A[i, k:i] = 1.0
    for i in range(k):
        A[i, i:k] = -1.0
    return A


def _enumerate_active_sets(problem: ChainQP, A: np.ndarray) -> np.ndarray:
    sw = np.sqrt(problem.weights)
    B = sw[:, None] * A
    rhs = sw * problem.targets
    lo, hi = problem.lowers, problem.uppers
    best, best_obj = None, np.inf
    for pattern in itertools.product((0, 1, 2), repeat=problem.n - 1):
        pat = np.array(pattern, dtype=int)
        d = np.where(pat == 1, lo, hi)
        free = pat == 0
        if free.any():
            fixed_part = B[:, ~free] @ d[~free]
            sol, *_ = np.linalg.lstsq(B[:, free], rhs - fixed_part, rcond=None)
            d[free] = sol
            slack = 1e-12 * (1.0 + np.abs(sol))
            if np.any(sol < lo[free] - slack) or np.any(sol > hi[free] + slack):
                continue
        d = np.clip(d, lo, hi)
        obj = problem.objective(A @ d)
        if obj < best_obj:
            best, best_obj = d, obj
    return A @ best


def _projected_gradient(problem: ChainQP, A: np.ndarray, stop: float,
                        max_iter: int = 200_000) -> np.ndarray:
    """Accelerated projected gradient with restarts on the box of differences."""
    lo, hi = problem.lowers, problem.uppers
    H = 2 * A.T @ (problem.weights[:, None] * A)
    g0 = 2 * A.T @ (problem.weights * problem.targets)
    lip = float(np.linalg.eigvalsh(H).max())
    step = 1.0 / lip
    d = np.clip(np.zeros(problem.n - 1), lo, hi)
    z, theta = d.copy(), 1.0
    for it in range(max_iter):
        d_new = np.clip(z - step * (H @ z - g0), lo, hi)
        if np.max(np.abs(d_new - d), initial=0.0) <= stop:
            d = d_new
            break
        theta_new = 0.5 * (1 + np.sqrt(1 + 4 * theta**2))
        mom = (theta - 1) / theta_new
        if (d_new - d) @ (H @ d_new - g0) > 0:
            mom, theta_new = 0.0, 1.0
        z = d_new + mom * (d_new - d)
        d, theta = d_new, theta_new
    # a final run of plain projected steps to polish the fixed point
    for _ in range(1000):
        d_new = np.clip(d - step * (H @ d - g0), lo, hi)
        done = np.max(np.abs(d_new - d), initial=0.0) <= stop * 1e-3
        d = d_new
        if done:
            break
    return A @ d


def brute_fit_oracle(problem: ChainQP, grid_tol: float = 1e-12,
                     method: str = "auto") -> FitResult:
    """Independent solver for small chains (n <= 10).

    Works in the box-constrained difference coordinates. For n <= 5 every
    assignment of each difference to {free, lower, upper} is solved by least
    squares and the best feasible one kept; otherwise accelerated projected
    gradient is run until successive iterates move less than ``grid_tol``.
    """
    if problem.n > ORACLE_MAX_N:
        raise ValueError(f"oracle is limited to n <= {ORACLE_MAX_N}, got {problem.n}")
    if problem.n == 1:
        t = np.zeros(1)
        return FitResult(t, problem.objective(t), problem.kkt_residual(t))
    A = _difference_map(problem)
    if method == "auto":
        method = "enumerate" if problem.n <= ENUMERATION_MAX_N else "pgd"
    if method == "enumerate":
        if problem.n > ENUMERATION_MAX_N + 3:
            raise ValueError("enumeration is limited to n <= 8")
        t = _enumerate_active_sets(problem, A)
    elif method == "pgd":
        t = _projected_gradient(problem, A, grid_tol)
    else:
        raise ValueError(f"unknown oracle method {method!r}")
    return FitResult(t, problem.objective(t), problem.kkt_residual(t))


@numba.njit(cache=True)
def _chain_bounds(knots, a, b):
    n = knots.size
    lowers = np.empty(n - 1)
    uppers = np.empty(n - 1)
    for i in range(n - 1):
        dz = knots[i + 1] - knots[i]
        lowers[i] = a * dz if knots[i] >= 0.0 else 0.0
        uppers[i] = b * dz
    return lowers, uppers


@numba.njit(cache=True)
def _fit_kernel(z, y, order, a, b):
    """Pool ties, solve the chain and rebuild admissible slopes.

    ``order`` sorts z with the zero point appended when z has no exact zero.

    Returns rows (knots, pooled means, counts, values) as one array, the slopes,
    the anchor index and per-sample fitted values.
    """
    m = z.size
    has_anchor = False
    for i in range(m):
        if z[i] == 0.0:
            has_anchor = True
            break
    n_all = m if has_anchor else m + 1
    zz = np.empty(n_all)
    yy = np.empty(n_all)
    zz[:m] = z
    yy[:m] = y
    if not has_anchor:
        zz[m] = 0.0
        yy[m] = 0.0
    group = np.empty(n_all, dtype=np.int64)
    knots = np.empty(n_all)
    sums = np.zeros(n_all)
    counts = np.zeros(n_all)
    g = -1
    prev = np.nan
    for r in range(n_all):
        i = order[r]
        if r == 0 or zz[i] != prev:
            g += 1
            knots[g] = zz[i]
            prev = zz[i]
        group[i] = g
        sums[g] += yy[i]
        counts[g] += 1.0
    n = g + 1
    knots = knots[:n]
    counts = counts[:n]
    means = sums[:n] / counts
    k = 0
    for i in range(n):
        if knots[i] == 0.0:
            k = i
            break
    lowers, uppers = _chain_bounds(knots, a, b)
    t = _solve_chain(means, counts, lowers, uppers, k)

    slopes = np.empty(n - 1)
    for i in range(n - 1):
        dz = knots[i + 1] - knots[i]
        s = (t[i + 1] - t[i]) / dz
        floor = a if knots[i] >= 0.0 else 0.0
        if s < floor:
            s = floor
        elif s > b:
            s = b
        slopes[i] = s
    pooled = np.empty((4, n))
    pooled[0] = knots
    pooled[1] = means
    pooled[2] = counts
    values = pooled[3]
    values[k] = 0.0
    for i in range(k + 1, n):
        values[i] = values[i - 1] + slopes[i - 1] * (knots[i] - knots[i - 1])
    for i in range(k - 1, -1, -1):
        values[i] = values[i + 1] - slopes[i] * (knots[i + 1] - knots[i])
    fitted = np.empty(m)
    for i in range(m):
        fitted[i] = values[group[i]]
    return pooled, slopes, k, fitted


@dataclass(frozen=True, eq=False)
class ActivationFit:
    """Full output of an activation fit: the function, its values at the inputs, the objective."""

    activation: PiecewiseLinearActivation
    fitted: np.ndarray
    objective: float
    pooled: np.ndarray

    @property
    def problem(self) -> ChainQP:
        """The pooled chain problem that was solved."""
        knots, means, counts = self.pooled[0], self.pooled[1], self.pooled[2]
        lowers, uppers = _chain_bounds(knots, self.activation.a, self.activation.b)
        return ChainQP(means, lowers, uppers, self.activation.anchor_index, counts)

    @property
    def kkt_residual(self) -> float:
        return self.problem.kkt_residual(self.activation.values)


@numba.njit(cache=True)
def _fitted_kernel(z, y, order, a, b):
    return _fit_kernel(z, y, order, a, b)[3]


def _sort_order(z: np.ndarray) -> np.ndarray:
    return np.argsort(z if (z == 0.0).any() else np.append(z, 0.0))


def fitted_values(z: np.ndarray, y: np.ndarray, a: float, b: float) -> np.ndarray:
    """Values of the best-fit activation at ``z`` only; contiguous finite input assumed."""
    return _fitted_kernel(z, y, _sort_order(z), float(a), float(b))


def _fit_unchecked(z: np.ndarray, y: np.ndarray, a: float, b: float) -> ActivationFit:
    """Fit for contiguous finite float arrays; callers validate."""
    pooled, slopes, k, fitted = _fit_kernel(z, y, _sort_order(z), float(a), float(b))
    act = PiecewiseLinearActivation._trusted(pooled[0], slopes, pooled[3], k, a, b)
    r = fitted - y
    return ActivationFit(act, fitted, float(r @ r), pooled)


def fit_activation_full(projections, labels, a: float, b: float,
                        tol: float = 1e-9) -> ActivationFit:
    z = np.ascontiguousarray(projections, dtype=float).reshape(-1)
    y = np.ascontiguousarray(labels, dtype=float).reshape(-1)
    if z.shape != y.shape or z.size < 1:
        raise ValueError("projections and labels must be non-empty and equally long")
    if not (np.isfinite(z).all() and np.isfinite(y).all()):
        raise ValueError("non-finite projections or labels")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if not 0 < a <= b:
        raise ValueError("need 0 < a <= b")
    return _fit_unchecked(z, y, a, b)


def fit_activation(projections, labels, a: float, b: float,
                   tol: float = 1e-9) -> PiecewiseLinearActivation:
    """Least-squares activation in U_(a,b) for the points (projection, label).

    A zero point is added when no projection equals 0, ties are pooled, and the
    chain problem is solved exactly; ``tol`` is accepted for interface
    compatibility (the solver is exact up to floating point).
    """
    return fit_activation_full(projections, labels, a, b, tol).activation
