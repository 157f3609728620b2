"""Domain types and evaluation primitives shared across the package."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Iterator, Optional, Sequence

import numba
import numpy as np

NORM_RTOL = 1e-9
# Slope violations below this (relative to b) are treated as rounding and clipped.
SLOPE_RTOL = 1e-9


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream ``key`` under ``seed``.

    SFC64 is used because normal draws are the inner loop's largest cost and it
    is markedly faster than the default PCG64 there.
    """
    return np.random.Generator(np.random.SFC64(np.random.SeedSequence(seed, spawn_key=key)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.setflags(write=False)
    return arr


@numba.njit(cache=True)
def _eval_piecewise(z, knots, values, slopes, left, right):
    n = knots.size
    # region r holds the points with exactly r knots at or below them
    bx = np.empty(n + 1)
    bv = np.empty(n + 1)
    bs = np.empty(n + 1)
    bx[0], bv[0], bs[0] = knots[0], values[0], left
    for r in range(1, n):
        bx[r], bv[r], bs[r] = knots[r - 1], values[r - 1], slopes[r - 1]
    bx[n], bv[n], bs[n] = knots[n - 1], values[n - 1], right
    out = np.empty(z.size)
    for i in range(z.size):
        x = z[i]
        if n <= 16:
            # branchless count beats binary search for the few-knot named activations
            r = 0
            for k in range(n):
                r += x >= knots[k]
        else:
            r, hi = 0, n
            while r < hi:
                mid = (r + hi) >> 1
                if knots[mid] <= x:
                    r = mid + 1
                else:
                    hi = mid
        out[i] = bv[r] + bs[r] * (x - bx[r])
    return out


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """m labelled examples stored as a feature matrix ``X`` (m, d) and labels ``y`` (m,)."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"X has {X.shape[0]} rows but y has {y.shape[0]} entries")
        if X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("dataset needs m >= 1 and d >= 1")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite entries")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @classmethod
    def _trusted(cls, X: np.ndarray, y: np.ndarray) -> "Dataset":
        # generated batches are finite and well-shaped by construction
        obj = object.__new__(cls)
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(obj, "X", X)
        object.__setattr__(obj, "y", y)
        return obj

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "Dataset":
        if not samples:
            raise ValueError("empty sample list")
        X = np.stack([np.asarray(s.x, dtype=float).reshape(-1) for s in samples])
        return cls(X, np.array([s.y for s in samples], dtype=float))

    def samples(self) -> Iterator[Sample]:
        for x, y in zip(self.X, self.y):
            yield Sample(x, float(y))

    def __len__(self) -> int:
        return self.m

    def with_labels(self, y: np.ndarray) -> "Dataset":
        return Dataset(self.X, y)


@dataclass(frozen=True, eq=False)
class PiecewiseLinearActivation:
    """A member of U_(a,b): non-decreasing, b-Lipschitz, u(0) = 0, slope >= a on [0, inf).

    Stored as strictly increasing knots, one of which is 0, plus the slope of every
    segment. ``values`` are rebuilt from the slopes outward from the anchor so the
    segment slopes are admissible exactly, not just up to rounding.

    Beyond the knot range the end segment's slope is used. When the anchor is the
    last knot the right tail has slope ``a``; when it is the first knot the left
    tail is flat.
    """

    knots: np.ndarray
    slopes: np.ndarray
    a: float
    b: float
    values: np.ndarray = field(init=False)
    anchor_index: int = field(init=False)

    def __post_init__(self):
        a, b = float(self.a), float(self.b)
        if not (0 < a <= b) or not math.isfinite(b):
            raise ValueError(f"need 0 < a <= b, got a={a}, b={b}")
        z = np.asarray(self.knots, dtype=float).reshape(-1)
        s = np.asarray(self.slopes, dtype=float).reshape(-1)
        if z.size < 1 or s.size != z.size - 1:
            raise ValueError("need n >= 1 knots and n - 1 slopes")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(s))):
            raise ValueError("non-finite knots or slopes")
        if np.any(np.diff(z) <= 0):
            raise ValueError("knots must be strictly increasing")
        hits = np.flatnonzero(z == 0.0)
        if hits.size != 1:
            raise ValueError("knots must contain the anchor 0 exactly once")
        k = int(hits[0])
        lower = np.where(z[:-1] >= 0, a, 0.0)
        tol = SLOPE_RTOL * b
        if np.any(s < lower - tol) or np.any(s > b + tol):
            raise ValueError("segment slopes leave the admissible band [0 or a, b]")
        s = np.clip(s, lower, b)

        dz = np.diff(z)
        v = np.zeros_like(z)
        if k + 1 < z.size:
            v[k + 1:] = np.cumsum(s[k:] * dz[k:])
        if k > 0:
            v[:k] = -np.cumsum((s[:k] * dz[:k])[::-1])[::-1]
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "knots", _frozen(z))
        object.__setattr__(self, "slopes", _frozen(s))
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "anchor_index", k)

    @classmethod
    def from_points(cls, knots, values, a: float, b: float) -> "PiecewiseLinearActivation":
        """Build from (knot, value) pairs; repeated knots must carry equal values."""
        z = np.asarray(knots, dtype=float).reshape(-1)
        v = np.asarray(values, dtype=float).reshape(-1)
        if z.shape != v.shape or z.size == 0:
            raise ValueError("knots and values must be non-empty and the same length")
        order = np.argsort(z, kind="stable")
        z, v = z[order], v[order]
        keep = np.ones(z.size, dtype=bool)
        keep[1:] = np.diff(z) > 0
        starts = np.flatnonzero(keep)
        # equal knots must agree in value
        for lo, hi in zip(starts, np.append(starts[1:], z.size)):
            if hi - lo > 1 and np.ptp(v[lo:hi]) > SLOPE_RTOL * max(1.0, np.abs(v[lo:hi]).max()):
                raise ValueError(f"equal knots at z={z[lo]} carry different values")
        z, v = z[keep], v[keep]
        k = np.flatnonzero(z == 0.0)
        if k.size == 0:
            raise ValueError("knots must include the anchor z = 0")
        if abs(v[k[0]]) > SLOPE_RTOL * max(1.0, np.abs(v).max()):
            raise ValueError("activation must vanish at the anchor")
        slopes = np.diff(v) / np.diff(z) if z.size > 1 else np.empty(0)
        return cls(z, slopes, a, b)

    @classmethod
    def _trusted(cls, knots, slopes, values, anchor_index: int, a: float, b: float):
        # Internal fast path for solver output that is admissible by construction.
        obj = object.__new__(cls)
        for name, val in (("knots", knots), ("slopes", slopes), ("values", values)):
            val.setflags(write=False)
            object.__setattr__(obj, name, val)
        object.__setattr__(obj, "anchor_index", int(anchor_index))
        object.__setattr__(obj, "a", float(a))
        object.__setattr__(obj, "b", float(b))
        return obj

    @classmethod
    def zero(cls, a: float, b: float) -> "PiecewiseLinearActivation":
        """Anchor-only activation: 0 on z <= 0 and slope ``a`` on z > 0."""
        return cls(np.array([0.0]), np.empty(0), a, b)

    @classmethod
    def linear(cls, c: float, a: float, b: float) -> "PiecewiseLinearActivation":
        return cls(np.array([-1.0, 0.0, 1.0]), np.array([c, c]), a, b)

    @property
    def n(self) -> int:
        return self.knots.size

    def _tail_slopes(self) -> tuple[float, float]:
        left = 0.0 if self.anchor_index == 0 else float(self.slopes[0])
        right = self.a if self.anchor_index == self.n - 1 else float(self.slopes[-1])
        return left, right

    def _segments(self, z: np.ndarray):
        left, right = self._tail_slopes()
        seg_slope = np.append(self.slopes, right)
        idx = np.searchsorted(self.knots, z, side="right") - 1
        inside = idx >= 0
        i = np.where(inside, idx, 0)
        slope = np.where(inside, seg_slope[i], left)
        return i, slope

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        left, right = self._tail_slopes()
        flat = np.ascontiguousarray(z).reshape(-1)
        out = _eval_piecewise(flat, self.knots, self.values, self.slopes, left, right).reshape(z.shape)
        return out if out.ndim else float(out)

    def integral(self, t):
        """Exact integral of the activation from 0 to ``t`` (vectorized)."""
        t = np.asarray(t, dtype=float)
        z, v, s = self.knots, self.values, self.slopes
        k = self.anchor_index
        dz = np.diff(z)
        seg = v[:-1] * dz + 0.5 * s * dz**2
        cum = np.zeros_like(z)
        if k + 1 < z.size:
            cum[k + 1:] = np.cumsum(seg[k:])
        if k > 0:
            cum[:k] = -np.cumsum(seg[:k][::-1])[::-1]
        i, slope = self._segments(t)
        h = t - z[i]
        out = cum[i] + v[i] * h + 0.5 * slope * h**2
        return out if out.ndim else float(out)

    def membership_violation(self) -> float:
        """Largest amount by which a segment slope leaves its admissible band (0 if valid)."""
        if self.slopes.size == 0:
            return 0.0
        lower = np.where(self.knots[:-1] >= 0, self.a, 0.0)
        return float(max(0.0, np.max(lower - self.slopes), np.max(self.slopes - self.b)))

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist(),
                "a": self.a, "b": self.b}


def eval_activation(u: PiecewiseLinearActivation, z):
    return u(z)


@dataclass(frozen=True, eq=False)
class Hypothesis:
    w: np.ndarray
    activation: PiecewiseLinearActivation

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite weight vector")
        object.__setattr__(self, "w", _frozen(w))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.w))

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.w.size:
            raise ValueError(f"feature dimension {X.shape[1]} != weight dimension {self.w.size}")
        return np.asarray(self.activation(X @ self.w))

    def within_ball(self, W: float) -> bool:
        return self.norm <= W * (1 + NORM_RTOL)

    @classmethod
    def zero(cls, d: int, a: float, b: float) -> "Hypothesis":
        return cls(np.zeros(d), PiecewiseLinearActivation.zero(a, b))

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), **self.activation.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Hypothesis":
        missing = {"w", "knots", "values", "a", "b"} - set(data)
        if missing:
            raise ValueError(f"hypothesis JSON is missing keys: {sorted(missing)}")
        act = PiecewiseLinearActivation.from_points(data["knots"], data["values"],
                                                    data["a"], data["b"])
        return cls(np.asarray(data["w"], dtype=float), act)


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters for the learner.

    ``mu``, ``eta_init`` and ``eta_opt`` default to ``None`` and are then derived:
    mu = min(1, a^2 L R^4 / b), eta_init = mu^3 / (2^7 b^4), eta_opt = mu / (4 b^2).
    """

    a: float = 0.5
    b: float = 1.0
    L: float = 0.05
    R: float = 1.0
    W: float = 2.0
    eps: float = 0.01
    delta: float = 0.1
    mu: Optional[float] = None
    eta_init: Optional[float] = None
    eta_opt: Optional[float] = None
    t0_cap: int = 200
    T_cap: int = 500
    J_cap: int = 64
    m_batch: int = 2048
    m_test: int = 4096
    m_init: int = 2048
    seed: int = 0
    kkt_tol: float = 1e-7
    fd_tol: float = 1e-5
    test_radius_const: float = 1.0

    def __post_init__(self):
        if not (0 < self.a <= 1 <= self.b):
            raise ValueError(f"need 0 < a <= 1 <= b, got a={self.a}, b={self.b}")
        if not (0 < self.L <= 1 and 0 < self.R <= 1):
            raise ValueError("need L, R in (0, 1]")
        if not self.W > 0:
            raise ValueError("W must be positive")
        for name in ("eps", "delta"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.mu is not None and not 0 < self.mu <= 1:
            raise ValueError("mu must lie in (0, 1]")
        for name in ("eta_init", "eta_opt"):
            val = getattr(self, name)
            if val is not None and not (val >= 0 and math.isfinite(val)):
                raise ValueError(f"{name} must be a finite non-negative number")
        if self.t0_cap < 0 or self.T_cap < 0 or self.J_cap < 1:
            raise ValueError("need t0_cap >= 0, T_cap >= 0 and J_cap >= 1")
        for name in ("m_batch", "m_test", "m_init"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kkt_tol <= 0 or self.fd_tol <= 0 or self.test_radius_const <= 0:
            raise ValueError("tolerances and constants must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown learner keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def mu_value(self) -> float:
        if self.mu is not None:
            return self.mu
        return min(1.0, self.a**2 * self.L * self.R**4 / self.b)

    @property
    def eta_init_value(self) -> float:
        if self.eta_init is not None:
            return self.eta_init
        return self.mu_value**3 / (2**7 * self.b**4)

    @property
    def eta_opt_value(self) -> float:
        if self.eta_opt is not None:
            return self.eta_opt
        return self.mu_value / (4 * self.b**2)

    @property
    def t0(self) -> int:
        r = self.b / self.mu_value
        return int(min(self.t0_cap, math.ceil(r**6 * math.log(4 * r))))

    @property
    def T(self) -> int:
        r = self.b / self.mu_value
        return int(min(self.T_cap, math.ceil(r**2 * math.log(1 / self.eps))))

    @property
    def J_uncapped(self) -> float:
        step = self.eta_opt_value * math.sqrt(self.eps)
        return math.inf if step == 0 else math.ceil(self.W / step)

    def betas(self) -> np.ndarray:
        """Scale grid for the norm of the target direction."""
        J = self.J_uncapped
        if J > self.J_cap:
            return self.W * np.arange(1, self.J_cap + 1) / self.J_cap
        step = self.eta_opt_value * math.sqrt(self.eps)
        return np.minimum(step * np.arange(1, int(J) + 1), self.W)

    @property
    def label_cap(self) -> float:
        """Label truncation level M = (bW/L) log(16 b^4 W^4 / eps^2)."""
        b, W = self.b, self.W
        return (b * W / self.L) * math.log(16 * b**4 * W**4 / self.eps**2)

    @property
    def test_radius(self) -> float:
        """Projection radius r used by the testing step (window is |w.x| <= W r)."""
        b, W, L, e = self.b, self.W, self.L, self.eps
        inner = max(math.log(b * W / e) ** 2, 1.0)
        return math.log(self.test_radius_const * b**4 * W**4 / (L**6 * e**2) * inner) / L


def l2_loss(h: Hypothesis, data: Dataset) -> float:
    """Empirical squared loss (1/m) sum (u(w.x) - y)^2."""
    r = h.predict(data.X) - data.y
    return float(np.mean(r * r))


def misalignment(wstar, w) -> float:
    """Norm of the component of ``wstar`` orthogonal to ``w``; ``|wstar|`` when w = 0."""
    wstar = np.asarray(wstar, dtype=float)
    w = np.asarray(w, dtype=float)
    if wstar.shape != w.shape:
        raise ValueError("vectors must share a dimension")
    nw2 = float(w @ w)
    ns = math.sqrt(float(wstar @ wstar))
    if nw2 == 0.0:
        return ns
    perp = wstar - (float(wstar @ w) / nw2) * w
    # the orthogonal part can never exceed |wstar|; rounding occasionally pushes it over
    return min(math.sqrt(float(perp @ perp)), ns)


def angle(w1, w2) -> float:
    w1 = np.asarray(w1, dtype=float)
    w2 = np.asarray(w2, dtype=float)
    n1, n2 = np.linalg.norm(w1), np.linalg.norm(w2)
    if n1 == 0 or n2 == 0:
        raise ValueError("angle is undefined for a zero vector")
    return float(np.arccos(np.clip((w1 @ w2) / (n1 * n2), -1.0, 1.0)))
