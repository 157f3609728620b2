"""Synthetic scenarios: well-behaved marginals, planted single-index targets, label noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset, PiecewiseLinearActivation, make_rng

# (L, R) per marginal kind. Every kind is scaled so that E[x x^T] = I.
#
# gaussian_isotropic: a 2-D projection is N(0, I_2); its density on the box
#   |x|_inf <= 1 is smallest at a corner, exp(-1) / (2 pi) = 0.0585 >= 0.05, and
#   (1/2pi) exp(-r^2/2) <= 20 exp(-0.05 r) everywhere.
# laplace_product: coordinates Laplace with scale 1/sqrt(2). On a coordinate
#   plane the density is 0.5 exp(-sqrt(2) |x|_1); over any rotated unit box |x|_1
#   is at most 2, giving 0.5 exp(-2 sqrt(2)) = 0.0296. Mixed projections are
#   closer to Gaussian and larger at the box corners, so L = 0.025.
# logistic_product: coordinates logistic with scale sqrt(3)/pi. The 1-D density at
#   1 is 0.2185, so coordinate-plane corners give 0.0477; L = 0.04.
# uniform_ball: uniform on the ball of radius sqrt(d + 2). The 2-D marginal is
#   proportional to (d + 2 - |x|^2)^((d-2)/2); numerically its value at a box corner
#   (|x|^2 = 2) decreases from 0.0796 (d = 2) toward the Gaussian 0.0585, so L = 0.05.
# For these kinds the sub-exponential envelope (1/L) exp(-L |x|) is loose at the
# chosen L. The values were derived by the integrals above, not estimated.
MARGINAL_CONSTANTS = {
    "gaussian_isotropic": (0.05, 1.0),
    "laplace_product": (0.025, 1.0),
    "logistic_product": (0.04, 1.0),
    "uniform_ball": (0.05, 1.0),
}

NOISE_KINDS = ("none", "sign_flip", "zero_out", "additive_outlier", "label_shift")
ACTIVATION_KINDS = ("linear", "relu", "leaky_relu", "saturating_ramp")


@dataclass(frozen=True)
class MarginalSpec:
    kind: str = "gaussian_isotropic"
    d: int = 10

    def __post_init__(self):
        if self.kind not in MARGINAL_CONSTANTS:
            raise ValueError(f"unknown marginal {self.kind!r}; choose from {sorted(MARGINAL_CONSTANTS)}")
        if self.d < 1:
            raise ValueError("d must be >= 1")

    @property
    def L(self) -> float:
        return MARGINAL_CONSTANTS[self.kind][0]

    @property
    def R(self) -> float:
        return MARGINAL_CONSTANTS[self.kind][1]

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        d = self.d
        if self.kind == "gaussian_isotropic":
            return rng.standard_normal((m, d))
        if self.kind == "laplace_product":
            return rng.laplace(scale=1 / math.sqrt(2), size=(m, d))
        if self.kind == "logistic_product":
            return rng.logistic(scale=math.sqrt(3) / math.pi, size=(m, d))
        direction = rng.standard_normal((m, d))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = math.sqrt(d + 2) * rng.random(m) ** (1 / d)
        return direction * radius[:, None]


def named_activation(kind: str, a: float, b: float, c: Optional[float] = None) -> PiecewiseLinearActivation:
    """Common link functions as members of U_(a,b).

    linear(c): c z.  relu: max(z, 0).  leaky_relu(c): z for z >= 0, c z below.
    saturating_ramp(c): z for z >= -c, constant -c below (c defaults to 1).
    """
    if kind == "linear":
        c = 1.0 if c is None else c
        return PiecewiseLinearActivation(np.array([-1.0, 0.0, 1.0]), np.array([c, c]), a, b)
    if kind == "relu":
        return PiecewiseLinearActivation(np.array([-1.0, 0.0, 1.0]), np.array([0.0, 1.0]), a, b)
    if kind == "leaky_relu":
        c = 0.01 if c is None else c
        return PiecewiseLinearActivation(np.array([-1.0, 0.0, 1.0]), np.array([c, 1.0]), a, b)
    if kind == "saturating_ramp":
        c = 1.0 if c is None else c
        if c <= 0:
            raise ValueError("saturation level must be positive")
        return PiecewiseLinearActivation(np.array([-c - 1.0, -c, 0.0, 1.0]),
                                         np.array([0.0, 1.0, 1.0]), a, b)
    raise ValueError(f"unknown activation {kind!r}; choose from {ACTIVATION_KINDS}")


@dataclass(frozen=True, eq=False)
class TargetModel:
    wstar: np.ndarray
    ustar: PiecewiseLinearActivation

    def __post_init__(self):
        w = np.asarray(self.wstar, dtype=float).reshape(-1)
        w.setflags(write=False)
        object.__setattr__(self, "wstar", w)

    def labels(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(self.ustar(X @ self.wstar))


@dataclass(frozen=True)
class NoiseModel:
    """I.i.d. label corruption applied with probability ``p`` per sample.

    sign_flip: y -> -y.  zero_out: y -> 0.  additive_outlier: y -> y +/- magnitude
    (random sign).  label_shift: y -> y + shift.
    """

    kind: str = "none"
    p: float = 0.0
    magnitude: float = 0.0
    shift: float = 0.0

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise {self.kind!r}; choose from {NOISE_KINDS}")
        if not 0 <= self.p <= 1:
            raise ValueError("noise probability must lie in [0, 1]")
        if not (math.isfinite(self.magnitude) and math.isfinite(self.shift)):
            raise ValueError("noise magnitudes must be finite")

    def apply(self, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none" or self.p == 0:
            return y
        hit = rng.random(y.size) < self.p
        if self.kind == "sign_flip":
            return np.where(hit, -y, y)
        if self.kind == "zero_out":
            return np.where(hit, 0.0, y)
        if self.kind == "additive_outlier":
            sign = np.where(rng.random(y.size) < 0.5, -1.0, 1.0)
            return y + hit * sign * self.magnitude
        return y + hit * self.shift


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    marginal: MarginalSpec
    target: TargetModel
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0

    def __post_init__(self):
        if self.target.wstar.size != self.marginal.d:
            raise ValueError("target direction and marginal dimension disagree")

    @property
    def d(self) -> int:
        return self.marginal.d

    def rng(self, *key: int) -> np.random.Generator:
        return make_rng(self.seed, *key)

    def draw(self, m: int, rng: np.random.Generator) -> Dataset:
        X = self.marginal.sample(m, rng)
        y = self.noise.apply(self.target.labels(X), rng)
        return Dataset._trusted(X, np.ascontiguousarray(y, dtype=float))

    @classmethod
    def from_dict(cls, data: dict, a: float, b: float) -> "ScenarioSpec":
        _reject_unknown(data, {"marginal", "target", "noise", "seed"}, "scenario")
        marginal = dict(data.get("marginal", {}))
        _reject_unknown(marginal, {"kind", "d"}, "scenario.marginal")
        ms = MarginalSpec(**marginal)
        target = dict(data.get("target", {}))
        _reject_unknown(target, {"wstar", "wstar_norm", "activation"}, "scenario.target")
        if "wstar" in target:
            wstar = np.asarray(target["wstar"], dtype=float)
        else:
            wstar = np.zeros(ms.d)
            wstar[0] = float(target.get("wstar_norm", 1.0))
        act = dict(target.get("activation", {"kind": "relu"}))
        _reject_unknown(act, {"kind", "c"}, "scenario.target.activation")
        ustar = named_activation(act.get("kind", "relu"), a, b, act.get("c"))
        noise = dict(data.get("noise", {}))
        _reject_unknown(noise, {"kind", "p", "magnitude", "shift"}, "scenario.noise")
        return cls(ms, TargetModel(wstar, ustar), NoiseModel(**noise), int(data.get("seed", 0)))


def _reject_unknown(data: dict, allowed: set, where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


def sample_batch(spec: ScenarioSpec, m: int, stream_id: int = 0) -> Dataset:
    """m i.i.d. draws, reproducible from (spec.seed, stream_id)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    return spec.draw(m, spec.rng(0, stream_id))


def estimate_opt(spec: ScenarioSpec, n_mc: int = 100_000,
                 stream_id: int = 0) -> tuple[float, float]:
    """Monte-Carlo loss of the planted pair (mean, standard error).

    This upper-bounds the true OPT: some other pair in the class may fit the
    corrupted labels better than the planted one.
    """
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    rng = make_rng(spec.seed, 3, stream_id)
    data = spec.draw(n_mc, rng)
    sq = (spec.target.labels(data.X) - data.y) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(n_mc))


def write_csv(data: Dataset, path) -> None:
    header = ",".join([f"x{i + 1}" for i in range(data.d)] + ["y"])
    table = np.column_stack([data.X, data.y])
    np.savetxt(Path(path), table, fmt="%.17g", delimiter=",", header=header, comments="")


def read_csv(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
    d = len(header) - 1
    expected = [f"x{i + 1}" for i in range(d)] + ["y"]
    if d < 1 or header != expected:
        raise ValueError(f"{path}: header must be x1,...,xd,y")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if table.shape[1] != d + 1:
        raise ValueError(f"{path}: rows must have {d + 1} columns")
    return Dataset(table[:, :d], table[:, d])
