"""Alternating learner: activation fits plus surrogate-gradient steps on a grid of scales."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Protocol, Sequence

import numpy as np

from .core import Dataset, Hypothesis, LearnerConfig, make_rng
from .monotone_fit import _fit_unchecked, fitted_values
from .synth import ScenarioSpec

log = logging.getLogger(__name__)

# spawn keys for independent RNG streams
INIT_STREAM = 0
TASK_STREAM = 1
TEST_STREAM = 2

# precision of the dot-product misalignment formula, relative to |w*|
MISALIGNMENT_ATOL = 1e-7


class SampleSource(Protocol):
    d: int

    def draw(self, m: int) -> Dataset: ...

    def spawn(self, *key: int) -> "SampleSource": ...


class ScenarioSource:
    """Fresh i.i.d. batches from a simulated scenario.

    With ``fresh=False`` the first batch of each size is cached and served again,
    which reuses samples across iterations.
    """

    def __init__(self, spec: ScenarioSpec, key: Sequence[int] = (), fresh: bool = True):
        self.spec = spec
        self.key = tuple(int(k) for k in key)
        self.fresh = fresh
        self.d = spec.d
        self._rng = spec.rng(1, *self.key)
        self._cache: dict = {}

    def draw(self, m: int) -> Dataset:
        if self.fresh:
            return self.spec.draw(m, self._rng)
        if m not in self._cache:
            self._cache[m] = self.spec.draw(m, self._rng)
        return self._cache[m]

    def spawn(self, *key: int) -> "ScenarioSource":
        return ScenarioSource(self.spec, self.key + key, self.fresh)


class DatasetSource:
    """Batches from a fixed dataset: bootstrap resamples, or the whole set every time."""

    def __init__(self, data: Dataset, seed: int = 0, key: Sequence[int] = (),
                 mode: str = "bootstrap"):
        if mode not in ("bootstrap", "fixed"):
            raise ValueError("mode must be 'bootstrap' or 'fixed'")
        self.data = data
        self.seed = seed
        self.key = tuple(int(k) for k in key)
        self.mode = mode
        self.d = data.d
        self._rng = make_rng(seed, *self.key)

    def draw(self, m: int) -> Dataset:
        if self.mode == "fixed":
            return self.data
        idx = self._rng.integers(0, self.data.m, size=m)
        return Dataset._trusted(self.data.X[idx], self.data.y[idx])

    def spawn(self, *key: int) -> "DatasetSource":
        return DatasetSource(self.data, self.seed, self.key + key, self.mode)


def truncate_label(y, M: float):
    """sgn(y) min(|y|, M), elementwise."""
    if not M > 0:
        raise ValueError("truncation level must be positive")
    out = np.clip(y, -M, M)
    return out if np.ndim(out) else float(out)


class TruncatedSource:
    def __init__(self, inner: SampleSource, M: float):
        self.inner = inner
        self.M = M
        self.d = inner.d

    def draw(self, m: int) -> Dataset:
        data = self.inner.draw(m)
        if np.abs(data.y).max() <= self.M:
            return data
        return Dataset._trusted(data.X, np.clip(data.y, -self.M, self.M))

    def spawn(self, *key: int) -> "TruncatedSource":
        return TruncatedSource(self.inner.spawn(*key), self.M)


TRACE_COLUMNS = ("k", "j", "t", "w_norm", "misalignment", "next_misalignment",
                 "next_distance", "loss", "grad_norm", "inner")


@dataclass
class TraceRecord:
    """Append-only per-iteration log; w*-dependent columns are NaN when w* is unknown."""

    columns: dict = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})

    def append(self, **row) -> None:
        for name in TRACE_COLUMNS:
            self.columns[name].append(row.get(name, math.nan))

    def extend(self, other: "TraceRecord") -> None:
        for name in TRACE_COLUMNS:
            self.columns[name].extend(other.columns[name])

    def __len__(self) -> int:
        return len(self.columns["t"])

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.columns[name], dtype=float)

    def rows(self):
        return zip(*(self.columns[name] for name in TRACE_COLUMNS))


@dataclass(frozen=True, eq=False)
class Candidate:
    hypothesis: Hypothesis
    k: int
    j: int
    beta: float


@dataclass(eq=False)
class CandidateSet:
    candidates: List[Candidate]
    trace: TraceRecord = field(default_factory=TraceRecord)
    test_losses: Optional[np.ndarray] = None
    selected: Optional[int] = None

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i) -> Candidate:
        return self.candidates[i]


class LearnResult(NamedTuple):
    hypothesis: Hypothesis
    candidates: CandidateSet
    trace: TraceRecord


def _gradient_step(w: np.ndarray, batch: Dataset, a: float, b: float):
    """Surrogate gradient at (w, best-fit activation) and the residuals."""
    r = fitted_values(batch.X @ w, batch.y, a, b) - batch.y
    return (r @ batch.X) / batch.m, r


def initialize(config: LearnerConfig, source: SampleSource) -> List[np.ndarray]:
    """Plain surrogate-gradient steps from w = 0 with a freshly fitted activation each step."""
    w = np.zeros(source.d)
    iterates = [w.copy()]
    eta = config.eta_init_value
    for _ in range(config.t0):
        batch = source.draw(config.m_init)
        g, _ = _gradient_step(w, batch, config.a, config.b)
        w = w - eta * g
        iterates.append(w.copy())
    return iterates


def _random_unit(d: int, seed: int, key: tuple) -> np.ndarray:
    rng = make_rng(seed, *key)
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _misalignment_fast(wstar, w, ws2: float) -> float:
    # same quantity as core.misalignment from dot products; adequate for logging
    nw2 = float(w @ w)
    if nw2 == 0.0:
        return math.sqrt(ws2)
    c = float(wstar @ w)
    return math.sqrt(max(ws2 - c * c / nw2, 0.0))


def run_inner_loop(w_init, beta: float, config: LearnerConfig, source: SampleSource,
                   wstar=None, k: int = 0, j: int = 0) -> tuple[Hypothesis, TraceRecord]:
    """T normalized surrogate-gradient steps at scale ``beta``; returns the last (w, u) pair."""
    if not beta > 0:
        raise ValueError("beta must be positive")
    a, b, eta, T = config.a, config.b, config.eta_opt_value, config.T
    w_bar = np.asarray(w_init, dtype=float).reshape(-1)
    known = wstar is not None
    if known:
        wstar = np.asarray(wstar, dtype=float)
        ws2 = float(wstar @ wstar)
    trace = TraceRecord()
    for t in range(T + 1):
        nrm = math.sqrt(float(w_bar @ w_bar))
        if nrm == 0.0:
            log.info("zero iterate at (k=%d, j=%d, t=%d); restarting from a random unit vector", k, j, t)
            w_bar = _random_unit(w_bar.size, config.seed, (TASK_STREAM + 10, k, j, t))
            nrm = 1.0
        w_hat = beta * (w_bar / nrm)
        batch = source.draw(config.m_batch)
        if t == T:
            return Hypothesis(w_hat, _fit_unchecked(batch.X @ w_hat, batch.y, a, b).activation), trace
        g, r = _gradient_step(w_hat, batch, a, b)
        w_bar = w_hat - eta * g
        row = dict(k=k, j=j, t=t, w_norm=beta, loss=float(r @ r) / batch.m,
                   grad_norm=math.sqrt(float(g @ g)))
        if known:
            diff = w_bar - wstar
            v_next = _misalignment_fast(wstar, w_bar, ws2)
            dist = math.sqrt(float(diff @ diff))
            # the distance to the line through w_bar cannot exceed the distance to w_bar
            if v_next > dist + MISALIGNMENT_ATOL * math.sqrt(ws2):
                raise AssertionError(f"misalignment {v_next} exceeds distance {dist} at t={t}")
            row.update(misalignment=_misalignment_fast(wstar, w_hat, ws2),
                       next_misalignment=v_next, next_distance=dist,
                       inner=float(g @ (w_hat - wstar)))
        trace.append(**row)
    raise AssertionError("unreachable")


def _inner_task(args):
    w_init, beta, config, source, wstar, k, j = args
    return run_inner_loop(w_init, beta, config, source, wstar, k, j)


def optimize(config: LearnerConfig, source: SampleSource, wstar=None,
             workers: int = 1) -> CandidateSet:
    """Initialization once, then the inner loop for every (restart point, scale) pair.

    Each (k, j) task draws from its own spawned stream, so results do not depend
    on the number of workers.
    """
    starts = initialize(config, source.spawn(INIT_STREAM))
    betas = config.betas()
    if config.J_uncapped > config.J_cap:
        log.warning("scale grid capped at %d points (uncapped size %s); resolution is W/J = %.3g",
                    config.J_cap, config.J_uncapped, config.W / config.J_cap)
    tasks = [(w0, float(beta), config, source.spawn(TASK_STREAM, k, j), wstar, k, j)
             for k, w0 in enumerate(starts) for j, beta in enumerate(betas, start=1)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_inner_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_inner_task(task) for task in tasks]

    zero = Hypothesis.zero(source.d, config.a, config.b)
    out = CandidateSet([Candidate(zero, -1, 0, 0.0)])
    for task, (hyp, trace) in zip(tasks, results):
        out.candidates.append(Candidate(hyp, task[5], task[6], task[1]))
        out.trace.extend(trace)
    return out


def windowed_losses(candidates: CandidateSet, batch: Dataset, config: LearnerConfig) -> np.ndarray:
    """Windowed empirical loss of every candidate: mean of (u(w.x) - y)^2 1{|w.x| <= W r}."""
    window = config.W * config.test_radius
    losses = np.empty(len(candidates))
    for i, cand in enumerate(candidates):
        z = batch.X @ cand.hypothesis.w
        r = np.asarray(cand.hypothesis.activation(z)) - batch.y
        losses[i] = np.mean(np.where(np.abs(z) <= window, r * r, 0.0))
    return losses


def select_hypothesis(candidates: CandidateSet, config: LearnerConfig,
                      source: SampleSource) -> Hypothesis:
    """Candidate with the smallest windowed loss on one fresh test batch (lowest index on ties)."""
    if len(candidates) == 0:
        raise ValueError("empty candidate set")
    losses = windowed_losses(candidates, source.draw(config.m_test), config)
    idx = int(np.argmin(losses))
    candidates.test_losses, candidates.selected = losses, idx
    return candidates[idx].hypothesis


def learn(config: LearnerConfig, source: SampleSource, wstar=None,
          workers: int = 1) -> LearnResult:
    """Truncate labels, run the optimization over restarts and scales, then test."""
    src = TruncatedSource(source, config.label_cap)
    candidates = optimize(config, src, wstar, workers)
    best = select_hypothesis(candidates, config, src.spawn(TEST_STREAM))
    return LearnResult(best, candidates, candidates.trace)

