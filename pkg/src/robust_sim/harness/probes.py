"""Monte-Carlo probes of the structural properties the learner relies on.

Every probe returns a ProbeResult: a rectangular table (no NaN cells) plus
metadata. Rows whose misalignment is numerically zero are flagged
``degenerate`` and never divided through.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from ..core import LearnerConfig, PiecewiseLinearActivation, make_rng, misalignment
from ..learner import ScenarioSource, TruncatedSource, run_inner_loop
from ..monotone_fit import fit_activation_full
from ..surrogate import gradient_from_residuals
from ..synth import (MarginalSpec, NoiseModel, ScenarioSpec, TargetModel,
                     estimate_opt, named_activation)

DEGENERATE_TOL = 1e-12

# stream prefixes; the learner and synth use 0-3
SHARPNESS_STREAM = 5
MISALIGNMENT_STREAM = 6
CONTRACTION_STREAM = 7
EXAMPLE_STREAM = 8


@dataclass
class ProbeResult:
    name: str
    columns: tuple
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, **row) -> None:
        missing = set(self.columns) - set(row)
        if missing:
            raise ValueError(f"row is missing columns {sorted(missing)}")
        values = tuple(row[c] for c in self.columns)
        if any(isinstance(v, float) and not math.isfinite(v) for v in values):
            raise ValueError(f"non-finite value in probe row {row}")
        self.rows.append(values)

    def column(self, name: str) -> np.ndarray:
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)


def _require_target(scenario: ScenarioSpec) -> np.ndarray:
    wstar = scenario.target.wstar
    if not np.any(wstar):
        raise ValueError("probe needs a nonzero target direction w*")
    if scenario.d < 2:
        raise ValueError("probe needs d >= 2 to rotate away from w*")
    return wstar


def rotated_weight(wstar: np.ndarray, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Vector of norm |w*| at angle ``theta`` from w*, in a random orthogonal direction."""
    ns = float(np.linalg.norm(wstar))
    e = wstar / ns
    while True:
        v = rng.standard_normal(wstar.size)
        v -= (v @ e) * e
        nv = float(np.linalg.norm(v))
        if nv > 1e-8:
            break
    return ns * (math.cos(theta) * e + math.sin(theta) * (v / nv))


def _check_angles(angles, closed: bool = False) -> np.ndarray:
    angles = np.asarray(angles, dtype=float).reshape(-1)
    if angles.size == 0:
        raise ValueError("need at least one angle")
    ok = (angles >= 0) & (angles <= math.pi) if closed else (angles > 0) & (angles < math.pi)
    if not ok.all():
        raise ValueError("angles must lie in (0, pi) radians")
    return angles


def probe_sharpness(scenario: ScenarioSpec, angles, m: int, a: float, b: float,
                    trials: int = 1, activation: Optional[PiecewiseLinearActivation] = None
                    ) -> ProbeResult:
    """Surrogate gradient against (w - w*) at |w| = |w*| for each angle.

    The activation is fitted on the same fresh batch unless ``activation`` is
    given, in which case it is held fixed.
    """
    wstar = _require_target(scenario)
    angles = _check_angles(angles)
    if m < 256:
        raise ValueError("m must be >= 256")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    res = ProbeResult("sharpness", ("trial", "theta", "v_sq", "inner", "grad_norm_sq",
                                    "loss", "degenerate"))
    for trial in range(trials):
        for i, theta in enumerate(angles):
            rng = scenario.rng(SHARPNESS_STREAM, trial, i)
            w = rotated_weight(wstar, float(theta), rng)
            batch = scenario.draw(m, rng)
            z = batch.X @ w
            if activation is None:
                pred = fit_activation_full(z, batch.y, a, b).fitted
            else:
                pred = np.asarray(activation(z))
            r = pred - batch.y
            g = gradient_from_residuals(batch.X, r)
            v_sq = misalignment(wstar, w) ** 2
            res.add(trial=trial, theta=float(theta), v_sq=v_sq, inner=float(g @ (w - wstar)),
                    grad_norm_sq=float(g @ g), loss=float(r @ r) / m,
                    degenerate=int(v_sq < DEGENERATE_TOL))
    res.metadata = dict(seed=scenario.seed, m=m, trials=trials, fitted=activation is None)
    return res


def probe_misalignment(scenario: ScenarioSpec, f_family: Mapping[str, Callable], angles,
                       n_mc: int) -> ProbeResult:
    """Monte-Carlo E[(f(w.x) - u*(w*.x))^2] against |(w*)^perp_w|^2 for |w| = |w*|.

    Angles may include 0 here; such rows are degenerate and report ratio 0.
    The noise model is ignored: the error is measured against clean labels.
    """
    wstar = _require_target(scenario)
    angles = _check_angles(angles, closed=True)
    if n_mc < 10_000:
        raise ValueError("n_mc must be >= 10000")
    res = ProbeResult("misalignment", ("f", "theta", "err", "err_se", "v_sq", "ratio",
                                       "degenerate"))
    ratios = []
    for i, theta in enumerate(angles):
        rng = scenario.rng(MISALIGNMENT_STREAM, i)
        w = rotated_weight(wstar, float(theta), rng)
        X = scenario.marginal.sample(n_mc, rng)
        clean = scenario.target.labels(X)
        z = X @ w
        v_sq = misalignment(wstar, w) ** 2
        degenerate = v_sq < DEGENERATE_TOL
        for name, f in f_family.items():
            sq = (np.asarray(f(z), dtype=float) - clean) ** 2
            err = float(sq.mean())
            ratio = 0.0 if degenerate else err / v_sq
            if not degenerate:
                ratios.append(ratio)
            res.add(f=name, theta=float(theta), err=err,
                    err_se=float(sq.std(ddof=1) / math.sqrt(n_mc)), v_sq=v_sq,
                    ratio=ratio, degenerate=int(degenerate))
    res.metadata = dict(seed=scenario.seed, n_mc=n_mc,
                        min_ratio=min(ratios) if ratios else None)
    return res


def _contraction_task(args):
    scenario, config, seed, wstar = args
    source = TruncatedSource(ScenarioSource(scenario, key=(CONTRACTION_STREAM, seed)),
                             config.label_cap)
    w0 = make_rng(scenario.seed, CONTRACTION_STREAM, seed, 0).standard_normal(scenario.d)
    # start on the side of w* that initialization delivers; from an obtuse start the
    # orthogonal part must first grow through 90 degrees
    if w0 @ wstar < 0:
        w0 = -w0
    _, trace = run_inner_loop(w0, float(np.linalg.norm(wstar)), config, source, wstar)
    return trace.column("misalignment"), trace.column("next_misalignment")


def probe_contraction(scenario: ScenarioSpec, config: LearnerConfig, seeds: int,
                      threshold_const: float = 96.0, n_mc_opt: int = 100_000,
                      workers: int = 1) -> ProbeResult:
    """Per-step ratio |v^{t+1}| / |v^t| of the inner loop run at beta = |w*|.

    Each seed starts from a random direction with positive correlation to w*.

    Steps count towards the contracting fraction only when
    |v^t| > (threshold_const / mu) sqrt(OPT_proxy + eps).
    """
    wstar = _require_target(scenario)
    if seeds < 1:
        raise ValueError("seeds must be >= 1")
    opt, opt_se = estimate_opt(scenario, n_mc_opt)
    threshold = threshold_const / config.mu_value * math.sqrt(opt + config.eps)
    tasks = [(scenario, config, s, wstar) for s in range(seeds)]
    if workers > 1 and seeds > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            traces = list(pool.map(_contraction_task, tasks))
    else:
        traces = [_contraction_task(t) for t in tasks]
    res = ProbeResult("contraction", ("seed", "t", "v", "v_next", "ratio", "qualifying",
                                      "contracting"))
    n_qual = n_contract = 0
    for s, (v, v_next) in enumerate(traces):
        for t in range(v.size):
            degenerate = v[t] ** 2 < DEGENERATE_TOL
            ratio = 1.0 if degenerate else float(v_next[t] / v[t])
            qualifying = (not degenerate) and v[t] > threshold
            contracting = qualifying and ratio < 1.0
            n_qual += qualifying
            n_contract += contracting
            res.add(seed=s, t=t, v=float(v[t]), v_next=float(v_next[t]), ratio=ratio,
                    qualifying=int(qualifying), contracting=int(contracting))
    res.metadata = dict(seed=scenario.seed, seeds=seeds, opt_proxy=opt, opt_se=opt_se,
                        threshold=threshold, threshold_const=threshold_const,
                        qualifying_steps=n_qual,
                        contracting_fraction=n_contract / n_qual if n_qual else None)
    return res


def example_scenario(d: int = 4, a: float = 1.0, wstar_norm: float = 1.0,
                     seed: int = 0) -> ScenarioSpec:
    """Realizable Gaussian scenario with linear target u*(z) = a z and w* on the first axis."""
    wstar = np.zeros(d)
    wstar[0] = wstar_norm
    ustar = named_activation("linear", a, max(a, 1.0), a)
    return ScenarioSpec(MarginalSpec("gaussian_isotropic", d), TargetModel(wstar, ustar),
                        NoiseModel(), seed)


def repro_example(d: int = 4, a: float = 1.0, b: float = 4.0, m: int = 1_000_000,
                  wstar_norm: float = 1.0, seed: int = 0, chunk: int = 250_000) -> ProbeResult:
    """Monte-Carlo g.(w - w*) at w = w*/2 with the activation held at u(z) = b z.

    Labels are a (w*.x). The population value is -(b/2 - a)|w*|^2 / 2, which is
    negative whenever b > 2a even though w is misaligned by nothing but scale.
    """
    if not 0 < a <= b:
        raise ValueError("need 0 < a <= b")
    if m < 2:
        raise ValueError("m must be >= 2")
    scenario = example_scenario(d, a, wstar_norm, seed)
    wstar = scenario.target.wstar
    w = wstar / 2
    rng = scenario.rng(EXAMPLE_STREAM)
    # per-sample terms (b w.x - y)(x.(w - w*)), accumulated in chunks
    total = total_sq = 0.0
    done = 0
    while done < m:
        n = min(chunk, m - done)
        X = scenario.marginal.sample(n, rng)
        y = a * (X @ wstar)
        terms = (b * (X @ w) - y) * (X @ (w - wstar))
        total += float(terms.sum())
        total_sq += float(terms @ terms)
        done += n
    mean = total / m
    var = max(total_sq / m - mean * mean, 0.0) * m / (m - 1)
    se = math.sqrt(var / m)
    analytic = -(b / 2 - a) * wstar_norm**2 / 2
    res = ProbeResult("example", ("d", "a", "b", "m", "estimate", "se", "analytic", "z_score"))
    res.add(d=d, a=a, b=b, m=m, estimate=mean, se=se, analytic=analytic,
            z_score=(mean - analytic) / se if se > 0 else 0.0)
    res.metadata = dict(seed=seed)
    return res
