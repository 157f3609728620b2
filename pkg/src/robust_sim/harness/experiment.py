"""Experiment configuration, execution and file emission.

A config is one JSON object with sections ``scenario``, ``learner``, ``probes``
and an optional ``experiment`` section for run options. Unknown keys anywhere
are rejected.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from ..core import Dataset, Hypothesis, LearnerConfig, PiecewiseLinearActivation, misalignment
from ..learner import (TRACE_COLUMNS, DatasetSource, LearnResult, ScenarioSource, learn)
from ..synth import ScenarioSpec, estimate_opt, read_csv, sample_batch
from .probes import ProbeResult, probe_contraction, probe_misalignment, probe_sharpness

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2

EVAL_STREAM = 1

SUMMARY_KEYS = (
    "status", "seed", "d", "eps", "final_loss", "final_loss_se", "opt_proxy", "opt_se",
    "c_emp", "c_emp_se", "misalignment", "n_candidates", "selected", "selected_k",
    "selected_j", "selected_beta", "hypothesis", "schedule", "probes", "files",
)

PROBE_KINDS = ("sharpness", "misalignment", "contraction")
MISALIGNMENT_FAMILY = ("zero", "identity", "clipped_ramp", "planted")


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 1)."""


def _reject_unknown(data: dict, allowed, where: str) -> None:
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class ProbeSpec:
    kind: str
    angles_deg: tuple = ()
    m: int = 4096
    trials: int = 1
    fit: bool = True
    n_mc: int = 100_000
    family: tuple = MISALIGNMENT_FAMILY
    seeds: int = 20
    threshold_const: float = 96.0

    ALLOWED = {
        "sharpness": {"kind", "angles_deg", "m", "trials", "fit"},
        "misalignment": {"kind", "angles_deg", "n_mc", "family"},
        "contraction": {"kind", "seeds", "threshold_const"},
    }
    DEFAULT_ANGLES = {"sharpness": (15.0, 30.0, 60.0, 90.0),
                      "misalignment": (5.0, 15.0, 30.0, 60.0, 90.0)}

    def __post_init__(self):
        if self.m < 256 or self.trials < 1 or self.n_mc < 10_000 or self.seeds < 1:
            raise ConfigError("need m >= 256, trials >= 1, n_mc >= 10000 and seeds >= 1")
        if not isinstance(self.fit, bool):
            raise ConfigError("fit must be true or false")
        if not self.threshold_const > 0:
            raise ConfigError("threshold_const must be positive")

    @classmethod
    def from_dict(cls, data: dict) -> "ProbeSpec":
        if not isinstance(data, dict) or data.get("kind") not in PROBE_KINDS:
            raise ConfigError(f"each probe needs 'kind' in {PROBE_KINDS}")
        kind = data["kind"]
        _reject_unknown(data, cls.ALLOWED[kind], f"probes[{kind}]")
        kw = dict(data)
        kw["angles_deg"] = tuple(float(x) for x in data.get("angles_deg", cls.DEFAULT_ANGLES.get(kind, ())))
        if "family" in data:
            family = tuple(data["family"])
            bad = set(family) - set(MISALIGNMENT_FAMILY)
            if bad or not family:
                raise ConfigError(f"misalignment family must be a non-empty subset of {MISALIGNMENT_FAMILY}")
            kw["family"] = family
        return cls(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioSpec
    learner: LearnerConfig
    probes: tuple = ()
    out: Optional[str] = None
    learn: bool = True
    n_eval: int = 100_000
    n_mc_opt: int = 100_000
    data: Optional[str] = None
    workers: int = 1

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        _reject_unknown(data, {"scenario", "learner", "probes", "experiment"}, "config")
        try:
            learner = LearnerConfig.from_dict(dict(data.get("learner", {})))
            scenario = ScenarioSpec.from_dict(dict(data.get("scenario", {})), learner.a, learner.b)
            probes = data.get("probes", [])
            if not isinstance(probes, list):
                raise ConfigError("probes must be a list")
            probes = tuple(ProbeSpec.from_dict(p) for p in probes)
            exp = dict(data.get("experiment", {}))
            _reject_unknown(exp, {"out", "learn", "n_eval", "n_mc_opt", "data", "workers"},
                            "experiment")
            cfg = cls(scenario, learner, probes, **exp)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.n_eval < 1000 or cfg.n_mc_opt < 1000 or cfg.workers < 1:
            raise ConfigError("need n_eval >= 1000, n_mc_opt >= 1000 and workers >= 1")
        return cfg

    def with_overrides(self, seed: Optional[int] = None, out: Optional[str] = None,
                       workers: Optional[int] = None) -> "ExperimentConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, scenario=replace(cfg.scenario, seed=int(seed)),
                          learner=replace(cfg.learner, seed=int(seed)))
        if out is not None:
            cfg = replace(cfg, out=str(out))
        if workers is not None:
            if workers < 1:
                raise ConfigError("workers must be >= 1")
            cfg = replace(cfg, workers=int(workers))
        return cfg


def load_config(path) -> ExperimentConfig:
    """Parse a JSON config file. Raises OSError when unreadable, ConfigError when invalid."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def write_table(path: Path, columns, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def _clipped_ramp(z):
    return np.clip(z, -1.0, 1.0)


def misalignment_family(names, scenario: ScenarioSpec) -> dict:
    table = {
        "zero": lambda z: np.zeros_like(z),
        "identity": lambda z: z,
        "clipped_ramp": _clipped_ramp,
        "planted": scenario.target.ustar,
    }
    return {n: table[n] for n in names}


def run_probe(spec: ProbeSpec, cfg: ExperimentConfig) -> ProbeResult:
    scenario, learner = cfg.scenario, cfg.learner
    if spec.kind == "sharpness":
        fixed = None if spec.fit else PiecewiseLinearActivation.linear(learner.b, learner.a, learner.b)
        return probe_sharpness(scenario, np.radians(spec.angles_deg), spec.m, learner.a,
                               learner.b, spec.trials, fixed)
    if spec.kind == "misalignment":
        return probe_misalignment(scenario, misalignment_family(spec.family, scenario),
                                  np.radians(spec.angles_deg), spec.n_mc)
    return probe_contraction(scenario, learner, spec.seeds, spec.threshold_const,
                             cfg.n_mc_opt, cfg.workers)


def _schedule(c: LearnerConfig) -> dict:
    return dict(mu=c.mu_value, eta_init=c.eta_init_value, eta_opt=c.eta_opt_value, t0=c.t0,
                T=c.T, J=min(c.J_cap, c.J_uncapped), J_uncapped=c.J_uncapped,
                label_cap=c.label_cap, test_radius=c.test_radius)


def approximation_factor(loss: float, loss_se: float, eps: float, opt: float, opt_se: float):
    """C_emp = (loss - eps) / OPT_proxy with a delta-method standard error; None if OPT_proxy = 0."""
    if not opt > 0:
        return None, None
    c = (loss - eps) / opt
    se = math.sqrt((loss_se / opt) ** 2 + ((loss - eps) * opt_se / opt**2) ** 2)
    return c, se


def _loss_with_se(h: Hypothesis, data: Dataset) -> tuple[float, float]:
    sq = (h.predict(data.X) - data.y) ** 2
    return float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(sq.size))


def run_learning(cfg: ExperimentConfig) -> tuple[LearnResult, dict]:
    """Run learn on the scenario (or a CSV dataset) and evaluate the selected hypothesis."""
    if cfg.data is not None:
        data = read_csv(cfg.data)
        source = DatasetSource(data, cfg.learner.seed)
        wstar = None
        eval_set = data
        opt = opt_se = None
    else:
        source = ScenarioSource(cfg.scenario)
        wstar = cfg.scenario.target.wstar
        eval_set = sample_batch(cfg.scenario, cfg.n_eval, EVAL_STREAM)
        opt, opt_se = estimate_opt(cfg.scenario, cfg.n_mc_opt)
    result = learn(cfg.learner, source, wstar=wstar, workers=cfg.workers)
    h = result.hypothesis
    loss, loss_se = _loss_with_se(h, eval_set)
    c_emp, c_se = (None, None) if opt is None else approximation_factor(
        loss, loss_se, cfg.learner.eps, opt, opt_se)
    cands = result.candidates
    sel = cands[cands.selected]
    info = dict(final_loss=loss, final_loss_se=loss_se, opt_proxy=opt, opt_se=opt_se,
                c_emp=c_emp, c_emp_se=c_se,
                misalignment=None if wstar is None else misalignment(wstar, h.w),
                n_candidates=len(cands), selected=cands.selected, selected_k=sel.k,
                selected_j=sel.j, selected_beta=sel.beta, hypothesis=h.to_dict())
    return result, info


def _write_learning(out: Path, result: LearnResult) -> List[str]:
    cands = result.candidates
    rows = [(i, c.k, c.j, c.beta, c.hypothesis.norm, float(cands.test_losses[i]),
             int(i == cands.selected)) for i, c in enumerate(cands)]
    write_table(out / "candidates.csv",
                ("index", "k", "j", "beta", "w_norm", "test_loss", "selected"), rows)
    write_table(out / "trace.csv", TRACE_COLUMNS, result.trace.rows())
    (out / "hypothesis.json").write_text(json.dumps(result.hypothesis.to_dict(), indent=2) + "\n")
    return ["candidates.csv", "trace.csv", "hypothesis.json"]


def jsonable(obj):
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def run_experiment(cfg: ExperimentConfig, out=None) -> dict:
    """Run learn (if enabled) and every configured probe; write tables and summary.json.

    Returns the summary. Raises OSError on I/O failure. No timestamps are
    written, so reruns with the same seed reproduce every file byte for byte.
    """
    out = Path(out if out is not None else (cfg.out or "results"))
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: None for k in SUMMARY_KEYS}
    summary.update(status="ok", seed=cfg.scenario.seed, d=cfg.scenario.d, eps=cfg.learner.eps,
                   schedule=_schedule(cfg.learner), probes=[], files=[])
    if cfg.learn:
        result, info = run_learning(cfg)
        summary.update(info)
        summary["files"] += _write_learning(out, result)
    counts = {}
    for spec in cfg.probes:
        res = run_probe(spec, cfg)
        counts[spec.kind] = counts.get(spec.kind, 0) + 1
        suffix = "" if counts[spec.kind] == 1 else f"_{counts[spec.kind]}"
        name = f"probe_{spec.kind}{suffix}.csv"
        write_table(out / name, res.columns, res.rows)
        summary["files"].append(name)
        summary["probes"].append(dict(kind=spec.kind, file=name, rows=len(res), **res.metadata))
    summary["files"].append("summary.json")
    (out / "summary.json").write_text(json.dumps(jsonable(summary), indent=2, sort_keys=True) + "\n")
    return summary
