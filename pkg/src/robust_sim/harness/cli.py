"""Command-line entry point: ``robust-sim <command> [options]``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..core import Hypothesis, l2_loss
from ..monotone_fit import fit_activation_full
from ..synth import read_csv, sample_batch, write_csv
from .experiment import (EXIT_CONFIG, EXIT_IO, EXIT_OK, PROBE_KINDS, ConfigError,
                         ExperimentConfig, ProbeSpec, load_config, run_experiment, run_probe,
                         jsonable, write_table)
from .probes import repro_example


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON config with scenario/learner/probes sections")
    p.add_argument("--seed", type=int, help="overrides scenario and learner seeds")
    p.add_argument("--out", help="output directory (default: results)")
    p.add_argument("--workers", type=int, help="worker processes for independent tasks")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="robust-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write a dataset CSV drawn from the scenario")
    p.add_argument("--m", type=int, default=1000)
    p.add_argument("--stream", type=int, default=0, help="sample stream id")

    p = sub.add_parser("fit", parents=[common], help="fit the activation for a fixed w on a CSV")
    p.add_argument("--data", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--w", help="comma-separated weight vector")
    g.add_argument("--hypothesis", help="hypothesis JSON whose w is used")

    p = sub.add_parser("train", parents=[common], help="run learn plus configured probes")
    p.add_argument("--data", help="train on a CSV (bootstrap batches) instead of the scenario")

    p = sub.add_parser("probe", parents=[common], help="run one kind of structural probe")
    p.add_argument("kind", choices=PROBE_KINDS)

    p = sub.add_parser("eval", parents=[common], help="squared loss of a stored hypothesis on a CSV")
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("repro-example", parents=[common],
                       help="Monte-Carlo check that a fixed activation misleads the gradient")
    p.add_argument("--m", type=int, default=1_000_000)
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--a", type=float, default=1.0)
    p.add_argument("--b", type=float, default=4.0)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig.from_dict({})
    return cfg.with_overrides(args.seed, args.out, args.workers)


def _out_dir(args, cfg: Optional[ExperimentConfig] = None) -> Path:
    out = Path(args.out or (cfg.out if cfg and cfg.out else "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def cmd_gen(args) -> int:
    cfg = _config(args)
    if args.m < 1:
        raise ConfigError("--m must be >= 1")
    path = _out_dir(args, cfg) / "dataset.csv"
    write_csv(sample_batch(cfg.scenario, args.m, args.stream), path)
    print(path)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args)
    data = read_csv(args.data)
    if args.w is not None:
        try:
            w = np.array([float(t) for t in args.w.split(",")])
        except ValueError as exc:
            raise ConfigError(f"--w: {exc}") from exc
    else:
        w = Hypothesis.from_dict(json.loads(Path(args.hypothesis).read_text())).w
    if w.size != data.d:
        raise ConfigError(f"--w has {w.size} entries but the data has d = {data.d}")
    a, b = cfg.learner.a, cfg.learner.b
    fit = fit_activation_full(data.X @ w, data.y, a, b)
    h = Hypothesis(w, fit.activation)
    out = _out_dir(args, cfg)
    _write_json(out / "hypothesis.json", h.to_dict())
    print(json.dumps({"objective": fit.objective, "loss": fit.objective / data.m,
                      "kkt_residual": fit.kkt_residual, "knots": int(fit.activation.n)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.data is not None:
        cfg = replace(cfg, data=args.data)
    summary = run_experiment(cfg, _out_dir(args, cfg))
    keys = ("final_loss", "opt_proxy", "c_emp", "misalignment", "selected_beta")
    print(json.dumps({k: summary[k] for k in keys}))
    return EXIT_OK


def cmd_probe(args) -> int:
    cfg = _config(args)
    specs = [s for s in cfg.probes if s.kind == args.kind] or [ProbeSpec.from_dict({"kind": args.kind})]
    out = _out_dir(args, cfg)
    for i, spec in enumerate(specs):
        res = run_probe(spec, cfg)
        stem = f"probe_{spec.kind}" + ("" if i == 0 else f"_{i + 1}")
        write_table(out / f"{stem}.csv", res.columns, res.rows)
        _write_json(out / f"{stem}.json", dict(kind=spec.kind, rows=len(res), **res.metadata))
        print(out / f"{stem}.csv")
    return EXIT_OK


def cmd_eval(args) -> int:
    h = Hypothesis.from_dict(json.loads(Path(args.hypothesis).read_text()))
    data = read_csv(args.data)
    if h.w.size != data.d:
        raise ConfigError(f"hypothesis dimension {h.w.size} != data dimension {data.d}")
    result = {"loss": l2_loss(h, data), "m": data.m}
    if args.out:
        _write_json(_out_dir(args) / "eval.json", result)
    print(json.dumps(result))
    return EXIT_OK


def cmd_repro_example(args) -> int:
    seed = args.seed if args.seed is not None else 0
    try:
        res = repro_example(d=args.d, a=args.a, b=args.b, m=args.m, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    write_table(out / "example.csv", res.columns, res.rows)
    print(json.dumps(dict(zip(res.columns, res.rows[0]))))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "train": cmd_train, "probe": cmd_probe,
            "eval": cmd_eval, "repro-example": cmd_repro_example}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # malformed CSV or hypothesis contents
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
