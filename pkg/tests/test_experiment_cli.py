import csv
import json

import numpy as np
import pytest

from robust_sim.core import Hypothesis, l2_loss
from robust_sim.harness import ConfigError, ExperimentConfig, load_config, run_experiment
from robust_sim.harness.cli import main
from robust_sim.harness.experiment import (SUMMARY_KEYS, ProbeSpec, approximation_factor,
                                           write_table)
from robust_sim.synth import read_csv

TINY = {
    "scenario": {"marginal": {"kind": "gaussian_isotropic", "d": 5},
                 "target": {"wstar_norm": 1.0, "activation": {"kind": "relu"}},
                 "noise": {"kind": "zero_out", "p": 0.1}, "seed": 3},
    "learner": {"a": 0.5, "b": 1.0, "t0_cap": 3, "T_cap": 8, "J_cap": 3, "m_batch": 512,
                "m_test": 1024, "m_init": 512},
    "probes": [{"kind": "sharpness", "trials": 2, "m": 512},
               {"kind": "misalignment", "n_mc": 10000},
               {"kind": "contraction", "seeds": 2, "threshold_const": 0.5}],
    "experiment": {"n_eval": 2000, "n_mc_opt": 2000},
}


@pytest.fixture
def tiny_path(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def _csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults_parse(self):
        cfg = ExperimentConfig.from_dict({})
        assert cfg.learn and cfg.probes == ()

    @pytest.mark.parametrize("path", [(), ("scenario",), ("learner",), ("experiment",),
                                      ("scenario", "noise"), ("scenario", "marginal")])
    def test_unknown_keys_rejected(self, path):
        data = json.loads(json.dumps(TINY))
        node = data
        for key in path:
            node = node[key]
        node["bogus"] = 1
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_unknown_probe_key_rejected(self):
        with pytest.raises(ConfigError):
            ProbeSpec.from_dict({"kind": "contraction", "angles_deg": [10]})

    @pytest.mark.parametrize("probe", [{"kind": "nope"}, {"kind": "sharpness", "m": 10},
                                       {"kind": "misalignment", "family": ["cubic"]},
                                       {"kind": "contraction", "threshold_const": 0}])
    def test_bad_probe(self, probe):
        with pytest.raises(ConfigError):
            ProbeSpec.from_dict(probe)

    def test_invalid_values_are_config_errors(self):
        data = json.loads(json.dumps(TINY))
        data["learner"]["a"] = 2.0
        with pytest.raises(ConfigError):
            ExperimentConfig.from_dict(data)

    def test_load_errors(self, tmp_path):
        with pytest.raises(OSError):
            load_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(bad)

    def test_seed_override_reaches_both(self):
        cfg = ExperimentConfig.from_dict(TINY).with_overrides(seed=11)
        assert cfg.scenario.seed == 11 and cfg.learner.seed == 11


def test_approximation_factor():
    assert approximation_factor(0.5, 0.01, 0.1, 0.0, 0.0) == (None, None)
    c, se = approximation_factor(0.3, 0.0, 0.1, 0.1, 0.0)
    assert c == pytest.approx(2.0) and se == 0.0


def test_write_table_precision(tmp_path):
    x = 0.1 + 0.2
    write_table(tmp_path / "t.csv", ("a", "b"), [(1, x)])
    rows = _csv_rows(tmp_path / "t.csv")
    assert rows[0] == ["a", "b"] and float(rows[1][1]) == x


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    cfg = ExperimentConfig.from_dict(TINY)
    a = tmp_path_factory.mktemp("a")
    b = tmp_path_factory.mktemp("b")
    return run_experiment(cfg, a), a, b, cfg


class TestRunExperiment:
    def test_summary_keys(self, runs):
        summary, out, _, _ = runs
        on_disk = json.loads((out / "summary.json").read_text())
        assert set(on_disk) == set(SUMMARY_KEYS)
        assert on_disk["status"] == "ok"
        assert on_disk["n_candidates"] == len(_csv_rows(out / "candidates.csv")) - 1
        assert len(on_disk["probes"]) == 3

    def test_files_listed_and_rectangular(self, runs):
        summary, out, _, _ = runs
        for name in summary["files"]:
            assert (out / name).exists()
            if name.endswith(".csv"):
                rows = _csv_rows(out / name)
                assert len(rows) >= 2
                assert len({len(r) for r in rows}) == 1
                assert all(c != "" and c.lower() != "nan" for r in rows for c in r)

    def test_rerun_is_byte_identical(self, runs):
        summary, out, other, cfg = runs
        run_experiment(cfg, other)
        for name in summary["files"]:
            assert (out / name).read_bytes() == (other / name).read_bytes(), name

    def test_hypothesis_reloads(self, runs):
        summary, out, _, _ = runs
        h = Hypothesis.from_dict(json.loads((out / "hypothesis.json").read_text()))
        np.testing.assert_allclose(h.w, summary["hypothesis"]["w"])

    def test_selected_row_flagged(self, runs):
        summary, out, _, _ = runs
        rows = _csv_rows(out / "candidates.csv")
        flagged = [int(r[0]) for r in rows[1:] if r[-1] == "1"]
        assert flagged == [summary["selected"]]


class TestCli:
    def test_gen_fit_eval_roundtrip(self, tiny_path, tmp_path, capsys):
        out = tmp_path / "o"
        assert main(["gen", "--config", str(tiny_path), "--m", "300", "--out", str(out)]) == 0
        data = read_csv(out / "dataset.csv")
        assert data.X.shape == (300, 5)
        w = ",".join(["1", "0", "0", "0", "0"])
        assert main(["fit", "--config", str(tiny_path), "--data", str(out / "dataset.csv"),
                     "--w", w, "--out", str(out)]) == 0
        capsys.readouterr()
        assert main(["eval", "--hypothesis", str(out / "hypothesis.json"),
                     "--data", str(out / "dataset.csv")]) == 0
        reported = json.loads(capsys.readouterr().out)
        h = Hypothesis.from_dict(json.loads((out / "hypothesis.json").read_text()))
        assert reported["loss"] == pytest.approx(l2_loss(h, data))

    def test_gen_is_reproducible(self, tiny_path, tmp_path):
        for d in ("x", "y"):
            main(["gen", "--config", str(tiny_path), "--m", "50", "--seed", "4",
                  "--out", str(tmp_path / d)])
        assert ((tmp_path / "x" / "dataset.csv").read_bytes()
                == (tmp_path / "y" / "dataset.csv").read_bytes())

    def test_train_writes_summary(self, tiny_path, tmp_path):
        out = tmp_path / "t"
        assert main(["train", "--config", str(tiny_path), "--out", str(out)]) == 0
        assert set(json.loads((out / "summary.json").read_text())) == set(SUMMARY_KEYS)

    def test_train_on_csv(self, tiny_path, tmp_path):
        out = tmp_path / "t"
        main(["gen", "--config", str(tiny_path), "--m", "2000", "--out", str(out)])
        assert main(["train", "--config", str(tiny_path), "--data", str(out / "dataset.csv"),
                     "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["opt_proxy"] is None and summary["c_emp"] is None

    @pytest.mark.parametrize("kind", ["sharpness", "misalignment", "contraction"])
    def test_probe(self, tiny_path, tmp_path, kind):
        out = tmp_path / kind
        assert main(["probe", kind, "--config", str(tiny_path), "--out", str(out)]) == 0
        rows = _csv_rows(out / f"probe_{kind}.csv")
        assert len(rows) > 1 and len({len(r) for r in rows}) == 1
        assert json.loads((out / f"probe_{kind}.json").read_text())["kind"] == kind

    def test_repro_example(self, tmp_path, capsys):
        assert main(["repro-example", "--m", "20000", "--out", str(tmp_path)]) == 0
        row = json.loads(capsys.readouterr().out)
        assert row["analytic"] == pytest.approx(-0.5)
        assert (tmp_path / "example.csv").exists()

    def test_unknown_key_exit_1(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"scenario": {"colour": 1}}))
        assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == 1

    def test_bad_arguments_exit_1(self, tmp_path):
        assert main(["probe", "nonsense"]) == 1
        assert main(["gen", "--m", "0", "--out", str(tmp_path)]) == 1
        assert main(["repro-example", "--a", "3", "--b", "1", "--out", str(tmp_path)]) == 1

    def test_dimension_mismatch_exit_1(self, tiny_path, tmp_path):
        main(["gen", "--config", str(tiny_path), "--m", "20", "--out", str(tmp_path)])
        assert main(["fit", "--data", str(tmp_path / "dataset.csv"), "--w", "1,0",
                     "--out", str(tmp_path)]) == 1

    def test_missing_files_exit_2(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2
        assert main(["eval", "--hypothesis", str(tmp_path / "h.json"),
                     "--data", str(tmp_path / "d.csv")]) == 2

    def test_unwritable_out_exit_2(self, tiny_path, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["gen", "--config", str(tiny_path), "--m", "5",
                     "--out", str(blocker / "sub")]) == 2
