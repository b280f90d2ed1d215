import json
import math

import numpy as np
import pytest

from pncuq.cli import main
from pncuq.data import SyntheticSpec, generate_synthetic, save_csv
from pncuq.harness import (
    ConfigError, CoverageReport, ExperimentConfig, LevelSummary, RepetitionFailed, load_config,
    preset_learning_rate, repetition_data, run_coverage, run_mse, summarize_level, table_csv, validate_report,
)
from pncuq.inference import ConfidenceInterval, Method
from pncuq.network import NetConfig, TrainConfig, forward
from pncuq.pnc import MeanInitSpec, deep_ensemble, fit_pnc
from pncuq.rng import RngStream

TINY = {
    "data": {"synthetic": {"family": "SinSum", "dim": 2}},
    "n": 16,
    "network": {"width_factor": 2},
    "train": {"learning_rate": 12.0, "epochs": 20},
    "repetitions": 2,
}


def tiny(**over) -> ExperimentConfig:
    return ExperimentConfig.from_dict({**TINY, **over})


def write(tmp_path, name, obj) -> str:
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


class TestConfig:
    def test_defaults(self):
        cfg = ExperimentConfig()
        assert cfg.n == 128 and cfg.x0 == (0.1, 0.1) and cfg.levels == (0.95, 0.90)
        assert cfg.train.learning_rate == 12.0 and cfg.train.ridge == 1e-10
        assert cfg.y0 == pytest.approx(2 * math.sin(0.1), rel=1e-15)

    def test_presets(self):
        assert [preset_learning_rate(d) for d in (2, 4, 8, 16)] == [12.0, 6.0, 3.0, 1.5]
        assert preset_learning_rate(3) == 8.0

    def test_round_trip(self):
        cfg = tiny(method={"name": "cheap_bootstrap", "R": 2}, levels=[0.8], master_seed=5)
        assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("raw,where", [
        ({"n": 0}, "n"),
        ({"levels": [1.0]}, "levels/0"),
        ({"method": {"name": "jackknife"}}, "method/name"),
        ({"typo": 1}, "<root>"),
        ({"train": {"learning_rate": -1}}, "train/learning_rate"),
        ({"data": {"synthetic": {"family": "SinSum"}}}, "data"),
    ])
    def test_validation_errors(self, raw, where):
        with pytest.raises(ConfigError, match=f"at {where}"):
            ExperimentConfig.from_dict(raw)

    def test_x0_dimension(self):
        with pytest.raises(ConfigError, match="x0 has 3 entries"):
            ExperimentConfig.from_dict({"x0": [0.1, 0.1, 0.1]})

    def test_missing_and_broken_files(self, tmp_path):
        with pytest.raises(ConfigError, match="config file not found: .*nope.json"):
            load_config(tmp_path / "nope.json")
        (tmp_path / "bad.json").write_text("{")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_config(tmp_path / "bad.json")

    def test_csv_source(self, tmp_path):
        base = generate_synthetic(SyntheticSpec(dim=3), 12, RngStream(1))
        save_csv(base, tmp_path / "d.csv")
        cfg = ExperimentConfig.from_dict({"data": {"csv": str(tmp_path / "d.csv"), "noise_sd": 0.01, "y0": 0.3}})
        assert cfg.d == 3 and cfg.n == 12 and cfg.y0 == 0.3 and cfg.x0 == (0.1,) * 3
        a, b = repetition_data(cfg, 0), repetition_data(cfg, 1)
        np.testing.assert_array_equal(a.inputs, base.inputs)
        assert not np.array_equal(a.responses, b.responses)
        with pytest.raises(ConfigError, match="has 12 rows"):
            ExperimentConfig.from_dict({"data": {"csv": str(tmp_path / "d.csv"), "noise_sd": 0.01, "y0": 0.3},
                                        "n": 10})


class TestCoverage:
    def test_two_repetitions(self):
        rep = run_coverage(tiny())
        assert len(rep.intervals) == 2 and all(len(r) == 2 for r in rep.intervals)
        s = rep.summary(0.95)
        assert 0 <= s.coverage <= 1 and s.mean_width >= 0
        assert s.cp_lower <= s.coverage <= s.cp_upper

    @pytest.mark.parametrize("method", ["batching", "cheap_bootstrap", "ij"])
    def test_byte_identical_reports(self, method):
        cfg = tiny(method={"name": method, "R": 2})
        a, b = run_coverage(cfg).to_json(), run_coverage(cfg).to_json()
        assert a == b
        d = json.loads(a)
        assert d["config"] == cfg.to_dict() and d["build"]
        assert "seconds" not in d

    def test_workers_do_not_change_results(self):
        a = run_coverage(tiny(repetitions=3)).to_dict()
        b = run_coverage(tiny(repetitions=3, workers=2)).to_dict()
        assert a["repetitions"] == b["repetitions"]

    def test_repetitions_are_independent_units(self):
        """Repetition j gives the same interval whether or not others ran first."""
        full = run_coverage(tiny(repetitions=3))
        from pncuq.harness import run_repetition

        alone, _ = run_repetition(tiny(repetitions=3), 2)
        assert alone == list(full.intervals[2])

    def test_timings_opt_in(self):
        d = json.loads(run_coverage(tiny()).to_json(with_timings=True))
        assert len(d["seconds"]) == 2

    def test_failure_carries_partial_report(self):
        cfg = tiny(train={"learning_rate": 1e6, "epochs": 20})
        with pytest.raises(RepetitionFailed, match="repetition 0") as info:
            run_coverage(cfg)
        assert info.value.partial is None

    def test_table(self):
        rows = run_coverage(tiny()).table_rows()
        text = table_csv(rows)
        assert text.splitlines()[0] == "method,d,n,CR95,IW95,CR90,IW90,MP"


class TestSummaries:
    def ci(self, c, h=0.01):
        return ConfidenceInterval(c, h, 0.95, Method.BATCHING, 3, h, 4)

    def test_counts(self):
        s = summarize_level([self.ci(0.2), self.ci(0.3), self.ci(0.205)], 0.2, 0.95)
        assert s.hits == 2 and s.coverage == pytest.approx(2 / 3)
        assert s.mean_width == pytest.approx(0.02)
        assert s.mean_midpoint == pytest.approx((0.2 + 0.3 + 0.205) / 3)
        assert isinstance(s, LevelSummary)

    def test_validator_rejects_inconsistent_band(self):
        rep = run_coverage(tiny())
        d = rep.to_dict()
        d["summary"][0]["CR_clopper_pearson"] = [0.0, 0.0]
        d["summary"][0]["CR"] = 0.5
        with pytest.raises(Exception, match="Clopper-Pearson"):
            validate_report(d)
        d["summary"][0]["CR"] = 1.5
        with pytest.raises(Exception):
            validate_report(d)


class TestMse:
    def cfg(self, **mse):
        return tiny(mse={"seeds": 2, "test_size": 64, **mse})

    def test_report(self):
        rep = run_mse(self.cfg())
        assert set(rep.values) == {"single", "PNC", "ensemble(2)", "ensemble(5)"}
        assert all(len(v) == 2 for v in rep.values.values())
        d = json.loads(rep.to_json())
        assert d["methods"]["PNC"]["mean"] == rep.mean("PNC")
        assert table_csv(rep.table_rows()).splitlines()[0] == "method,d,n,MSE_mean,MSE_sd"

    def test_deterministic(self):
        assert run_mse(self.cfg()).to_json() == run_mse(self.cfg()).to_json()

    def test_needs_synthetic(self, tmp_path):
        save_csv(generate_synthetic(SyntheticSpec(), 16, RngStream(1)), tmp_path / "d.csv")
        cfg = ExperimentConfig.from_dict({"data": {"csv": str(tmp_path / "d.csv"), "noise_sd": 0.01, "y0": 0.2},
                                          "mse": {"seeds": 1}})
        with pytest.raises(ConfigError):
            run_mse(cfg)

    def test_two_net_methods_cost_the_same(self):
        """ensemble(2) and PNC both train two networks; their training times agree within 25%."""
        cfg = ExperimentConfig.from_dict({"n": 64, "train": {"epochs": 200},
                                          "mse": {"seeds": 3, "test_size": 64, "ensemble_sizes": [2]}})
        rep = run_mse(cfg)
        pnc, ens = sum(rep.seconds["PNC"]), sum(rep.seconds["ensemble(2)"])
        assert abs(pnc - ens) <= 0.25 * ens


class TestConstantLabels:
    CFG = NetConfig.for_sample_size(2, 128)
    TRAIN = TrainConfig(12.0, 500, ridge=1e-10)

    def test_zero_labels_pnc_is_exact(self):
        spec = SyntheticSpec(dim=2, noise_sd=0.0)
        train = generate_synthetic(spec, 128, RngStream(81)).with_responses(np.zeros(128))
        test = generate_synthetic(spec, 512, RngStream(82)).inputs
        p = fit_pnc(train, self.CFG, self.TRAIN, MeanInitSpec(), RngStream(83))
        assert np.mean(p(test) ** 2) == 0.0

    @pytest.mark.xfail(strict=True, reason="a bias-free ReLU network is 1-homogeneous and cannot fit a "
                                           "nonzero constant; test MSE stays near 0.027")
    def test_nonzero_constant_fit(self):
        spec = SyntheticSpec(dim=2, noise_sd=0.0)
        train = generate_synthetic(spec, 128, RngStream(84)).with_responses(np.full(128, 0.5))
        test = generate_synthetic(spec, 512, RngStream(85)).inputs
        p = fit_pnc(train, self.CFG, self.TRAIN, MeanInitSpec(), RngStream(86))
        ens = deep_ensemble(train, self.CFG, self.TRAIN, 2, RngStream(86), members=(p.base,))
        for pred in (forward(p.base, test), p(test), ens(test)):
            assert np.mean((pred - 0.5) ** 2) < 1e-6


class TestCli:
    def test_missing_config(self, tmp_path, capsys):
        path = tmp_path / "absent.json"
        assert main(["coverage", "--config", str(path)]) == 1
        assert str(path) in capsys.readouterr().err

    def test_invalid_config(self, tmp_path, capsys):
        assert main(["pnc", "--config", write(tmp_path, "c.json", {"n": -3})]) == 1
        assert "invalid config" in capsys.readouterr().err

    def test_negative_seed(self, tmp_path):
        assert main(["pnc", "--config", write(tmp_path, "c.json", TINY), "--seed", "-1"]) == 1

    def test_numerical_failure(self, tmp_path):
        bad = {**TINY, "train": {"learning_rate": 1e6, "epochs": 20}}
        assert main(["coverage", "--config", write(tmp_path, "c.json", bad), "--out", str(tmp_path / "r.json")]) == 2
        assert main(["ci-batch", "--config", write(tmp_path, "c.json", bad)]) == 2

    def test_coverage_twice_identical(self, tmp_path):
        c = write(tmp_path, "c.json", TINY)
        outs = []
        for i in range(2):
            out = tmp_path / f"r{i}.json"
            assert main(["coverage", "--config", c, "--out", str(out), "--seed", "42",
                         "--table", str(tmp_path / "t.csv")]) == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert json.loads(outs[0])["config"]["master_seed"] == 42
        assert (tmp_path / "t.csv").read_text().startswith("method,d,n,CR95")

    def test_seed_changes_result(self, tmp_path):
        c = write(tmp_path, "c.json", TINY)
        for s in ("1", "2"):
            assert main(["ci-batch", "--config", c, "--out", str(tmp_path / f"{s}.json"), "--seed", s]) == 0
        assert (tmp_path / "1.json").read_text() != (tmp_path / "2.json").read_text()

    @pytest.mark.parametrize("cmd", ["train", "pnc", "ci-batch", "ci-boot", "ci-ij"])
    def test_single_shot_commands(self, tmp_path, cmd):
        out = tmp_path / "o.json"
        argv = [cmd, "--config", write(tmp_path, "c.json", {**TINY, "method": {"name": "batching", "R": 1}}),
                "--out", str(out)]
        if cmd == "train":
            argv += ["--checkpoint", str(tmp_path / "n.npz"), "--loss-csv", str(tmp_path / "l.csv")]
        assert main(argv) == 0
        d = json.loads(out.read_text())
        assert d["target"] == pytest.approx(2 * math.sin(0.1))
        if cmd.startswith("ci-"):
            assert [ci["level"] for ci in d["intervals"]] == [0.95, 0.9]
        if cmd == "train":
            assert (tmp_path / "n.npz").exists() and len((tmp_path / "l.csv").read_text().splitlines()) == 21
        if cmd == "pnc":
            assert d["pnc"] == pytest.approx(d["base"] - d["auxiliary"])

    def test_mse_bench(self, tmp_path):
        cfg = {**TINY, "mse": {"seeds": 1, "test_size": 32, "ensemble_sizes": [2]}}
        out = tmp_path / "m.json"
        assert main(["mse-bench", "--config", write(tmp_path, "c.json", cfg), "--out", str(out), "--timings"]) == 0
        d = json.loads(out.read_text())
        assert set(d["methods"]) == {"single", "PNC", "ensemble(2)"} and "seconds" in d

    def test_selfcheck_quick(self, capsys):
        assert main(["selfcheck", "--quick"]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 3 and all(l.startswith("PASS") for l in lines)
