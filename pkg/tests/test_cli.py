import json
import math
import os

import numpy as np
import pytest

from flowcorr import flowmodel as fm
from flowcorr.cli import main, read_delays, read_plan, read_trace, read_values, write_trace
from flowcorr.errors import MonotonicityError, ParseError


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


class TestTraceIo:
    def test_read_trace(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("# comment\n0\n0.02\n0.05\n")
        trace = read_trace(str(path))
        assert np.allclose(trace.timestamps, [0.0, 0.02, 0.05])

    def test_monotonicity_error_with_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0\n0\n")
        with pytest.raises(MonotonicityError) as err:
            read_trace(str(path))
        assert err.value.line == 2

    def test_garbage_line_reported(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("0\nbogus\n")
        with pytest.raises(ParseError) as err:
            read_trace(str(path))
        assert err.value.line == 2

    def test_delays_need_period_header(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("0.06\n0.07\n")
        with pytest.raises(ParseError) as err:
            read_delays(str(path))
        assert err.value.line == 1

    def test_read_delays(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("period=0.05\n0.06\n0.07\n")
        trace = read_delays(str(path))
        assert trace.sample_period == 0.05
        assert np.allclose(trace.samples, [0.06, 0.07])

    def test_canonical_round_trip(self, tmp_path):
        trace = fm.FlowTrace([0.0, 0.123456789, 1.5])
        path = tmp_path / "t.txt"
        write_trace(trace, str(path))
        first = path.read_bytes()
        write_trace(read_trace(str(path)), str(path))
        assert path.read_bytes() == first

    def test_read_values_rejects_empty(self, tmp_path):
        path = tmp_path / "v.txt"
        path.write_text("# nothing\n")
        with pytest.raises(ParseError):
            read_values(str(path))


class TestFitCommand:
    def test_fit_laplace_json(self, tmp_path, capsys):
        rng = np.random.default_rng(3)
        data = fm.sample(fm.DistSpec.laplace(0.01, 0.004), 5000, rng)
        path = tmp_path / "pdv.txt"
        path.write_text("".join(f"{v:.9f}\n" for v in data))
        code, out, _ = run_cli(capsys, "fit", "--family", "laplace", "--data", str(path))
        assert code == 0
        payload = json.loads(out)
        assert payload["family"] == "laplace"
        assert abs(payload["mu"] - 0.01) < 0.002
        assert abs(payload["sigma"] - 0.004) < 0.001
        assert payload["jsd_sqrt"] >= 0.0
        assert payload["version"]

    def test_fit_pareto_with_fixed_xm(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        data = 0.01 * rng.random(5000) ** (-1 / 0.86)
        path = tmp_path / "ipd.txt"
        path.write_text("".join(f"{v:.9f}\n" for v in data))
        code, out, _ = run_cli(
            capsys, "fit", "--family", "pareto", "--data", str(path), "--xm-fixed", "0.01"
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["params"]["x_m"] == 0.01
        assert abs(payload["params"]["alpha"] - 0.86) < 0.05


class TestSimulateCommand:
    def test_simulate_writes_trace(self, tmp_path, capsys):
        out_path = tmp_path / "flow.txt"
        code, out, _ = run_cli(
            capsys,
            "simulate",
            "--length", "21",
            "--seed", "42",
            "--out", str(out_path),
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["seed"] == 42
        trace = read_trace(str(out_path))
        assert len(trace) == 21

    def test_simulate_reproducible(self, tmp_path, capsys):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        run_cli(capsys, "simulate", "--seed", "7", "--out", str(a))
        run_cli(capsys, "simulate", "--seed", "7", "--out", str(b))
        assert a.read_bytes() == b.read_bytes()

    def test_simulate_with_attack_and_watermark(self, tmp_path, capsys):
        out_path = tmp_path / "flow.txt"
        creator_path = tmp_path / "creator.txt"
        code, out, _ = run_cli(
            capsys,
            "simulate",
            "--length", "51",
            "--attack", "attack5a",
            "--watermark", "0.002:9",
            "--seed", "1",
            "--out", str(out_path),
            "--creator-out", str(creator_path),
        )
        assert code == 0
        assert read_trace(str(creator_path)).timestamps[0] >= 0.0
        read_trace(str(out_path))

    def test_seed_env_fallback(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("FLOWCORR_SEED", "123")
        out_path = tmp_path / "flow.txt"
        code, out, _ = run_cli(capsys, "simulate", "--out", str(out_path))
        assert code == 0
        assert json.loads(out)["seed"] == 123


class TestCorrelateCommand:
    def test_identical_traces_score_linked(self, tmp_path, capsys):
        rng = np.random.default_rng(11)
        ipds = 0.01 * (1 + rng.pareto(0.86, 20))
        trace = fm.FlowTrace(np.concatenate(([0.0], np.cumsum(ipds))))
        path = tmp_path / "flow.txt"
        write_trace(trace, str(path))
        code, out, _ = run_cli(
            capsys,
            "correlate",
            "--creator", str(path),
            "--detector", str(path),
            "--rho-grid", "0:0.01:0.001",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["decision"] == "H1"
        assert payload["log_lambda"] > 20.0
        assert payload["rho_star"] == 0.0
        assert payload["matched"] == 21

    def test_shifted_traces_recover_delay(self, tmp_path, capsys):
        rng = np.random.default_rng(13)
        ipds = 0.01 * (1 + rng.pareto(0.86, 20))
        x = fm.FlowTrace(np.concatenate(([0.0], np.cumsum(ipds))))
        y = fm.FlowTrace(x.timestamps + 0.063)
        xp, yp = tmp_path / "x.txt", tmp_path / "y.txt"
        write_trace(x, str(xp))
        write_trace(y, str(yp))
        code, out, _ = run_cli(
            capsys, "correlate", "--creator", str(xp), "--detector", str(yp)
        )
        payload = json.loads(out)
        assert code == 0
        assert abs(payload["rho_star"] - 0.063) <= 0.001

    def test_missing_file_is_runtime_error(self, tmp_path, capsys):
        code, out, err = run_cli(
            capsys,
            "correlate",
            "--creator", str(tmp_path / "nope.txt"),
            "--detector", str(tmp_path / "nope.txt"),
        )
        assert code == 1
        assert json.loads(err)["error"]


class TestUsageErrors:
    def test_unknown_flag_exits_2(self, capsys):
        code, _, _ = run_cli(capsys, "simulate", "--bogus", "1", "--out", "x")
        assert code == 2

    def test_unknown_subcommand_exits_2(self, capsys):
        code, _, _ = run_cli(capsys, "frobnicate")
        assert code == 2


class TestBenchCommand:
    def test_plan_file_round_trip(self, tmp_path):
        plan_path = tmp_path / "plan.cfg"
        plan_path.write_text(
            "# tiny smoke plan\n"
            "trials = 100\n"
            "flow_length = 3\n"
            "master_seed = 9\n"
            "sync = 0:0.12:0.004\n"
            "attack = attack2\n"
            "subflows_assumed = 4\n"
        )
        plan = read_plan(str(plan_path))
        assert plan.trials == 100
        assert plan.flow_length == 3
        assert plan.attack.subflows == 4
        assert plan.detector.loss.subflows == 4

    def test_unknown_plan_key(self, tmp_path):
        plan_path = tmp_path / "plan.cfg"
        plan_path.write_text("bogus = 1\n")
        with pytest.raises(ParseError):
            read_plan(str(plan_path))

    def test_bench_emits_outputs(self, tmp_path, capsys):
        plan_path = tmp_path / "plan.cfg"
        plan_path.write_text(
            "trials = 120\nflow_length = 3\nmaster_seed = 4\nsync = 0:0.12:0.004\n"
        )
        out_dir = tmp_path / "results"
        code, out, _ = run_cli(
            capsys, "bench", "--plan", str(plan_path), "--out", str(out_dir)
        )
        assert code == 0
        summary = json.loads((out_dir / "summary.json").read_text())
        assert 0.5 <= summary["auc"] <= 1.0
        assert summary["trials"] == 120
        roc_lines = (out_dir / "roc.csv").read_text().strip().splitlines()
        assert roc_lines[0] == "p_f,p_d"
        assert len(roc_lines) > 2
        score_lines = (out_dir / "scores.csv").read_text().strip().splitlines()
        assert len(score_lines) == 121
        stdout_summary = json.loads(out)
        assert stdout_summary["auc"] == summary["auc"]


class TestCsvFormat:
    def test_fit_csv_output(self, tmp_path, capsys):
        rng = np.random.default_rng(17)
        data = fm.sample(fm.DistSpec.laplace(0.0, 1.0), 2000, rng)
        path = tmp_path / "pdv.txt"
        path.write_text("".join(f"{v:.9f}\n" for v in data))
        code, out, _ = run_cli(
            capsys, "fit", "--family", "laplace", "--data", str(path), "--format", "csv"
        )
        assert code == 0
        lines = out.strip().splitlines()
        assert lines[0] == "key,value"
        keys = {line.split(",", 1)[0] for line in lines[1:]}
        assert {"family", "mu", "sigma", "jsd_sqrt", "version"} <= keys
