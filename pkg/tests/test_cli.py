import csv
import json
import math

import pytest

from kl_erasure.cli import ConfigError, RunConfig, main, read_config_file

LOG2 = math.log(2)


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = RunConfig(tau_e=0.1 + 0.2, k01=1 / 3, k10=2.0, samples=77, ratios="0.5,1")
        path = tmp_path / "run.ini"
        path.write_text(cfg.to_ini())
        assert RunConfig(**read_config_file(str(path))) == cfg

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"tau_e": 0.0},
            {"tau_e": 1.0, "tau_r": -1.0},
            {"tau_e": 1.0, "samples": 0},
            {"tau_e": 1.0, "k01": 1.0},
            {"tau_e": 1.0, "ratios": "1,-2"},
            {"tau_e": 1.0, "ratios": ""},
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            RunConfig(**kwargs)

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[run]\ntau_e = 1\ncolour = blue\n")
        assert main(["solve", "--config", str(path)]) == 2

    def test_flags_override_file(self, tmp_path):
        path = tmp_path / "run.ini"
        path.write_text("[run]\ntau_e = 5\n")
        assert main(["solve", "--config", str(path), "--tau-e", "1", "--out", str(tmp_path)]) == 0
        assert json.loads((tmp_path / "solve.json").read_text())["config"]["tau_e"] == 1.0


class TestSolve:
    def test_reference_cost(self, tmp_path):
        assert run(tmp_path, "solve", "--tau-e", "1") == 0
        rep = json.loads((tmp_path / "solve.json").read_text())
        assert rep["cost_nats"] == pytest.approx(0.765853, abs=1e-6)
        assert {"cost_nats", "v0_0", "v1_0", "z_grid", "protocol_grid", "config", "config_digest"} <= set(rep)
        # the divergent terminal rate is written as null
        assert rep["protocol_grid"][-1][2] is None
        rows = list(csv.reader((tmp_path / "solve.csv").open()))
        assert rows[0] == ["t", "u01", "u10", "p0", "p1"]
        assert float(rows[-1][3]) == 1.0

    def test_long_horizon(self, tmp_path):
        assert run(tmp_path, "solve", "--tau-e", "100") == 0
        assert abs(json.loads((tmp_path / "solve.json").read_text())["cost_nats"] - LOG2) < 1e-6

    def test_missing_tau_e(self, tmp_path, capsys):
        assert run(tmp_path, "solve") == 2
        err = capsys.readouterr().err
        assert "usage" in err and "tau_e" in err

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["solve", "--tau-e", "0.7", "--k01", "2", "--k10", "1", "--out", str(a)]) == 0
        assert main(["solve", "--tau-e", "0.7", "--k01", "2", "--k10", "1", "--out", str(b)]) == 0
        for name in ("solve.json", "solve.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()


class TestSweep:
    def test_rows(self, tmp_path):
        assert run(tmp_path, "sweep", "--tau-e", "1", "--samples", "2000", "--ratios", "0.01,0.5,1,10") == 0
        rows = list(csv.DictReader((tmp_path / "sweep.csv").open()))
        assert list(rows[0]) == ["ratio", "cost_optimal", "asymptote_half_log", "floor_log2", "salamon_bound", "mc_estimate", "mc_se"]
        first, last = rows[0], rows[-1]
        assert float(first["cost_optimal"]) == pytest.approx(2.65416, abs=1e-5)
        assert float(first["asymptote_half_log"]) == pytest.approx(2.64916, abs=1e-5)
        assert float(last["cost_optimal"]) - LOG2 < 1e-8
        costs = [float(r["cost_optimal"]) for r in rows]
        assert all(a > b for a, b in zip(costs, costs[1:]))

    def test_rejects_nonpositive_ratio(self, tmp_path):
        assert run(tmp_path, "sweep", "--tau-e", "1", "--ratios", "0,1") == 2


class TestVerify:
    def test_default_passes(self, tmp_path):
        assert run(tmp_path, "verify", "--tau-e", "1", "--samples", "20000") == 0
        rep = json.loads((tmp_path / "verify.json").read_text())
        assert rep["passed"] and not rep["failed"] and not rep["inconclusive"]
        names = {c["name"] for c in rep["checks"]}
        assert {"kl_cost_law[quench]", "work_law[truncated_optimal]", "free_energy_change", "kl_cost_mc"} <= names

    def test_corrupted_reversal_fails_on_kl_cost_law(self, tmp_path, capsys):
        assert run(tmp_path, "verify", "--tau-e", "1", "--samples", "2000", "--corrupt-reversal") == 1
        err = capsys.readouterr().err
        assert "kl_cost_law" in err
        failed = json.loads((tmp_path / "verify.json").read_text())["failed"]
        assert failed and all(name.startswith("kl_cost_law") for name in failed)

    def test_few_samples_inconclusive(self, tmp_path, capsys):
        assert run(tmp_path, "verify", "--tau-e", "1", "--samples", "10") == 0
        rep = json.loads((tmp_path / "verify.json").read_text())
        assert "kl_cost_mc" in rep["inconclusive"]
        assert "inconclusive" in capsys.readouterr().err


class TestOtherCommands:
    def test_simulate(self, tmp_path):
        assert run(tmp_path, "simulate", "--tau-e", "1", "--samples", "500", "--seed", "3") == 0
        lines = (tmp_path / "paths.jsonl").read_text().splitlines()
        assert len(lines) == 500
        first = json.loads(lines[0])
        assert set(first) == {"initial", "jumps", "horizon"}
        assert json.loads((tmp_path / "simulate.json").read_text())["n_samples"] == 500

    def test_thermo_report(self, tmp_path):
        assert run(tmp_path, "thermo-report", "--tau-e", "1", "--kt", "2") == 0
        rep = json.loads((tmp_path / "thermo.json").read_text())
        assert rep["ledger_kT"]["W"] == pytest.approx(2 * rep["ledger_nats"]["W"])
        assert rep["first_law_residual"] < 1e-8
        header = (tmp_path / "thermo.csv").read_text().splitlines()[0]
        assert header.startswith("t,p0,u01,u10,J01")
