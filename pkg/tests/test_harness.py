import json
from pathlib import Path

import pytest

from ipidsim.harness import ConfigError, ScenarioKind, load_config, parse_config, run_scenario
from ipidsim.harness.analysis import (
    collision_probability,
    enumerate_collision_rate,
    expected_trials,
    oracle_small_pool,
)
from ipidsim.harness.batch import aggregate, run_batch
from ipidsim.harness.cli import EXIT_CONFIG, EXIT_ENGINE, EXIT_OK, OUTPUT_DIR_ENV, main
from ipidsim.harness.scenario import phases_for

DOCS = Path(__file__).resolve().parent.parent / "docs" / "scenarios"


class TestConfig:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.kind is ScenarioKind.FULL_RESET
        assert cfg.victim.min_pmtu == 552 and cfg.victim.tick_ms == 4

    def test_preset_name(self):
        assert parse_config({"victim": {"min_pmtu": "windows"}}).victim.min_pmtu == 596

    def test_unknown_preset(self):
        with pytest.raises(ConfigError, match="preset"):
            parse_config({"victim": {"min_pmtu": "plan9"}})

    def test_reports_every_problem(self):
        with pytest.raises(ConfigError) as err:
            parse_config({"bogus": 1, "victim": {"tick_ms": 0}, "attack": {"probe_rate_pps": -5}})
        joined = "\n".join(err.value.problems)
        assert len(err.value.problems) == 3
        assert "bogus: unknown key" in joined and "victim.tick_ms" in joined and "attack.probe_rate_pps" in joined

    def test_server_port_must_listen(self):
        with pytest.raises(ConfigError, match="listening_ports"):
            parse_config({"server_port": 443})

    def test_addresses_outside_block(self):
        with pytest.raises(ConfigError, match="attacker_block"):
            parse_config({"topology": {"client": "100.64.0.9"}})

    def test_jitter_budget(self):
        with pytest.raises(ConfigError, match="jitter"):
            parse_config({"attack": {"probe_rate_pps": 200}})

    def test_unknown_phase_timeout(self):
        with pytest.raises(ConfigError, match="unknown phases"):
            parse_config({"attack": {"phase_timeout_ms": {"warp": 5}}})

    def test_overrides(self):
        cfg = parse_config({}).with_overrides(**{"victim.policy": "Combined", "seed": 9})
        assert cfg.victim.policy.value == "Combined" and cfg.seed == 9

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("seed = [", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config(path)

    @pytest.mark.parametrize("name", ["full_reset", "full_inject", "port_detect", "patched_control"])
    def test_shipped_examples_load(self, name):
        load_config(DOCS / f"{name}.toml")


class TestAnalysis:
    def test_formula_values(self):
        assert collision_probability(2048) == pytest.approx(0.63221, abs=1e-5)
        assert collision_probability(3000) == pytest.approx(0.76897, abs=1e-5)
        assert collision_probability(1024) == pytest.approx(0.39354, abs=1e-5)
        assert collision_probability(0) == 0.0
        assert expected_trials() == 2048

    @pytest.mark.parametrize("counters,k", [(2, 1), (2, 5), (4, 3), (16, 4), (64, 2)])
    def test_formula_matches_enumeration(self, counters, k):
        assert enumerate_collision_rate(counters, k) == pytest.approx(collision_probability(k, counters), rel=1e-12)

    def test_enumeration_guard(self):
        with pytest.raises(ValueError):
            enumerate_collision_rate(2048, 3)

    @pytest.mark.parametrize("counters", [2, 16, 64])
    def test_monte_carlo_over_real_hash(self, counters):
        stats = oracle_small_pool(counters, counters, 4000, seed=1)
        assert stats.within(3.0), (stats.rate, stats.expected)

    def test_oracle_range(self):
        with pytest.raises(ValueError):
            oracle_small_pool(1, 1, 1)


def _summary(outcome, total, phases=(), failure=None):
    return {
        "seed": 0,
        "outcome": outcome,
        "total_virtual_ms": total,
        "failure_phase": failure[0] if failure else None,
        "failure_reason": failure[1] if failure else None,
        "phases": [{"name": n, "virtual_ms": v} for n, v in phases],
    }


class TestBatch:
    def test_aggregate(self):
        out = aggregate(
            [
                _summary("Success", 100, [("seq", 60), ("port", 40)]),
                _summary("Success", 300, [("seq", 200), ("port", 100)]),
                _summary("Failure", 50, failure=("collision", "NoCollision")),
            ]
        )
        assert out["runs"] == 3 and out["successes"] == 2
        assert out["success_rate"] == pytest.approx(2 / 3)
        assert out["mean_virtual_ms"] == 200 and out["p50_virtual_ms"] == 200
        assert out["p90_virtual_ms"] == pytest.approx(280)
        assert out["phase_mean_ms"] == {"seq": 130, "port": 70}
        assert out["failures"] == {"collision:NoCollision": 1}

    def test_deterministic(self):
        cfg = parse_config({"seed": 4, "kind": "PortDetect", "attack": {"port_range": [40000, 41000]}})
        a = run_batch(cfg, 2)
        b = run_batch(cfg, 2)
        assert a == b
        assert a["seeds"] == [4, 5]

    def test_needs_runs(self):
        with pytest.raises(ValueError):
            run_batch(parse_config({}), 0)


class TestRunScenario:
    def test_summary_arithmetic(self):
        cfg = parse_config({"seed": 2, "kind": "PortDetect", "attack": {"port_range": [40000, 42000]}, "client": {"port": 41234}})
        s = run_scenario(cfg).summary
        assert s["outcome"] == "Success" and s["verified"]
        assert s["total_virtual_ms"] == sum(p["virtual_ms"] for p in s["phases"])
        assert sum(p["packets_sent"] for p in s["phases"]) <= s["packets_sent"]["attacker"]
        assert [p["name"] for p in s["phases"]] == ["downgrade", "port"]
        assert s["phases"][1]["inferred_value"] == 41234
        json.dumps(s)

    def test_same_seed_same_trace(self):
        cfg = parse_config({"seed": 8, "kind": "DowngradeOnly"})
        assert run_scenario(cfg, trace=True).trace.text() == run_scenario(cfg, trace=True).trace.text()

    def test_single_phase_uses_ground_truth(self):
        cfg = parse_config({"seed": 5, "kind": "FullReset"})
        result = run_scenario(cfg, phase="exact_seq")
        assert [p["name"] for p in result.summary["phases"]] == ["downgrade", "exact_seq"]
        assert result.summary["verified"]

    def test_phase_selection(self):
        cfg = parse_config({"kind": "FullInject"})
        assert phases_for(cfg)[-1] == "inject"
        assert phases_for(cfg, "downgrade") == ("downgrade",)
        with pytest.raises(ValueError):
            phases_for(cfg, "nope")

    def test_no_connection_is_verified(self):
        cfg = parse_config({"kind": "PortDetect", "client": {"connect": False}, "attack": {"port_range": [40000, 40500]}})
        s = run_scenario(cfg).summary
        assert (s["failure_phase"], s["failure_reason"], s["verified"]) == ("port", "NoConnection", True)

    def test_strict_synthetic_rejected(self):
        cfg = parse_config({"kind": "DowngradeOnly", "victim": {"validate_embedded_provenance": True}})
        s = run_scenario(cfg).summary
        assert (s["outcome"], s["failure_reason"]) == ("Failure", "Rejected")


class TestCli:
    def write(self, tmp_path, text):
        path = tmp_path / "s.toml"
        path.write_text(text, encoding="utf-8")
        return path

    def test_ok_and_env_dir(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "out"))
        path = self.write(tmp_path, 'kind = "DowngradeOnly"\n')
        assert main(["run", "--config", str(path)]) == EXIT_OK
        doc = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert doc["outcome"] == "Success"
        assert "wall clock" in capsys.readouterr().out

    def test_batch_and_trace(self, tmp_path):
        path = self.write(tmp_path, 'kind = "DowngradeOnly"\n')
        summary = tmp_path / "b.json"
        trace = tmp_path / "t.log"
        code = main(["run", "--config", str(path), "--runs", "2", "--seed", "7", "--summary", str(summary), "--trace", str(trace)])
        assert code == EXIT_OK
        doc = json.loads(summary.read_text())
        assert doc["batch"]["seeds"] == [7, 8] and len(doc["runs"]) == 2
        assert (tmp_path / "t.0.log").exists() and (tmp_path / "t.1.log").exists()

    def test_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "none.toml")]) == EXIT_CONFIG

    def test_invalid_config(self, tmp_path, capsys):
        path = self.write(tmp_path, "nonsense = 1\n")
        assert main(["run", "--config", str(path), "--summary", str(tmp_path / "x.json")]) == EXIT_CONFIG
        assert "unknown key" in capsys.readouterr().err

    def test_engine_error(self, tmp_path):
        path = self.write(tmp_path, '[topology]\nattacker_block = "100.64.0.0/30"\n')
        assert main(["run", "--config", str(path), "--summary", str(tmp_path / "x.json")]) == EXIT_ENGINE

    def test_bad_runs(self, tmp_path):
        path = self.write(tmp_path, "")
        assert main(["run", "--config", str(path), "--runs", "0"]) == EXIT_CONFIG
