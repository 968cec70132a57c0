import json
from pathlib import Path

import pytest
import yaml

from dynbatch.cli import main
from dynbatch.core import ConfigError
from dynbatch.scenario import build_doc, dump_scenario, load_scenario

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

MINIMAL = {
    "schema_version": 1,
    "mode": "sim",
    "seed": 1,
    "cluster": {"sync": "bsp", "workers": [{"id": "solo", "cores": 8}]},
    "allocation": {"kind": "uniform", "b0": 64},
    "horizon": {"max_iterations": 20},
}


def write_scenario(tmp_path, payload, name="scenario.yaml"):
    p = tmp_path / name
    p.write_text(yaml.safe_dump(payload))
    return p


class TestScenarioLoading:
    def test_minimal_loads(self, tmp_path):
        doc = load_scenario(write_scenario(tmp_path, MINIMAL))
        assert doc.mode == "sim"
        assert doc.sim.cluster.ids == ("solo",)

    def test_unknown_keys_rejected(self, tmp_path):
        bad = dict(MINIMAL, mystery_knob=12)
        with pytest.raises(ConfigError):
            load_scenario(write_scenario(tmp_path, bad))

    def test_nested_unknown_keys_rejected(self, tmp_path):
        bad = json.loads(json.dumps(MINIMAL))
        bad["cluster"]["workers"][0]["speed"] = 3
        with pytest.raises(ConfigError):
            load_scenario(write_scenario(tmp_path, bad))

    def test_missing_file(self):
        with pytest.raises(ConfigError):
            load_scenario("/nonexistent/path.yaml")

    def test_cluster_and_portfolio_conflict(self, tmp_path):
        bad = dict(MINIMAL)
        bad["portfolio"] = {
            "vm_types": [{"name": "a", "cores": 4}],
            "demand_cores": 4,
        }
        with pytest.raises(ConfigError):
            load_scenario(write_scenario(tmp_path, bad))

    def test_overrides_apply(self, tmp_path):
        p = write_scenario(tmp_path, MINIMAL)
        doc = load_scenario(p, {"seed": 99, "allocation.b0": 32})
        assert doc.sim.seed == 99
        from dynbatch.simkernel import Uniform

        assert doc.sim.initial_alloc == Uniform(32)

    def test_roundtrip_fixed_point(self, tmp_path):
        for name in sorted(SCENARIOS.glob("*.yaml")):
            doc1 = load_scenario(name)
            doc2 = build_doc(yaml.safe_load(dump_scenario(doc1)), path=str(name))
            assert doc1 == doc2, f"round-trip mismatch for {name.name}"


class TestRunCommand:
    def test_minimal_run_exits_zero(self, tmp_path):
        p = write_scenario(tmp_path, MINIMAL)
        out = tmp_path / "out"
        assert main(["run", str(p), "--out", str(out)]) == 0
        rows = [json.loads(l) for l in (out / "trace.jsonl").read_text().splitlines()]
        assert len(rows) == 20
        assert all(not r["adjustment_made"] for r in rows)
        summary = json.loads((out / "summary.json").read_text())
        assert summary["result"]["adjustments"] == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "ok" and manifest["exit_code"] == 0

    def test_config_error_exit_2(self, tmp_path):
        p = write_scenario(tmp_path, dict(MINIMAL, mystery=1))
        assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 2

    def test_cluster_exhausted_exit_4_with_partial_trace(self, tmp_path):
        out = tmp_path / "out"
        code = main(["run", str(SCENARIOS / "preempt_all.yaml"), "--out", str(out)])
        assert code == 4
        lines = (out / "trace.jsonl").read_text().splitlines()
        assert lines  # partial trace flushed
        for line in lines:
            json.loads(line)  # every prefix row is valid JSON
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["exit_code"] == 4

    def test_infeasible_portfolio_exit_3(self, tmp_path):
        payload = {
            "schema_version": 1,
            "seed": 1,
            "portfolio": {
                "vm_types": [{"name": "tiny", "cores": 1}],
                "demand_cores": 1000,
                "max_per_type": 2,
            },
            "horizon": {"max_iterations": 5},
        }
        p = write_scenario(tmp_path, payload)
        assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 3

    def test_numerical_failure_exit_5(self, tmp_path):
        payload = {
            "schema_version": 1,
            "mode": "train",
            "seed": 1,
            "cluster": {"workers": [{"id": "a", "cores": 4}]},
            "allocation": {"kind": "uniform", "b0": 64},
            "trainer": {
                "model": "linreg",
                "n": 500,
                "dim": 4,
                "eta": 1e9,
                "iterations": 100,
            },
        }
        p = write_scenario(tmp_path, payload)
        import numpy as np

        with np.errstate(over="ignore", invalid="ignore"):
            assert main(["run", str(p), "--out", str(tmp_path / "o")]) == 5

    def test_seed_override_changes_noisy_trace(self, tmp_path):
        noisy = json.loads(json.dumps(MINIMAL))
        noisy["perf"] = {"default": {"noise_sigma": 0.05, "amdahl_p": 1.0, "b_half": 0}}
        p = write_scenario(tmp_path, noisy)
        main(["run", str(p), "--out", str(tmp_path / "a"), "--seed", "1"])
        main(["run", str(p), "--out", str(tmp_path / "b"), "--seed", "2"])
        main(["run", str(p), "--out", str(tmp_path / "c"), "--seed", "2"])
        a = (tmp_path / "a" / "trace.jsonl").read_bytes()
        b = (tmp_path / "b" / "trace.jsonl").read_bytes()
        c = (tmp_path / "c" / "trace.jsonl").read_bytes()
        assert a != b
        assert b == c

    def test_byte_identical_reruns_of_bundled_scenarios(self, tmp_path):
        for name in ("minimal.yaml", "static_heterogeneity.yaml", "asp_staleness.yaml",
                     "deflation.yaml", "train_linreg.yaml"):
            out1, out2 = tmp_path / f"{name}-1", tmp_path / f"{name}-2"
            assert main(["run", str(SCENARIOS / name), "--out", str(out1)]) == 0
            assert main(["run", str(SCENARIOS / name), "--out", str(out2)]) == 0
            assert (out1 / "trace.jsonl").read_bytes() == (out2 / "trace.jsonl").read_bytes()
            assert (out1 / "summary.json").read_bytes() == (out2 / "summary.json").read_bytes()


class TestCompareCommand:
    def test_identical_scenarios_ratio_one(self, tmp_path):
        p = write_scenario(tmp_path, MINIMAL)
        out = tmp_path / "cmp"
        assert main(["compare", str(p), str(p), "--out", str(out)]) == 0
        report = json.loads((out / "compare.json").read_text())
        assert report["ratio_a_over_b"] == pytest.approx(1.0)

    def test_uniform_vs_static_ratio(self, tmp_path):
        out = tmp_path / "cmp"
        code = main([
            "compare",
            str(SCENARIOS / "uniform_h6.yaml"),
            str(SCENARIOS / "static_h6.yaml"),
            "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "compare.json").read_text())
        assert report["metric"] == "total_time"
        assert report["ratio_a_over_b"] == pytest.approx(10 / 3, rel=0.01)

    def test_uniform_vs_dynamic_deflation_direction(self, tmp_path):
        # Same iteration count for both, so total time measures speed:
        # the dynamic run rebalances around the deflation and wins.
        out = tmp_path / "cmp"
        code = main([
            "compare",
            str(SCENARIOS / "deflation.yaml"),
            str(SCENARIOS / "uniform_deflation.yaml"),
            "--out", str(out),
        ])
        assert code == 0
        report = json.loads((out / "compare.json").read_text())
        assert report["metric"] == "total_time"
        assert report["ratio_a_over_b"] < 1.0


class TestTrainAspMode:
    def test_asp_training_runs(self, tmp_path):
        payload = {
            "schema_version": 1,
            "mode": "train",
            "seed": 13,
            "cluster": {
                "sync": "asp",
                "workers": [
                    {"id": "slow", "cores": 3},
                    {"id": "fast", "cores": 9},
                ],
            },
            "perf": {"default": {"amdahl_p": 1.0, "b_half": 0}},
            "allocation": {"kind": "static", "b0": 64},
            "trainer": {
                "model": "linreg",
                "n": 800,
                "dim": 5,
                "noise_sigma": 0.1,
                "eta": 0.05,
                "iterations": 200,
            },
        }
        p = write_scenario(tmp_path, payload)
        out = tmp_path / "out"
        assert main(["run", str(p), "--out", str(out)]) == 0
        summary = json.loads((out / "summary.json").read_text())
        losses = summary["result"]["loss_curve"]
        assert losses[-1] < losses[0]


class TestValidateCommand:
    def test_all_bundled_scenarios_validate(self):
        for name in sorted(SCENARIOS.glob("*.yaml")):
            assert main(["validate", str(name)]) == 0

    def test_invalid_exits_2(self, tmp_path):
        p = write_scenario(tmp_path, dict(MINIMAL, nope=True))
        assert main(["validate", str(p)]) == 2
