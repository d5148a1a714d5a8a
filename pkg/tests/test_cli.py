import json

import pytest

from memrehearse.cli import main
from memrehearse.config import ExperimentConfig, parse_config
from memrehearse.errors import ConfigurationError
from memrehearse.experiments import compare_policies, comparison_configs, run_experiment

FAST = {"trainer.epochs_per_task": 3, "stationary_trainer.epochs_per_task": 3, "estimator.u": 20}
FAST_FLAGS = [f"--set={k}={v}" for k, v in FAST.items()]


class TestParseConfig:
    def test_defaults(self):
        cfg = parse_config()
        assert cfg.kind == "incremental"
        assert cfg.buffer.capacity == 500
        assert cfg.estimator.u == 250 and cfg.estimator.k_fraction == 0.5
        assert cfg.trainer.lr_drop_epochs == [35, 45]
        assert (cfg.stationary_trainer.momentum, cfg.stationary_trainer.weight_decay) == (0.9, 1e-6)

    def test_empty_file(self, tmp_path):
        (tmp_path / "c.json").write_text("{}")
        assert parse_config(tmp_path / "c.json") == parse_config()

    def test_unknown_key(self, tmp_path):
        (tmp_path / "c.json").write_text('{"bufer_size": 500}')
        with pytest.raises(ConfigurationError, match="bufer_size"):
            parse_config(tmp_path / "c.json")

    def test_nested_key_path(self):
        with pytest.raises(ConfigurationError, match=r"buffer\.capcity"):
            parse_config(overrides={"buffer.capcity": 3})

    def test_flag_wins(self, tmp_path):
        (tmp_path / "c.json").write_text('{"buffer": {"capacity": 500}}')
        assert parse_config(tmp_path / "c.json", {"buffer.capacity": "2000"}).buffer.capacity == 2000

    def test_policy_aliases(self):
        assert parse_config(overrides={"buffer.policy": "midk"}).buffer.policy == "middle_k"

    def test_selector_with_infinite(self):
        with pytest.raises(ConfigurationError):
            parse_config(overrides={"buffer.capacity": "inf", "buffer.policy": "topk"})

    def test_bad_type_names_key(self):
        with pytest.raises(ConfigurationError, match=r"estimator\.u"):
            parse_config(overrides={"estimator.u": "many"})

    def test_scaled_schedule(self):
        assert parse_config(overrides={"trainer.epochs_per_task": 10}).trainer.lr_drop_epochs == [7, 9]

    def test_unreadable(self, tmp_path):
        (tmp_path / "c.json").write_text("{not json")
        with pytest.raises(ConfigurationError):
            parse_config(tmp_path / "c.json")


def _cfg(tmp_path, **over):
    return parse_config(overrides={**FAST, "output_dir": str(tmp_path), **over})


class TestRunExperiment:
    def test_fan_out(self, tmp_path):
        cfg = _cfg(tmp_path, seeds=[1, 2, 3, 4, 5])
        assert run_experiment(cfg) == 0
        dirs = sorted(p.name for p in tmp_path.iterdir() if p.is_dir())
        assert dirs == [f"seed_{i}" for i in range(1, 6)]
        agg = json.loads((tmp_path / "aggregate.json").read_text())
        assert agg["std"] == "sample (ddof=1)"
        assert agg["metrics"]["acc"]["n"] == 5

    def test_manifest_echoes_defaults(self, tmp_path):
        run_experiment(_cfg(tmp_path))
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["status"] == "ok" and m["error"] is None
        assert m["config"]["buffer"]["capacity"] == 500
        assert m["config"]["estimator"]["k_fraction"] == 0.5
        assert "wall_time_s" in m

    def test_byte_identical_rerun(self, tmp_path):
        for d in ("a", "b"):
            assert run_experiment(_cfg(tmp_path / d, seeds=[3])) == 0
        for name in ("metrics.json", "accuracy_matrix.csv", "buffer.csv", "proxy_task_2.csv"):
            assert (tmp_path / "a/seed_3" / name).read_bytes() == (tmp_path / "b/seed_3" / name).read_bytes()
        assert (tmp_path / "a/aggregate.json").read_bytes() == (tmp_path / "b/aggregate.json").read_bytes()

    def test_threads_do_not_change_outputs(self, tmp_path, monkeypatch):
        run_experiment(_cfg(tmp_path / "a", seeds=[0, 1]))
        monkeypatch.setenv("MEMREHEARSE_THREADS", "2")
        run_experiment(_cfg(tmp_path / "b", seeds=[0, 1]))
        for s in (0, 1):
            assert (tmp_path / f"a/seed_{s}/metrics.json").read_bytes() == \
                (tmp_path / f"b/seed_{s}/metrics.json").read_bytes()

    def test_failure_recorded(self, tmp_path):
        cfg = _cfg(tmp_path, **{"dataset.path": str(tmp_path / "missing.mrds")})
        assert run_experiment(cfg) != 0
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["status"] == "failed" and m["error"]["type"] == "FileNotFoundError"

    def test_proxy_correlate(self, tmp_path):
        cfg = _cfg(tmp_path, kind="proxy_correlate")
        assert run_experiment(cfg) == 0
        metrics = json.loads((tmp_path / "seed_0/metrics.json").read_text())
        assert set(metrics) >= {"pearson", "spearman", "kendall"}
        assert all(-1 <= metrics[k] <= 1 for k in ("pearson", "spearman", "kendall"))

    @pytest.mark.parametrize("kind", ["memscore", "sweep_classes", "sweep_fractions", "probe"])
    def test_other_kinds(self, tmp_path, kind):
        cfg = _cfg(tmp_path, kind=kind, **{"sweep.fractions": [0.5, 1.0]})
        assert run_experiment(cfg) == 0
        assert (tmp_path / "seed_0/metrics.json").exists()

    def test_curves(self, tmp_path):
        cfg = _cfg(tmp_path, **{"curves.enabled": True, "curves.thresholds": [0.25, 0.9]})
        assert run_experiment(cfg) == 0
        metrics = json.loads((tmp_path / "seed_0/metrics.json").read_text())
        assert set(metrics["memorized_accuracy_curves"]) == {"0.25", "0.9"}
        assert (tmp_path / "seed_0/curves_0.25.csv").exists()


class TestCompare:
    def test_rows_and_upper_bound(self, tmp_path):
        base = _cfg(tmp_path, seeds=[0, 1], **{
            "compare.policies": ["reservoir", "bottom_k", "top_k"], "compare.buffer_sizes": [20],
            "compare.include_infinite": True,
        })
        rows = compare_policies(comparison_configs(base), tmp_path)
        assert [r["policy"] for r in rows] == ["reservoir", "bottom_k", "top_k", "reservoir"]
        assert [r["upper_bound"] for r in rows] == [False, False, False, True]
        assert (tmp_path / "comparison.csv").read_text().count("\n") == 5

    def test_duplicate_policy_identical(self, tmp_path):
        base = _cfg(tmp_path, **{"compare.policies": ["top_k", "top_k"], "compare.buffer_sizes": [20]})
        a, b = compare_policies(comparison_configs(base))
        assert a == b

    def test_heterogeneous_rejected(self, tmp_path):
        a = _cfg(tmp_path)
        b = _cfg(tmp_path, **{"dataset.seed": 9})
        with pytest.raises(ConfigurationError):
            compare_policies([a, b])


class TestMain:
    def test_run(self, tmp_path, capsys):
        code = main(["run", "--seed", "1", "--buffer", "20", "--policy", "bottomk", "--out", str(tmp_path), *FAST_FLAGS])
        assert code == 0
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["config"]["buffer"] == {**m["config"]["buffer"], "capacity": 20, "policy": "bottom_k"}
        assert m["seeds"] == [1]

    def test_flags_override_file(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"buffer": {"capacity": 500}, "stream": {"tasks": 5}}))
        code = main(["run", "--config", str(tmp_path / "c.json"), "--buffer", "inf", "--tasks", "2",
                     "--out", str(tmp_path / "o"), *FAST_FLAGS])
        assert code == 0
        cfg = json.loads((tmp_path / "o/manifest.json").read_text())["config"]
        assert cfg["buffer"]["capacity"] == "inf" and cfg["stream"]["tasks"] == 2

    def test_estimator_flags(self, tmp_path):
        code = main(["memscore", "--u", "20", "--k-fraction", "0.4", "--out", str(tmp_path),
                     "--set", "stationary_trainer.epochs_per_task=2"])
        assert code == 0
        metrics = json.loads((tmp_path / "seed_0/metrics.json").read_text())
        assert metrics["u"] == 20 and metrics["k"] == 480

    def test_bad_config_exit_code(self, tmp_path, capsys):
        assert main(["run", "--set", "bufer=1", "--out", str(tmp_path)]) == 2
        assert "bufer" in capsys.readouterr().err

    def test_compare(self, tmp_path, capsys):
        code = main(["compare", "--out", str(tmp_path), "--set", "compare.policies=[\"reservoir\",\"topk\"]",
                     "--set", "compare.buffer_sizes=[20]", *FAST_FLAGS])
        assert code == 0
        assert "top_k" in capsys.readouterr().out

    def test_schema(self, capsys):
        assert main(["--schema"]) == 0
        assert "properties" in json.loads(capsys.readouterr().out)

    def test_config_model_is_strict(self):
        with pytest.raises(Exception):
            ExperimentConfig.model_validate({"nope": 1})
