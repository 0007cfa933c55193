import csv
import json

import numpy as np
import pytest

from sharpmin.cli import main
from sharpmin.harness import (
    ConfigError,
    DivergenceError,
    FixtureError,
    RunConfig,
    _race_basins,
    aggregate_trials,
    apply_overrides,
    expand_grid,
    hyperparameter_sweep,
    landscape_demo,
    model_selection,
    run_experiment,
    run_leave_one_out,
    SweepRow,
)
from sharpmin.objectives import make_sharp_flat_landscape
from sharpmin.optimizers import GRADIENT_RULES, HyperParams


def tiny_config(**overrides):
    raw = {
        "objective": {"kind": "logreg"},
        "dataset": {"n_domains": 3, "n_per_domain": 30, "angle_step_degrees": 30.0,
                     "noise_std": 0.4, "seed": 7},
        "optimizer": {"rule": "sagm", "rho": 0.05, "alpha": 0.001, "lr": 0.05},
        "train": {"iterations": 60, "eval_every": 20, "per_domain_batch": 8,
                   "target_index": 0, "seed": 0},
    }
    for dotted, value in overrides.items():
        node = raw
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return RunConfig.from_dict(raw)


class TestConfigValidation:
    def test_unknown_top_level_section(self):
        with pytest.raises(ConfigError, match="top-level"):
            RunConfig.from_dict({"optimizer": {"rule": "erm"}, "extras": {}})

    def test_unknown_section_key(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            RunConfig.from_dict(
                {"optimizer": {"rule": "erm", "rho_typo": 0.1}}
            )

    def test_missing_rule(self):
        with pytest.raises(ConfigError, match="rule"):
            RunConfig.from_dict({"optimizer": {"rho": 0.05}})

    def test_unknown_rule(self):
        with pytest.raises(ConfigError, match="rule"):
            RunConfig.from_dict({"optimizer": {"rule": "spam"}})

    def test_zero_iterations_rejected(self):
        with pytest.raises(ConfigError, match="iterations"):
            tiny_config(**{"train.iterations": 0})

    def test_target_index_range(self):
        with pytest.raises(ConfigError, match="target_index"):
            tiny_config(**{"train.target_index": 3})

    def test_hyperparam_ranges_propagate(self):
        with pytest.raises(ConfigError):
            tiny_config(**{"optimizer.rho": -0.1})

    def test_round_trip(self):
        cfg = tiny_config()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg


class TestRunExperiment:
    def test_deterministic_given_config(self):
        cfg = tiny_config()
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert [r.__dict__ for r in a.history] == [r.__dict__ for r in b.history]
        np.testing.assert_array_equal(a.final_theta, b.final_theta)

    def test_sagm_alpha_zero_matches_erm_sam_bitwise(self):
        a = run_experiment(tiny_config(**{"optimizer.rule": "sagm", "optimizer.alpha": 0.0}))
        b = run_experiment(tiny_config(**{"optimizer.rule": "erm_sam"}))
        np.testing.assert_array_equal(a.final_theta, b.final_theta)
        assert [r.val_accuracy for r in a.history] == [r.val_accuracy for r in b.history]

    def test_history_structure(self):
        cfg = tiny_config(**{"train.iterations": 50, "train.eval_every": 20})
        result = run_experiment(cfg)
        assert [r.iteration for r in result.history] == [20, 40, 50]
        assert result.best_iteration in {20, 40, 50}

    def test_best_checkpoint_is_max_val_accuracy(self):
        result = run_experiment(tiny_config())
        vals = [r.val_accuracy for r in result.history]
        assert result.best_val_accuracy == max(vals)
        # earliest max wins ties
        assert result.best_iteration == result.history[int(np.argmax(vals))].iteration

    def test_no_shift_control_closes_domain_gap(self):
        # identically distributed domains: target accuracy tracks validation
        cfg = tiny_config(**{
            "dataset.angle_step_degrees": 0.0,
            "dataset.n_per_domain": 200,
            "train.iterations": 2000,
            "train.eval_every": 500,
            "optimizer.rule": "erm",
            "optimizer.lr": 0.01,
        })
        gaps = []
        for seed in range(3):
            result = run_experiment(apply_overrides(cfg, {"train.seed": seed}))
            gaps.append(result.best_target_accuracy - result.best_val_accuracy)
        assert abs(float(np.mean(gaps))) < 0.03

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_with_iteration(self):
        cfg = tiny_config(**{"optimizer.lr": 1e200, "optimizer.weight_decay": 1e200})
        with pytest.raises(DivergenceError) as excinfo:
            run_experiment(cfg)
        assert excinfo.value.iteration >= 1

    def test_result_embeds_config(self, tmp_path):
        cfg = tiny_config()
        result = run_experiment(cfg)
        out = tmp_path / "run.json"
        result.save(out)
        payload = json.loads(out.read_text())
        assert payload["config"] == cfg.to_dict()
        assert len(payload["best_theta"]) == len(payload["final_theta"])


class TestSweep:
    def test_grid_expansion_order(self):
        combos = expand_grid({"optimizer.alpha": [0.001, 0.0005], "train.seed": [0, 1]})
        assert len(combos) == 4
        assert combos[0] == {"optimizer.alpha": 0.001, "train.seed": 0}

    def test_empty_grid_rejected(self):
        with pytest.raises(ConfigError):
            expand_grid({})

    def test_paper_alpha_grid_rows(self):
        rows = hyperparameter_sweep(tiny_config(), {"optimizer.alpha": [0.001, 0.0005]})
        assert len(rows) == 2
        assert all(row.error is None for row in rows)

    def test_singleton_grid_matches_run_experiment(self):
        cfg = tiny_config()
        rows = hyperparameter_sweep(cfg, {"optimizer.alpha": [0.001]})
        direct = run_experiment(cfg)
        assert rows[0].val_accuracy == direct.best_val_accuracy
        assert rows[0].target_accuracy == direct.best_target_accuracy
        assert rows[0].final_gap == direct.final_gap

    def test_failed_rows_recorded_not_raised(self):
        rows = hyperparameter_sweep(tiny_config(), {"optimizer.rho": [0.05, -1.0]})
        assert len(rows) == 2
        assert rows[0].error is None
        assert rows[1].error is not None

    def test_override_path_must_exist(self):
        with pytest.raises(ConfigError, match="does not exist"):
            apply_overrides(tiny_config(), {"optimizer.momentum": 0.9})


class TestModelSelection:
    def rows(self, accs):
        return [
            SweepRow(config_id=i, overrides={}, val_accuracy=a,
                     target_accuracy=a, final_gap=0.0)
            for i, a in enumerate(accs)
        ]

    def test_argmax(self):
        assert model_selection(self.rows([0.81, 0.86, 0.84])) == 1

    def test_tie_breaks_to_lowest_id(self):
        assert model_selection(self.rows([0.85, 0.85])) == 0

    def test_single_row(self):
        assert model_selection(self.rows([0.5])) == 0

    def test_all_failed(self):
        failed = [SweepRow(0, {}, None, None, None, error="boom")]
        with pytest.raises(ConfigError, match="every sweep row failed"):
            model_selection(failed)

    def test_failed_rows_skipped(self):
        rows = self.rows([0.8, 0.9])
        rows.append(SweepRow(2, {}, None, None, None, error="diverged"))
        assert model_selection(rows) == 1


class TestAggregateTrials:
    def test_paper_style_numbers(self):
        mean, stderr = aggregate_trials([85.5, 85.3, 85.7])
        assert mean == pytest.approx(85.5, abs=1e-12)
        assert stderr == pytest.approx(0.2 / np.sqrt(3), abs=1e-4)

    def test_identical_values(self):
        assert aggregate_trials([3.0, 3.0, 3.0])[1] == 0.0

    def test_two_points(self):
        assert aggregate_trials([0.0, 100.0])[0] == 50.0

    def test_requires_two(self):
        with pytest.raises(ValueError):
            aggregate_trials([1.0])


class TestLeaveOneOut:
    def test_run_counting_and_aggregates(self):
        cfg = tiny_config(**{"train.iterations": 30, "train.eval_every": 15})
        result = run_leave_one_out(cfg, n_seeds=2)
        assert len(result.runs) == 6  # 3 targets x 2 seeds
        assert sorted(result.per_target) == [0, 1, 2]
        for target in result.per_target:
            accs = [r.best_target_accuracy for t, s, r in result.runs if t == target]
            assert result.per_target[target][0] == pytest.approx(np.mean(accs))
        target_means = [result.per_target[t][0] for t in sorted(result.per_target)]
        assert result.overall[0] == pytest.approx(np.mean(target_means))


class TestLandscapeDemo:
    def test_frozen_fixture_inequalities_and_margin(self):
        report = landscape_demo(n_inits=60, iterations=200)
        assert report.sam_prefers_sharp
        assert report.gap_flags_sharp
        assert report.gap["sharp"] > report.gap["flat"]

    def test_zero_radius_collapses_gap(self):
        report = landscape_demo(rho=0.0, n_inits=10, iterations=20)
        assert report.gap == {"sharp": 0.0, "flat": 0.0}
        assert report.perturbed_loss["sharp"] == report.loss["sharp"]
        assert report.perturbed_loss["flat"] == report.loss["flat"]

    def test_symmetric_wells_split_evenly(self):
        report = landscape_demo(
            wells={"centers": (-1.0, 1.0), "depths": (0.8, 0.8), "widths": (0.3, 0.3)},
            n_inits=200,
            iterations=300,
            require_contrast=False,
        )
        for fraction in report.flat_fraction.values():
            assert fraction == pytest.approx(0.5, abs=0.1)

    def test_contrast_violation_raises(self):
        with pytest.raises(FixtureError):
            landscape_demo(
                wells={"centers": (-1.0, 1.0), "depths": (0.8, 0.8), "widths": (0.3, 0.3)},
                n_inits=10,
                iterations=10,
            )

    def test_vectorized_race_matches_scalar_rules(self):
        # one noise-free step of the race == the scalar rule functions
        obj = make_sharp_flat_landscape()
        hp = HyperParams(rho=0.1, alpha=0.001, lr=0.02)
        inits = np.linspace(-1.6, 1.6, 9)
        for rule in ("sam", "sagm"):
            raced = _race_basins(
                obj, inits, rule, hp, iterations=1, step_size=0.02,
                noise_std=0.0, rng=np.random.default_rng(0),
            )
            for x0, x1 in zip(inits, raced):
                g, _ = GRADIENT_RULES[rule](obj, np.array([x0]), None, hp)
                assert x1 == pytest.approx(x0 - 0.02 * g[0], rel=1e-12, abs=1e-15)


class TestCli:
    def write_config(self, tmp_path, **overrides):
        cfg = tiny_config(**overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg.to_dict()))
        return path

    def test_train_success(self, tmp_path, capsys):
        path = self.write_config(tmp_path)
        out = tmp_path / "run.json"
        assert main(["train", str(path), "--output", str(out)]) == 0
        payload = json.loads(out.read_text())
        assert payload["config"]["optimizer"]["rule"] == "sagm"
        assert "val_acc" in capsys.readouterr().out

    def test_train_validation_error_exit_1(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"optimizer": {"rule": "nope"}}))
        assert main(["train", str(path)]) == 1

    def test_train_malformed_json_exit_1(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["train", str(path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_train_divergence_exit_2(self, tmp_path):
        path = self.write_config(
            tmp_path,
            **{"optimizer.lr": 1e200, "optimizer.weight_decay": 1e200},
        )
        assert main(["train", str(path)]) == 2

    def test_sweep_command(self, tmp_path, capsys):
        cfg = tiny_config()
        sweep_cfg = {"base": cfg.to_dict(), "grid": {"optimizer.alpha": [0.001, 0.0005]}}
        path = tmp_path / "sweep.json"
        path.write_text(json.dumps(sweep_cfg))
        out = tmp_path / "sweep.csv"
        assert main(["sweep", str(path), "--output", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert len(rows) == 3  # header + 2 rows
        assert "selected config_id" in capsys.readouterr().out

    def test_loo_command(self, tmp_path):
        path = self.write_config(tmp_path, **{"train.iterations": 30})
        out_dir = tmp_path / "runs"
        assert main(["loo", str(path), "--seeds", "2", "--output-dir", str(out_dir)]) == 0
        run_files = list(out_dir.glob("target*_seed*.json"))
        assert len(run_files) == 6
        assert (out_dir / "loo_summary.csv").exists()

    def test_sharpness_command(self, tmp_path):
        path = self.write_config(tmp_path)
        run_path = tmp_path / "run.json"
        assert main(["train", str(path), "--output", str(run_path)]) == 0
        out = tmp_path / "profile.csv"
        assert main(["sharpness", str(run_path), "--radii", "0.01,0.05", "--output", str(out)]) == 0
        with open(out, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["rho", "gap", "lambda_max_estimate"]
        assert len(rows) == 3

    def test_landscape_command(self, tmp_path, capsys):
        out = tmp_path / "landscape.json"
        assert main(["landscape", "--rho", "0.1", "--output", str(out)]) == 0
        report = json.loads(out.read_text())
        assert report["sam_prefers_sharp"] is True
        assert "flat basin" in capsys.readouterr().out

    def test_report_command(self, tmp_path, capsys):
        path = self.write_config(tmp_path, **{"train.iterations": 30})
        out_dir = tmp_path / "runs"
        main(["loo", str(path), "--seeds", "2", "--output-dir", str(out_dir)])
        assert main(["report", str(out_dir)]) == 0
        assert (out_dir / "summary.csv").exists()
        assert "target 0" in capsys.readouterr().out

    def test_report_empty_dir_exit_1(self, tmp_path):
        assert main(["report", str(tmp_path)]) == 1
