"""Harness behaviour: config handling, metrics persistence, checkpoint and
resume fidelity, the training/transfer drivers, the distance-vs-divergence
table, the estimator selfcheck battery and the CLI boundary."""

import json
import math
import os
from collections import deque

import numpy as np
import pytest
import yaml

from wdhrl import harness
from wdhrl.cli import main as cli_main
from wdhrl.config import TrainConfig, config_from_dict, load_config, save_config
from wdhrl.envs import make_env
from wdhrl.errors import ConfigError, DomainError, TrainingAborted
from wdhrl.harness import (
    MetricsWriter,
    build_agent,
    load_checkpoint,
    metric_columns,
    metrics_payload,
    read_metrics,
    save_checkpoint,
    wd_js_table,
)
from wdhrl.ot import OtParams

TINY = dict(total_timesteps=1000, steps_per_update=200, hidden=(8,),
            master_hidden=(8,), feature_count=16, rollout_states=8,
            batch_per_state=2, state_pool_window=64,
            ot=OtParams(smoothing=0.1, step_size=0.01, rounds=50,
                        eval_samples=32),
            checkpoint_every=2, task_period_episodes=2,
            transfer_updates=2, transfer_steps_per_update=150)


def tiny_cfg(**overrides) -> TrainConfig:
    kw = dict(TINY)
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    """One fully trained tiny run shared by the read-only tests."""
    out = tmp_path_factory.mktemp("trained")
    cfg = tiny_cfg()
    art = harness.train(cfg, str(out / "run"))
    return cfg, art


class TestConfig:
    def test_hash_depends_on_content_only(self):
        assert tiny_cfg().hash() == tiny_cfg().hash()
        assert tiny_cfg().hash() != tiny_cfg(alpha=0.3).hash()

    def test_replace_returns_modified_copy(self):
        base = tiny_cfg()
        other = base.replace(seed=9)
        assert other.seed == 9 and base.seed == 0
        assert other.replace(seed=0).hash() == base.hash()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match=r"unknown config keys: \['sedd'\]"):
            config_from_dict({"sedd": 1})
        with pytest.raises(ConfigError, match=r"unknown ot config keys: \['beta'\]"):
            config_from_dict({"ot": {"beta": 0.1}})

    def test_from_dict_builds_nested_ot(self):
        cfg = config_from_dict({"ot": {"smoothing": 0.2, "rounds": 7}})
        assert isinstance(cfg.ot, OtParams)
        assert cfg.ot.smoothing == 0.2 and cfg.ot.rounds == 7

    def test_yaml_and_json_files_round_trip(self, tmp_path):
        cfg = tiny_cfg(alpha=0.25, seed=3)
        jpath = tmp_path / "c.json"
        save_config(cfg, str(jpath))
        assert load_config(str(jpath)).hash() == cfg.hash()
        ypath = tmp_path / "c.yaml"
        ypath.write_text(yaml.safe_dump(cfg.to_dict()))
        assert load_config(str(ypath)).hash() == cfg.hash()

    def test_file_overrides_win(self, tmp_path):
        path = tmp_path / "c.json"
        save_config(tiny_cfg(alpha=0.25), str(path))
        cfg = load_config(str(path), {"alpha": 0.75, "seed": 11})
        assert cfg.alpha == 0.75 and cfg.seed == 11

    def test_non_mapping_config_rejected(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigError, match="config root must be a mapping"):
            load_config(str(path))

    def test_field_validation(self):
        with pytest.raises(ConfigError, match="unknown env"):
            TrainConfig(env="cartpole")
        with pytest.raises(ConfigError, match="K must be >= 1"):
            TrainConfig(K=0)
        with pytest.raises(ConfigError, match="alpha must be >= 0"):
            TrainConfig(alpha=-0.1)
        with pytest.raises(ConfigError, match="unknown regularizer"):
            TrainConfig(regularizer="l2")
        with pytest.raises(ConfigError, match="clip_ratio"):
            TrainConfig(clip_ratio=1.5)
        with pytest.raises(ConfigError, match="entropy coefficients"):
            TrainConfig(entropy_coef=-1e-3)


class TestMetricsIO:
    COLS = ["run_id", "update", "timestep", "mean_return"]

    def test_round_trip_preserves_floats_exactly(self, tmp_path):
        path = str(tmp_path / "m.csv")
        w = MetricsWriter(path, self.COLS)
        val = 0.1 + 0.2  # not representable as a short decimal
        w.write({"run_id": "abc", "update": 1, "timestep": 10, "mean_return": val})
        w.write({"run_id": "abc", "update": 2, "timestep": 20, "mean_return": -1.5})
        w.close()
        cols = read_metrics(path)
        assert list(cols["run_id"]) == ["abc", "abc"]
        assert cols["mean_return"][0] == val
        np.testing.assert_array_equal(cols["timestep"], [10.0, 20.0])

    def test_timestep_must_strictly_increase(self, tmp_path):
        w = MetricsWriter(str(tmp_path / "m.csv"), self.COLS)
        w.write({"run_id": "a", "update": 1, "timestep": 5, "mean_return": 0.0})
        with pytest.raises(DomainError, match="does not advance past 5"):
            w.write({"run_id": "a", "update": 2, "timestep": 5, "mean_return": 0.0})
        w.close()

    def test_resume_appends_and_keeps_the_guard(self, tmp_path):
        path = str(tmp_path / "m.csv")
        w = MetricsWriter(path, self.COLS)
        w.write({"run_id": "a", "update": 1, "timestep": 5, "mean_return": 0.0})
        w.close()
        w = MetricsWriter(path, self.COLS, resume=True)
        with pytest.raises(DomainError, match="does not advance past 5"):
            w.write({"run_id": "a", "update": 2, "timestep": 4, "mean_return": 0.0})
        w.write({"run_id": "a", "update": 2, "timestep": 6, "mean_return": 1.0})
        w.close()
        assert len(read_metrics(path)["timestep"]) == 2

    def test_resume_rejects_schema_change(self, tmp_path):
        path = str(tmp_path / "m.csv")
        MetricsWriter(path, self.COLS).close()
        with pytest.raises(ConfigError, match="different column schema"):
            MetricsWriter(path, self.COLS + ["extra"], resume=True)

    def test_header_only_file_reads_as_empty_columns(self, tmp_path):
        path = str(tmp_path / "m.csv")
        MetricsWriter(path, self.COLS).close()
        cols = read_metrics(path)
        assert set(cols) == set(self.COLS)
        assert all(len(v) == 0 for v in cols.values())

    def test_payload_strips_run_id_only(self, tmp_path):
        path = str(tmp_path / "m.csv")
        w = MetricsWriter(path, self.COLS)
        w.write({"run_id": "deadbeef", "update": 1, "timestep": 3,
                 "mean_return": 0.25})
        w.close()
        payload = metrics_payload(path).decode()
        assert "deadbeef" not in payload
        assert payload.splitlines()[0] == "update,timestep,mean_return"
        assert payload.splitlines()[1] == "1,3,0.25"

    def test_metric_columns_layout(self):
        cols = metric_columns(2)
        assert cols[:5] == ["run_id", "update", "timestep", "episodes",
                            "mean_return"]
        assert "wd_0_1" in cols and "wd_min_0" in cols and "wd_min_1" in cols
        for k in (0, 1):
            for suffix in ("loss", "value_loss", "entropy", "reg", "steps"):
                assert f"sub{k}_{suffix}" in cols
        assert cols[-2:] == ["clamp_events", "pool_size"]


class TestTrain:
    def test_artifacts_and_schedule(self, trained):
        cfg, art = trained
        assert art.run_id == cfg.hash()
        assert art.updates == 5 and art.timesteps == 1000
        cols = read_metrics(art.metrics_path)
        assert len(cols["update"]) == 5
        np.testing.assert_array_equal(cols["timestep"], [200, 400, 600, 800, 1000])
        assert art.final_return == cols["mean_return"][-1]
        assert set(cols) == set(metric_columns(cfg.K))
        manifest = json.load(open(art.manifest_path))
        assert manifest["run_id"] == cfg.hash()
        assert manifest["mode"] == "train"
        assert manifest["config"] == cfg.to_dict()
        # initial, every-2, and final checkpoints
        names = sorted(os.listdir(art.checkpoint_dir))
        assert names == ["update0.ckpt", "update2.ckpt", "update4.ckpt",
                         "update5.ckpt"]
        assert art.last_checkpoint.endswith("update5.ckpt")

    def test_bitwise_deterministic(self, trained, tmp_path):
        cfg, art = trained
        art2 = harness.train(tiny_cfg(), str(tmp_path / "again"))
        assert open(art.metrics_path, "rb").read() == \
            open(art2.metrics_path, "rb").read()

    def test_alpha_zero_equals_regularizer_free(self, tmp_path):
        """Three configs that must walk the identical training path: the
        diversity term switched off by weight, by name, and by both."""
        budget = dict(total_timesteps=600)
        a = harness.train(tiny_cfg(alpha=0.0, regularizer="wd", **budget),
                          str(tmp_path / "a"))
        b = harness.train(tiny_cfg(alpha=0.0, regularizer="none", **budget),
                          str(tmp_path / "b"))
        c = harness.train(tiny_cfg(alpha=0.5, regularizer="none", **budget),
                          str(tmp_path / "c"))
        pa = metrics_payload(a.metrics_path)
        assert pa == metrics_payload(b.metrics_path)
        assert pa == metrics_payload(c.metrics_path)

    def test_resume_matches_uninterrupted_run(self, trained, tmp_path):
        cfg, art = trained
        short = harness.train(tiny_cfg(total_timesteps=400),
                              str(tmp_path / "resumed"))
        resumed = harness.train(tiny_cfg(), str(tmp_path / "resumed"),
                                resume_from=short.last_checkpoint)
        assert resumed.updates == 5 and resumed.timesteps == 1000
        assert metrics_payload(resumed.metrics_path) == \
            metrics_payload(art.metrics_path)

    def test_resume_rejects_changed_training_fields(self, trained, tmp_path):
        cfg, art = trained
        with pytest.raises(ConfigError, match="different training configuration"):
            harness.train(tiny_cfg(lr=1e-3), str(tmp_path / "r"),
                          resume_from=art.last_checkpoint)

    def test_zero_budget_run(self, tmp_path):
        art = harness.train(tiny_cfg(total_timesteps=0), str(tmp_path / "z"))
        assert art.updates == 0 and art.timesteps == 0
        assert math.isnan(art.final_return)
        cols = read_metrics(art.metrics_path)
        assert all(len(v) == 0 for v in cols.values())
        assert os.path.exists(os.path.join(art.checkpoint_dir, "update0.ckpt"))

    def test_non_finite_parameters_abort_with_rescue_checkpoint(self, tmp_path):
        cfg = tiny_cfg()
        env = make_env(cfg.env, seed=cfg.seed)
        env.reset()
        agent = build_agent(cfg, env)
        flat = agent.master.get_flat()
        flat[0] = np.inf
        agent.master.set_flat(flat)
        counters = {"update": 3, "timesteps": 600, "episodes": 12}
        reservoirs = [deque(maxlen=8) for _ in range(cfg.K)]
        with pytest.raises(TrainingAborted, match="non-finite parameters in master "
                                                  "at update 3") as err:
            harness._check_finite(agent, 3, str(tmp_path), cfg, counters, env,
                                  reservoirs)
        assert os.path.exists(err.value.checkpoint)
        assert err.value.checkpoint.endswith("abort_update3.ckpt")


class TestCheckpoint:
    def test_round_trip_restores_everything(self, trained, tmp_path):
        cfg, art = trained
        env = make_env(cfg.env, seed=cfg.seed)
        agent, counters, header = load_checkpoint(art.last_checkpoint, cfg, env)
        assert counters == {"update": 5, "timesteps": 1000, "episodes": 20}
        assert agent.update_counter == 5
        assert header["config_hash"] == cfg.hash()
        # env task schedule restored: 20 episodes at period 2 -> 10 tasks
        assert env._episodes == 20 and env._tasks == 10
        # save again from the restored state: identical bytes modulo nothing
        path2 = str(tmp_path / "again.ckpt")
        save_checkpoint(path2, agent, cfg, counters, env)
        agent2, _, _ = load_checkpoint(path2, cfg, env)
        for k in range(cfg.K):
            np.testing.assert_array_equal(agent.subs[k].get_flat(),
                                          agent2.subs[k].get_flat())
        np.testing.assert_array_equal(agent.master.get_flat(),
                                      agent2.master.get_flat())

    def test_reservoirs_round_trip(self, tmp_path):
        cfg = tiny_cfg()
        env = make_env(cfg.env, seed=0)
        env.reset()
        agent = build_agent(cfg, env)
        reservoirs = [deque(maxlen=16) for _ in range(cfg.K)]
        rng = np.random.default_rng(0)
        for k in range(cfg.K):
            for _ in range(3 + k):
                reservoirs[k].append(rng.normal(size=env.obs_dim))
        path = str(tmp_path / "r.ckpt")
        counters = {"update": 0, "timesteps": 0, "episodes": 0}
        save_checkpoint(path, agent, cfg, counters, env, reservoirs)
        restored = [deque(maxlen=16) for _ in range(cfg.K)]
        load_checkpoint(path, cfg, env, restored)
        for k in range(cfg.K):
            assert len(restored[k]) == 3 + k
            np.testing.assert_array_equal(np.asarray(restored[k]),
                                          np.asarray(reservoirs[k]))

    def test_k_mismatch_rejected(self, trained):
        cfg, art = trained
        env = make_env(cfg.env, seed=0)
        with pytest.raises(ConfigError, match="checkpoint has K=2, config wants K=3"):
            load_checkpoint(art.last_checkpoint, tiny_cfg(K=3), env)

    def test_env_dimension_mismatch_rejected(self, trained):
        cfg, art = trained
        other = tiny_cfg(env="point_reach")
        env = make_env("point_reach", seed=0)
        with pytest.raises(ConfigError, match="do not match the configured env"):
            load_checkpoint(art.last_checkpoint, other, env)

    def test_foreign_file_rejected(self, tmp_path):
        from wdhrl.nets import save_arrays
        path = str(tmp_path / "other.ckpt")
        save_arrays(path, {"kind": "something_else"}, {"x": np.zeros(3)})
        with pytest.raises(ConfigError, match="not an agent checkpoint"):
            load_checkpoint(path, tiny_cfg(), make_env("movement_bandits"))


class TestTransferEval:
    def test_frozen_subpolicies_and_fresh_schedule(self, trained, tmp_path):
        cfg, art = trained
        env = make_env(cfg.env, seed=cfg.seed)
        source, _, _ = load_checkpoint(art.last_checkpoint, cfg, env)
        out = str(tmp_path / "transfer")
        t_art = harness.transfer_eval(art.last_checkpoint, cfg, out)
        assert t_art.updates == cfg.transfer_updates
        cols = read_metrics(t_art.metrics_path)
        assert len(cols["update"]) == cfg.transfer_updates
        manifest = json.load(open(t_art.manifest_path))
        assert manifest["mode"] == "transfer"
        assert manifest["source_checkpoint"] == art.last_checkpoint
        adapted, _, _ = load_checkpoint(t_art.last_checkpoint, cfg,
                                        make_env(cfg.env, seed=cfg.seed))
        for k in range(cfg.K):
            np.testing.assert_array_equal(source.subs[k].get_flat(),
                                          adapted.subs[k].get_flat())
        # the master was reinitialized and then trained, so it moved
        assert not np.array_equal(source.master.get_flat(),
                                  adapted.master.get_flat())

    def test_transfer_is_deterministic(self, trained, tmp_path):
        cfg, art = trained
        a = harness.transfer_eval(art.last_checkpoint, cfg, str(tmp_path / "a"))
        b = harness.transfer_eval(art.last_checkpoint, cfg, str(tmp_path / "b"))
        assert open(a.metrics_path, "rb").read() == \
            open(b.metrics_path, "rb").read()


class TestWdJsTable:
    def test_reference_values(self):
        rows = wd_js_table([0.0, 0.25, 0.5, 1.0, 2.0])
        for row in rows:
            assert row["wd"] == pytest.approx(row["offset"], abs=1e-12)
        assert rows[0]["js"] == pytest.approx(0.0, abs=1e-12)
        for row in rows[1:]:
            assert row["js"] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_negative_offset_rejected(self):
        with pytest.raises(DomainError, match=r"offsets must be >= 0"):
            wd_js_table([0.5, -0.1])

    def test_csv_output(self, tmp_path):
        path = str(tmp_path / "table.csv")
        wd_js_table([0.0, 1.0], out_csv=path)
        lines = open(path).read().splitlines()
        assert lines[0] == "offset,wd,js"
        offset, wd, js = (float(tok) for tok in lines[2].split(","))
        assert (offset, wd) == (1.0, 1.0)
        assert js == pytest.approx(math.log(2.0), abs=1e-12)


class TestSelfcheck:
    def test_battery_shape_and_outcome(self):
        report = harness.selfcheck(seed=0)
        names = [s["name"] for s in report["suites"]]
        assert names == ["identical_measures", "lp_oracle", "quantile_1d",
                         "gaussian_cloud", "bias_sweep"]
        assert all(isinstance(s["passed"], bool) for s in report["suites"])
        assert report["all_passed"] is True


class TestSweepAndPlot:
    def test_sweep_grid_and_summary(self, tmp_path):
        base = tiny_cfg(total_timesteps=400)
        results = harness.sweep(base, str(tmp_path / "sweep"),
                                alphas=(0.0, 0.5), seeds=(0,))
        assert [r["alpha"] for r in results] == [0.0, 0.5]
        summary = open(str(tmp_path / "sweep" / "sweep_summary.csv")).read()
        lines = summary.splitlines()
        assert lines[0] == "alpha,seed,run_id,final_return,out_dir"
        assert len(lines) == 3

    def test_plot_writes_png(self, trained, tmp_path):
        cfg, art = trained
        out = str(tmp_path / "curves.png")
        assert harness.plot_run(art.metrics_path, out) == out
        assert os.path.getsize(out) > 0

    def test_sliding_mean(self):
        x = np.array([1.0, 3.0, 5.0, 7.0])
        np.testing.assert_allclose(harness.sliding_mean(x, 2),
                                   [1.0, 2.0, 4.0, 6.0])
        np.testing.assert_array_equal(harness.sliding_mean(x, 1), x)


class TestCli:
    def _write_cfg(self, tmp_path, **overrides):
        path = str(tmp_path / "cfg.yaml")
        with open(path, "w") as fh:
            yaml.safe_dump(tiny_cfg(**overrides).to_dict(), fh)
        return path

    def test_train_smoke(self, tmp_path, capsys):
        cfg_path = self._write_cfg(tmp_path, total_timesteps=400)
        rc = cli_main(["train", "--config", cfg_path,
                       "--out-dir", str(tmp_path / "run")])
        out = capsys.readouterr().out
        assert rc == 0
        assert "2 updates, 400 steps" in out
        assert os.path.exists(str(tmp_path / "run" / "metrics.csv"))

    def test_transfer_eval_smoke(self, trained, tmp_path, capsys):
        cfg, art = trained
        cfg_path = self._write_cfg(tmp_path)
        rc = cli_main(["transfer-eval", "--config", cfg_path,
                       "--checkpoint", art.last_checkpoint,
                       "--out-dir", str(tmp_path / "adapt")])
        assert rc == 0
        assert "2 master updates" in capsys.readouterr().out

    def test_wd_vs_js_smoke(self, tmp_path, capsys):
        out_csv = str(tmp_path / "t.csv")
        rc = cli_main(["wd-vs-js", "--offsets", "0,1", "--out", out_csv])
        assert rc == 0
        assert os.path.exists(out_csv)
        assert "offset" in capsys.readouterr().out

    def test_selfcheck_smoke(self, tmp_path, capsys):
        out_json = str(tmp_path / "report.json")
        rc = cli_main(["selfcheck", "--seed", "0", "--out", out_json])
        out = capsys.readouterr().out
        assert rc == 0
        assert "all passed" in out
        report = json.load(open(out_json))
        assert report["all_passed"] is True

    def test_plot_smoke(self, trained, tmp_path):
        cfg, art = trained
        rc = cli_main(["plot", "--metrics", art.metrics_path,
                       "--out", str(tmp_path / "p.png")])
        assert rc == 0
        assert os.path.getsize(str(tmp_path / "p.png")) > 0

    def test_config_error_exits_2_with_json(self, tmp_path, capsys):
        bad = str(tmp_path / "bad.yaml")
        open(bad, "w").write("not_a_real_key: 1\n")
        rc = cli_main(["train", "--config", bad, "--out-dir", str(tmp_path / "x")])
        err = capsys.readouterr().err
        assert rc == 2
        payload = json.loads(err.strip())
        assert payload["error"] == "ConfigError"
        assert "unknown config keys" in payload["message"]

    def test_other_errors_exit_1_with_json(self, tmp_path, capsys):
        rc = cli_main(["train", "--config", str(tmp_path / "missing.yaml"),
                       "--out-dir", str(tmp_path / "x")])
        err = capsys.readouterr().err
        assert rc == 1
        assert json.loads(err.strip())["error"] == "FileNotFoundError"
