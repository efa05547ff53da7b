from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest

from reflectplan import cli, harness
from reflectplan.config import ExperimentConfig, from_dict, load_config, validate
from reflectplan.errors import ConfigError, CorruptLog

SMALL = {"t_max": 6, "episodes": 2, "seed": 3}


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


# -- configuration ---------------------------------------------------------------


def test_bundled_config_loads_and_validates():
    cfg = load_config("semisim-v1")
    assert (cfg.alpha, cfg.beta, cfg.n_candidates, cfg.buffer_size) == (0.3, 0.7, 3, 3)
    assert from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize(
    "override",
    [
        {"n_candidates": 0},
        {"buffer_size": 0},
        {"alpha": 0.0, "beta": 0.0},
        {"alpha": -0.1},
        {"discount": 1.5},
        {"temperature": 0.0},
        {"ablations": ["no_planning"]},
        {"actor": "llm"},
        {"wm_mode": "psychic"},
        {"env": {"gamma": 2.0}},
        {"unknown_key": 1},
        {"llm": {"bogus": 1}},
    ],
)
def test_invalid_configs_are_rejected(override):
    with pytest.raises(ConfigError):
        load_config("semisim-v1", override)


def test_missing_and_malformed_config_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "nope"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(str(bad))
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_baseline_overrides_ablations():
    cfg = validate(ExperimentConfig(baseline="static_hold", ablations=("no_world_model",)))
    assert cfg.ablations == ()
    loop = cfg.loop_config()
    assert loop.n_candidates == 1 and loop.no_world_model and loop.no_retro_rl


def test_episode_seeds_are_shared_and_distinct():
    seeds = [harness.episode_seed(0, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [harness.episode_seed(0, i) for i in range(50)]
    assert harness.episode_seed(1, 0) != seeds[0]


# -- runs and analysis -----------------------------------------------------------


def test_run_layout_and_analyze_purity(tmp_path):
    res = harness.run(ExperimentConfig(**SMALL), tmp_path)
    run = res.run_dir
    for name in ("config.json", "metrics.csv", "signals.csv", "correlation.csv", "loss-trajectory.csv"):
        assert (run / name).is_file()
    assert sorted(p.name for p in (run / "episodes").iterdir()) == ["episode-000.jsonl", "episode-001.jsonl"]
    before = {p: p.read_bytes() for p in run.rglob("*") if p.is_file()}
    harness.analyze(run)
    assert {p: p.read_bytes() for p in run.rglob("*") if p.is_file()} == before

    updates = sum(len(log.updates) for log in res.logs)
    assert len((run / "loss-trajectory.csv").read_text().splitlines()) == updates + 1


def test_run_is_reproducible_from_its_config_snapshot(tmp_path):
    first = harness.run(ExperimentConfig(**SMALL), tmp_path / "a")
    again = harness.run(load_config(str(first.run_dir / "config.json")), tmp_path / "b")
    for name in ("episode-000.jsonl", "episode-001.jsonl"):
        assert (first.run_dir / "episodes" / name).read_bytes() == (again.run_dir / "episodes" / name).read_bytes()
    assert (first.run_dir / "metrics.csv").read_bytes() == (again.run_dir / "metrics.csv").read_bytes()


def test_parallel_workers_match_serial(tmp_path):
    serial = harness.run(ExperimentConfig(**SMALL), tmp_path / "s")
    parallel = harness.run(ExperimentConfig(**SMALL, workers=2), tmp_path / "p")
    assert [log.to_jsonl() for log in serial.logs] == [log.to_jsonl() for log in parallel.logs]


def test_truncated_log_is_reported(tmp_path):
    run = harness.run(ExperimentConfig(**SMALL), tmp_path).run_dir
    path = run / "episodes" / "episode-001.jsonl"
    lines = path.read_text().splitlines()
    path.write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(CorruptLog, match="episode-001"):
        harness.analyze(run)
    path.write_text("\n".join(lines[:3]) + "\n" + lines[3][:20] + "\n")
    with pytest.raises(CorruptLog) as err:
        harness.analyze(run)
    assert err.value.line == 4


def test_no_world_model_arm_runs_no_rollouts(tmp_path):
    res = harness.run(ExperimentConfig(**SMALL, ablations=("no_world_model",)), tmp_path)
    for log in res.logs:
        assert log.header["world_model"] is None
        assert all(c["r_wm"] is None for s in log.steps for c in s["candidates"])


def test_learned_world_model_run(tmp_path):
    cfg = ExperimentConfig(**{**SMALL, "episodes": 1}, wm_mode="learned", wm_train_episodes=4)
    res = harness.run(cfg, tmp_path)
    assert (res.run_dir / "checkpoints" / "world_model.json").is_file()
    assert res.logs[0].header["world_model"] == "learned"


def test_sweep_over_k(tmp_path):
    root, rows = harness.sweep(ExperimentConfig(**SMALL), "K", [1, 3, 6], tmp_path)
    assert [r["value"] for r in rows] == [1, 3, 6]
    assert [r["mean_updates"] for r in rows] == [6.0, 2.0, 1.0]
    assert len((root / "sweep-K.csv").read_text().splitlines()) == 4
    with pytest.raises(ValueError):
        harness.sweep(ExperimentConfig(**SMALL), "T", [1], tmp_path)
    with pytest.raises(ValueError):
        harness.sweep(ExperimentConfig(**SMALL), "K", [], tmp_path)


def test_ablation_summary(tmp_path):
    root, summary = harness.ablate(ExperimentConfig(**SMALL), ["no_retro_rl"], tmp_path)
    assert [r["arm"] for r in summary] == ["full", "no_retro_rl"]
    assert summary[0]["full_minus_arm"] == 0.0
    assert (root / "ablation.csv").is_file()


# -- command line ----------------------------------------------------------------


def _main(argv, capsys):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_cli_run_and_analyze(tmp_path, small_config, capsys):
    code, out, _ = _main(["run", "--config", small_config, "--out", str(tmp_path)], capsys)
    assert code == 0
    run = Path(out.strip().splitlines()[-1])
    assert (run / "metrics.csv").is_file()
    assert _main(["analyze", str(run)], capsys)[0] == 0


def test_cli_validate_config(small_config, capsys):
    code, out, _ = _main(["validate-config", "--config", small_config, "--seed", "9"], capsys)
    assert code == 0
    cfg = json.loads(out)
    assert cfg["seed"] == 9 and cfg["t_max"] == 6


def test_cli_sweep(tmp_path, small_config, capsys):
    code, out, _ = _main(["sweep", "--config", small_config, "--param", "N", "--values", "1,2", "--out", str(tmp_path)], capsys)
    assert code == 0
    assert [json.loads(line)["value"] for line in out.splitlines()[:2]] == [1, 2]


def test_cli_usage_errors(tmp_path, small_config, capsys):
    assert _main(["sweep", "--config", small_config, "--param", "N", "--values", ",", "--out", str(tmp_path)], capsys)[0] == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--param", "N", "--values", "a,b"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_cli_config_error(capsys):
    code, _, err = _main(["validate-config", "--config", "no-such-config"], capsys)
    assert code == 3 and "config error" in err


def test_cli_corrupt_log(tmp_path, capsys):
    (tmp_path / "episodes").mkdir()
    (tmp_path / "episodes" / "episode-000.jsonl").write_text('{"type": "header"}\n{"type": "st')
    code, _, err = _main(["analyze", str(tmp_path)], capsys)
    assert code == 4 and ":2" in err


def test_cli_adapter_unavailable(tmp_path, capsys):
    cfg = {**SMALL, "episodes": 1, "actor": "llm", "llm": {"endpoint": "http://127.0.0.1:9/v1", "retries": 0, "timeout": 1.0}}
    path = tmp_path / "llm.json"
    path.write_text(json.dumps(cfg))
    code, _, err = _main(["run", "--config", str(path), "--out", str(tmp_path / "runs")], capsys)
    assert code == 5 and "llm unavailable" in err


def test_cli_io_error(tmp_path, small_config, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = _main(["run", "--config", small_config, "--out", str(blocker / "runs")], capsys)
    assert code == 7 and "i/o error" in err


def test_cli_ablate_named_flag(tmp_path, small_config, capsys):
    code, out, _ = _main(["ablate", "no_world_model", "--config", small_config, "--out", str(tmp_path)], capsys)
    assert code == 0
    arms = [json.loads(line)["arm"] for line in out.splitlines() if line.startswith("{")]
    assert arms == ["full", "no_world_model"]


def test_replace_keeps_config_frozen():
    cfg = ExperimentConfig()
    assert replace(cfg, seed=5).seed == 5 and cfg.seed == 0
