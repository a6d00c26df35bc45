import json
import subprocess
import sys

import numpy as np
import pytest

from gcrl.checkpoint import CheckpointError, checkpoint_load, checkpoint_save, load_bytes, save_bytes
from gcrl.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, METRIC_FIELDS, WALL_CLOCK_FIELDS, aggregate_cells, main, read_metrics, run_experiment, run_suite
from gcrl.config import ExperimentConfig
from gcrl.agent import CrlAgent
from gcrl.envs import make_spec
from gcrl.trainer import TrainState, agent_config_for

TINY = dict(
    env_id="PointMassCircle", num_envs=4, unroll_length=8, num_timesteps=10_000, min_replay_size=8, max_replay_size=64,
    eval_interval=2_000, eval_episodes=4, hidden_layers=(16,), representation_dimension=8, batch_size=8,
    episode_length=32, utd_denominator=32,
)  # fmt: skip


def tiny(**kw) -> ExperimentConfig:
    return ExperimentConfig(**(TINY | kw))


def flags(cfg: dict) -> list[str]:
    out = []
    for k, v in cfg.items():
        out += [f"--{k}", ",".join(map(str, v)) if isinstance(v, tuple) else str(v)]
    return out


def without_wall_clock(rows):
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_FIELDS} for r in rows]


# ---- train / metrics


def test_tiny_run_writes_metrics_and_report(tmp_path):
    assert main(["train", "--output_dir", str(tmp_path), *flags(TINY)], environ={}) == EXIT_OK
    header = (tmp_path / "metrics.csv").read_text(encoding="utf-8").splitlines()[0]
    assert header == ",".join(METRIC_FIELDS)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) >= 2
    assert [r["step"] for r in rows] == sorted({r["step"] for r in rows})
    report = json.loads((tmp_path / "final_report.json").read_text(encoding="utf-8"))
    assert report["config"] == tiny().to_dict()
    assert report["step"] == rows[-1]["step"] and report["num_evaluations"] == len(rows)
    assert report["build_id"].startswith("0.1.0+g")


def test_rerun_is_identical_except_wall_clock(tmp_path):
    run_experiment(tiny(seed=2), tmp_path / "a")
    run_experiment(tiny(seed=2, num_workers=2), tmp_path / "b")
    a, b = read_metrics(tmp_path / "a" / "metrics.csv"), read_metrics(tmp_path / "b" / "metrics.csv")
    assert without_wall_clock(a) == without_wall_clock(b)


def test_resume_continues_without_duplicates(tmp_path):
    # eval every 2000 and checkpoint every 4000: rows after the last checkpoint are redone
    run_experiment(tiny(num_timesteps=7_000, checkpoint_interval=4_000), tmp_path)
    first = read_metrics(tmp_path / "metrics.csv")
    ckpt_step = checkpoint_load(str(tmp_path / "checkpoint.bin"))[1].env_steps
    assert any(r["step"] > ckpt_step for r in first)
    run_experiment(tiny(checkpoint_interval=4_000), tmp_path, resume=True)
    rows = read_metrics(tmp_path / "metrics.csv")
    steps = [r["step"] for r in rows]
    assert steps == sorted(set(steps))
    assert steps[-1] >= 10_000
    assert [r for r in rows if r["step"] <= ckpt_step] == [r for r in first if r["step"] <= ckpt_step]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gcrl", "train", "--output_dir", str(tmp_path), "--batch_size", "1"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG
    assert "batch_size" in proc.stderr


# ---- checkpoints


def _agent_and_state(cfg):
    spec = make_spec(cfg.env_id, **cfg.env_overrides())
    agent = CrlAgent.create(agent_config_for(cfg, spec), np.random.default_rng(0))
    agent.sa_opt.m[0][...] = 0.5
    agent.actor_opt.t = 7
    return agent, TrainState(env_steps=123, training_transitions=100, gradient_steps=6, iterations=4, evals=1)


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny()
    agent, ts = _agent_and_state(cfg)
    path = str(tmp_path / "c.bin")
    checkpoint_save(agent, ts, cfg, path)
    back, ts2, cfg2 = checkpoint_load(path, cfg)
    assert cfg2 == cfg
    assert (ts2.env_steps, ts2.training_transitions, ts2.gradient_steps, ts2.iterations, ts2.evals) == (123, 100, 6, 4, 1)
    assert back.optimizer_steps() == agent.optimizer_steps()
    a, b = agent.named_arrays(), back.named_arrays()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]), k
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw[:4] == b"GCRL" and int.from_bytes(raw[4:6], "little") == 1


def test_truncated_checkpoint_fails_cleanly(tmp_path):
    cfg = tiny()
    agent, ts = _agent_and_state(cfg)
    path = tmp_path / "c.bin"
    checkpoint_save(agent, ts, cfg, str(path))
    data = path.read_bytes()
    for cut in (3, 20, len(data) // 2, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(CheckpointError):
            checkpoint_load(str(path))
    assert main(["eval", str(path)], environ={}) == EXIT_FAIL


def test_corrupt_and_foreign_files():
    data = save_bytes({"a": 1}, {"w": np.ones(3, np.float32)})
    assert load_bytes(data)[0] == {"a": 1}
    with pytest.raises(CheckpointError, match="magic"):
        load_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        load_bytes(data[:4] + (9).to_bytes(2, "little") + data[6:])
    flipped = bytearray(data)
    flipped[-8] ^= 0xFF
    with pytest.raises(CheckpointError):
        load_bytes(bytes(flipped))


def test_shape_mismatch_names_tensor(tmp_path):
    cfg = tiny()
    agent, ts = _agent_and_state(cfg)
    path = str(tmp_path / "c.bin")
    checkpoint_save(agent, ts, cfg, path)
    with pytest.raises(CheckpointError, match=r"sa_encoder/w0"):
        checkpoint_load(path, tiny(hidden_layers=(32,)))


def test_float64_agents_are_not_checkpointed(tmp_path):
    cfg = tiny()
    agent, ts = _agent_and_state(cfg)
    with pytest.raises(CheckpointError):
        checkpoint_save(agent.astype(np.float64), ts, cfg, str(tmp_path / "c.bin"))


def test_eval_subcommand(tmp_path, capsys):
    cfg = tiny()
    agent, ts = _agent_and_state(cfg)
    checkpoint_save(agent, ts, cfg, str(tmp_path / "c.bin"))
    assert main(["eval", str(tmp_path / "c.bin"), "--episodes", "4"], environ={}) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["step"] == 123 and 0 <= out["success_rate"] <= 1


# ---- suite


def test_teleport_suite(tmp_path):
    suite = tmp_path / "suite.ini"
    suite.write_text("[suite]\nenvs = PointMassCircle\nseeds = 0 1 2 3\nagent = teleport\nteleport_step = 32\n"
                     "[overrides]\nepisode_length = 128\neval_episodes = 8\n", encoding="utf-8")  # fmt: skip
    status, report = run_suite(suite, tmp_path / "out")
    assert status == EXIT_OK
    (row,) = report["rows"]
    assert row["success_rate"] == 1.0 and row["success_rate_stderr"] == 0.0
    assert row["time_near_goal"] == (128 - 32) / 128
    on_disk = json.loads((tmp_path / "out" / "suite_report.json").read_text(encoding="utf-8"))
    assert on_disk["rows"] == report["rows"]
    assert "PointMassCircle" in (tmp_path / "out" / "suite_report.txt").read_text(encoding="utf-8")


def test_suite_iqm_through_files(tmp_path):
    suite = tmp_path / "suite.ini"
    suite.write_text("[suite]\nenvs = PointMassCircle\nseeds = 0 1 2 3\nagent = teleport\n"
                     "[overrides]\nepisode_length = 64\neval_episodes = 4\n", encoding="utf-8")  # fmt: skip
    _, report = run_suite(suite, tmp_path / "out")
    # two seeds rewritten on disk to a final success of 0, giving values [0, 0, 1, 1]
    for cell in report["cells"][:2]:
        path = tmp_path / "out" / "PointMassCircle" / f"seed_{cell['seed']}" / "metrics.csv"
        text = path.read_text(encoding="utf-8").splitlines()
        fields = text[-1].split(",")
        fields[METRIC_FIELDS.index("success_rate")] = "0.0"
        path.write_text("\n".join(text[:-1] + [",".join(fields)]) + "\n", encoding="utf-8")
    (row,) = aggregate_cells(["PointMassCircle"], report["cells"])
    assert sorted(row["success_rate_per_seed"]) == [0.0, 0.0, 1.0, 1.0]
    assert row["success_rate"] == 0.5
    # kept values [0, 1]: sample std sqrt(1/2) over sqrt(2)
    assert row["success_rate_stderr"] == pytest.approx(0.5, abs=1e-15)


def test_failed_cell_is_recorded_and_suite_continues(tmp_path):
    suite = tmp_path / "suite.ini"
    suite.write_text("[suite]\nenvs = PointMassCircle PointReacher\nseeds = 0\nagent = teleport\n"
                     "[overrides]\neval_episodes = 2\nepisode_length = 16\n[env:PointMassCircle]\ngoal_radius = -1\n", encoding="utf-8")  # fmt: skip
    assert main(["suite", str(suite), "--output_dir", str(tmp_path / "out")], environ={}) == EXIT_FAIL
    report = json.loads((tmp_path / "out" / "suite_report.json").read_text(encoding="utf-8"))
    status = {c["env_id"]: c["status"] for c in report["cells"]}
    assert status["PointMassCircle"].startswith("failed") and status["PointReacher"] == "ok"


def test_exit_codes(tmp_path):
    assert main(["train", "--output_dir", str(tmp_path), "--batch_size", "1"], environ={}) == EXIT_CONFIG
    assert main(["frobnicate"], environ={}) == EXIT_CONFIG
    assert main(["train", "--output_dir", str(tmp_path)], environ={"GCRL_SEED": "x"}) == EXIT_CONFIG
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["train", "--output_dir", str(blocker / "sub"), *flags(TINY)], environ={}) == EXIT_FAIL


def test_bench_subcommand(tmp_path, capsys):
    out = tmp_path / "bench.json"
    argv = ["bench", "--env_counts", "1,2", "--iterations", "2", "--json", str(out), *flags(TINY)]
    assert main(argv, environ={}) == EXIT_OK
    rows = json.loads(out.read_text(encoding="utf-8"))
    assert [r["env_steps"] for r in rows] == [1 * 8 * 2, 2 * 8 * 2]
    assert "steps/s" in capsys.readouterr().out
