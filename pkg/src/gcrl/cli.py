"""Command-line front end: train, bench, suite and eval.

Exit codes: 0 success, 1 runtime or I/O failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .checkpoint import CheckpointError, checkpoint_load, checkpoint_save
from .config import ConfigError, ExperimentConfig, add_config_flags, build_config, config_from_namespace, parse_value
from .envs import make_spec
from .trainer import EvalReport, TeleportAgent, evaluate, format_bench, iqm, iqm_stderr, throughput_bench, train

log = logging.getLogger("gcrl")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

METRIC_FIELDS = (
    "step", "wall_clock_seconds", "success_rate", "time_near_goal",
    "critic_loss", "actor_loss", "entropy_coef", "steps_per_second",
)  # fmt: skip
WALL_CLOCK_FIELDS = ("wall_clock_seconds", "steps_per_second")
CHECKPOINT_NAME = "checkpoint.bin"


def build_id() -> str:
    """Version plus a git-style SHA-1 over the package sources."""
    h = hashlib.sha1()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        data = path.read_bytes()
        h.update(f"blob {len(data)}\0".encode() + data)
    return f"{__version__}+g{h.hexdigest()[:12]}"


def metrics_row(r: EvalReport) -> dict[str, Any]:
    return {k: getattr(r, k) for k in METRIC_FIELDS}


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)  # shortest round-trip form, always '.' decimal
    return str(v)


def read_metrics(path: str | Path) -> list[dict[str, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({k: (int(row[k]) if k == "step" else float(row[k])) for k in METRIC_FIELDS})
    return rows


def _rewrite_metrics(path: Path, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])


def run_experiment(config: ExperimentConfig, output_dir: str | Path, resume: bool = False) -> int:
    """Train, appending one metrics.csv row per evaluation, then write final_report.json."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.csv"
    ckpt_path = out / CHECKPOINT_NAME
    agent = start = None
    if resume and ckpt_path.exists():
        agent, start, _ = checkpoint_load(str(ckpt_path), config)
        # rows logged after the checkpoint will be produced again
        kept = [r for r in read_metrics(metrics_path) if r["step"] <= start.env_steps] if metrics_path.exists() else []
        _rewrite_metrics(metrics_path, kept)
        log.info("resuming from step %d", start.env_steps)
    else:
        _rewrite_metrics(metrics_path, [])
    next_ckpt = [0]
    if config.checkpoint_interval > 0:
        base = start.env_steps if start else 0
        next_ckpt[0] = (base // config.checkpoint_interval + 1) * config.checkpoint_interval

    def on_report(r: EvalReport, ag, ts) -> None:
        with open(metrics_path, "a", newline="", encoding="utf-8") as fh:
            csv.writer(fh, lineterminator="\n").writerow([_fmt(v) for v in metrics_row(r).values()])
        if config.checkpoint_interval > 0 and r.step >= next_ckpt[0]:
            checkpoint_save(ag, ts, config, str(ckpt_path))
            next_ckpt[0] = (r.step // config.checkpoint_interval + 1) * config.checkpoint_interval

    reports = train(config, on_report=on_report, agent=agent, start=start)
    final = reports[-1]
    report = metrics_row(final)
    report.update(
        gradient_steps=final.gradient_steps,
        num_evaluations=len(read_metrics(metrics_path)),
        config=config.to_dict(),
        build_id=build_id(),
    )
    (out / "final_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def run_scripted(config: ExperimentConfig, output_dir: str | Path, teleport_step: int = 0) -> int:
    """Evaluate the teleporting scripted agent once and log it like a training run."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = make_spec(config.env_id, **config.env_overrides())
    sr, tng = evaluate(TeleportAgent(spec, teleport_step), spec, config.eval_episodes, config.seed)
    r = EvalReport(step=0, success_rate=sr, time_near_goal=tng, steps_per_second=0.0, wall_clock_seconds=0.0)
    _rewrite_metrics(out / "metrics.csv", [metrics_row(r)])
    report = metrics_row(r) | {"config": config.to_dict(), "build_id": build_id(), "agent": "teleport"}
    (out / "final_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------- suite


def read_suite(path: str | Path) -> dict[str, Any]:
    """Suite file: ``[suite]`` with envs, seeds, preset, agent; ``[overrides]``
    for every cell; ``[env:<EnvId>]`` for per-env overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if not cp.has_section("suite"):
        raise ConfigError(f"{path}: missing [suite] section")
    s = cp["suite"]
    for key in s:
        if key not in ("envs", "seeds", "preset", "agent", "teleport_step"):
            raise ConfigError(f"{key}: unknown key in [suite]")
    if "envs" not in s:
        raise ConfigError("envs: [suite] must list at least one env")
    envs = [e for e in s["envs"].replace(",", " ").split() if e]
    try:
        seeds = [int(x) for x in s.get("seeds", "0").replace(",", " ").split()]
        teleport_step = int(s.get("teleport_step", "0"))
    except ValueError as e:
        raise ConfigError(f"seeds: {e}") from None
    agent = s.get("agent", "crl")
    if agent not in ("crl", "teleport"):
        raise ConfigError(f"agent: must be crl or teleport (got {agent!r})")

    def section_values(name: str) -> dict[str, Any]:
        return {k: parse_value(k, v) for k, v in cp[name].items()} if cp.has_section(name) else {}

    per_env = {}
    for sec in cp.sections():
        if sec in ("suite", "overrides"):
            continue
        if not sec.startswith("env:") or sec[4:] not in envs:
            raise ConfigError(f"[{sec}]: unknown section (per-env sections are [env:<id>] for listed envs)")
        per_env[sec[4:]] = section_values(sec)
    return {
        "envs": envs,
        "seeds": seeds,
        "preset": s.get("preset") or None,
        "agent": agent,
        "teleport_step": teleport_step,
        "overrides": section_values("overrides"),
        "per_env": per_env,
    }


def run_suite(suite_path: str | Path, output_dir: str | Path) -> tuple[int, dict[str, Any]]:
    """Run every (env, seed) cell, then aggregate final metrics per env from the cells' CSVs."""
    suite = read_suite(suite_path)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells, failed = [], []
    for env in suite["envs"]:
        for seed in suite["seeds"]:
            cell_dir = out / env / f"seed_{seed}"
            status = "ok"
            try:
                values = dict(suite["overrides"]) | suite["per_env"].get(env, {}) | {"env_id": env, "seed": seed}
                cfg = build_config(suite["preset"], cli=values)
                if suite["agent"] == "teleport":
                    run_scripted(cfg, cell_dir, suite["teleport_step"])
                else:
                    run_experiment(cfg, cell_dir)
            except Exception as e:  # a failed cell is recorded and the suite continues
                log.error("cell %s seed %d failed: %s", env, seed, e)
                status = f"failed: {type(e).__name__}: {e}"
                failed.append((env, seed))
            cells.append({"env_id": env, "seed": seed, "status": status, "dir": str(cell_dir)})

    rows = aggregate_cells(suite["envs"], cells)
    report = {"rows": rows, "cells": cells, "build_id": build_id(), "suite": suite}
    (out / "suite_report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    table = format_suite(rows)
    (out / "suite_report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return (EXIT_FAIL if failed else EXIT_OK), report


def aggregate_cells(envs: Sequence[str], cells: Sequence[dict[str, Any]]) -> list[dict[str, Any]]:
    """Per-env IQM and stderr of the final metrics.csv row of every successful cell."""
    rows = []
    for env in envs:
        finals = []
        for c in cells:
            if c["env_id"] == env and c["status"] == "ok":
                finals.append(read_metrics(Path(c["dir"]) / "metrics.csv")[-1])
        row: dict[str, Any] = {"env_id": env, "num_seeds": len(finals)}
        for metric in ("success_rate", "time_near_goal"):
            vals = [f[metric] for f in finals]
            row[metric] = iqm(vals) if vals else math.nan
            row[f"{metric}_stderr"] = iqm_stderr(vals) if vals else math.nan
            row[f"{metric}_per_seed"] = vals
        rows.append(row)
    return rows


def format_suite(rows: Sequence[dict[str, Any]]) -> str:
    lines = [f"{'env':<16} {'seeds':>5} {'success (IQM)':>15} {'stderr':>8} {'near goal (IQM)':>16} {'stderr':>8}"]
    for r in rows:
        lines.append(
            f"{r['env_id']:<16} {r['num_seeds']:>5} {r['success_rate']:>15.3f} {r['success_rate_stderr']:>8.3f}"
            f" {r['time_near_goal']:>16.3f} {r['time_near_goal_stderr']:>8.3f}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gcrl", description="Contrastive goal-conditioned RL experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent and write metrics.csv / final_report.json")
    t.add_argument("--output_dir", required=True)
    t.add_argument("--resume", action="store_true", help="continue from output_dir/checkpoint.bin if present")
    add_config_flags(t)

    b = sub.add_parser("bench", help="measure collection (and optionally training) throughput")
    b.add_argument("--env_counts", default="1,8,64,256,1024")
    b.add_argument("--iterations", type=int, default=5)
    b.add_argument("--train_iterations", type=int, default=0)
    b.add_argument("--json", dest="json_path", help="also write rows to this JSON file")
    add_config_flags(b)

    s = sub.add_parser("suite", help="run a suite file and aggregate with IQM")
    s.add_argument("suite_file")
    s.add_argument("--output_dir", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint with mode actions")
    e.add_argument("checkpoint")
    e.add_argument("--episodes", type=int, default=128)
    e.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Sequence[str] | None = None, environ: dict[str, str] | None = None) -> int:
    parser = make_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(message)s")
    environ = dict(os.environ) if environ is None else environ
    try:
        if ns.command == "train":
            cfg = config_from_namespace(ns, environ)
            return run_experiment(cfg, ns.output_dir, resume=ns.resume)
        if ns.command == "bench":
            cfg = config_from_namespace(ns, environ)
            counts = [int(x) for x in ns.env_counts.split(",") if x]
            rows = throughput_bench(cfg, counts, ns.iterations, ns.train_iterations)
            print(format_bench(rows))
            if ns.json_path:
                data = [asdict(r) | {"steps_per_second": r.steps_per_second} for r in rows]
                Path(ns.json_path).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
            return EXIT_OK
        if ns.command == "suite":
            status, _ = run_suite(ns.suite_file, ns.output_dir)
            return status
        if ns.command == "eval":
            agent, ts, cfg = checkpoint_load(ns.checkpoint)
            spec = make_spec(cfg.env_id, **cfg.env_overrides())
            sr, tng = evaluate(agent, spec, ns.episodes, ns.seed)
            print(json.dumps({"step": ts.env_steps, "success_rate": sr, "time_near_goal": tng}))
            return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError, FloatingPointError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    raise AssertionError(ns.command)


__all__ = ["main", "run_experiment", "run_suite", "aggregate_cells", "read_metrics", "METRIC_FIELDS"]
