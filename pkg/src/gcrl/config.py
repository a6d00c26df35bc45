"""Experiment configuration: defaults, presets, and layered parsing.

Precedence, highest first: command-line flag, ``GCRL_*`` environment
variable, config file, named preset, built-in default.

Config files are INI-style with ``[env]``, ``[agent]`` and ``[trainer]``
sections holding flat ``key = value`` lines.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Any, Mapping, Sequence

from .energies import EnergyKind
from .envs import ENV_IDS
from .objectives import LossKind


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    # paper hyperparameter names
    num_timesteps: int = 50_000_000
    max_replay_size: int = 10_000
    min_replay_size: int = 1_000
    episode_length: int = 1_000
    discounting: float = 0.99
    num_envs: int = 1024
    batch_size: int = 256
    multiplier_num_sgd_steps: int = 1
    action_repeat: int = 1
    unroll_length: int = 62
    policy_lr: float = 6e-4
    critic_lr: float = 3e-4
    contrastive_loss_function: str = "symmetric_infonce"
    energy_function: str = "l2"
    logsumexp_penalty: float = 0.1
    hidden_layers: tuple[int, ...] = (256, 256)
    representation_dimension: int = 64
    # everything else
    env_id: str = "PointMassCircle"
    seed: int = 0
    utd_denominator: int = 16
    alpha_random: float = 0.0
    layer_norm: bool = False
    weight_decay: float = 0.0
    entropy_lr: float = 3e-4
    eval_interval: int = 1_000_000
    eval_episodes: int = 128
    num_workers: int = 1
    checkpoint_interval: int = 0
    stop_success_rate: float = 0.0
    goal_radius: float = 5.0
    maze: str = ""

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, why: str):
            if not ok:
                raise ConfigError(f"{key}: {why} (got {getattr(self, key)!r})")

        need(self.batch_size >= 2, "batch_size", "contrastive training needs batch_size >= 2 so every positive has negatives")
        need(self.num_envs >= 1, "num_envs", "must be >= 1")
        need(self.utd_denominator >= 1, "utd_denominator", "must be >= 1")
        need(self.unroll_length >= 1, "unroll_length", "must be >= 1")
        need(self.episode_length >= 1, "episode_length", "must be >= 1")
        need(self.action_repeat >= 1, "action_repeat", "must be >= 1")
        need(self.multiplier_num_sgd_steps >= 1, "multiplier_num_sgd_steps", "must be >= 1")
        need(0 <= self.discounting < 1, "discounting", "must lie in [0, 1)")
        need(self.max_replay_size >= 1, "max_replay_size", "must be >= 1")
        need(0 <= self.min_replay_size <= self.max_replay_size, "min_replay_size", "must lie in [0, max_replay_size]")
        need(self.policy_lr > 0, "policy_lr", "must be > 0")
        need(self.critic_lr > 0, "critic_lr", "must be > 0")
        need(self.entropy_lr > 0, "entropy_lr", "must be > 0")
        need(self.logsumexp_penalty >= 0, "logsumexp_penalty", "must be >= 0")
        need(0 <= self.alpha_random <= 1, "alpha_random", "must lie in [0, 1]")
        need(self.weight_decay >= 0, "weight_decay", "must be >= 0")
        need(self.representation_dimension >= 1, "representation_dimension", "must be >= 1")
        need(len(self.hidden_layers) >= 1 and min(self.hidden_layers) >= 1, "hidden_layers", "needs positive widths")
        need(self.eval_interval >= 1, "eval_interval", "must be >= 1")
        need(self.eval_episodes >= 1, "eval_episodes", "must be >= 1")
        need(self.num_workers >= 1, "num_workers", "must be >= 1")
        need(self.num_timesteps >= 1, "num_timesteps", "must be >= 1")
        need(self.goal_radius > 0, "goal_radius", "must be > 0")
        need(0 <= self.stop_success_rate <= 1, "stop_success_rate", "must lie in [0, 1]")
        need(self.checkpoint_interval >= 0, "checkpoint_interval", "must be >= 0")
        need(self.env_id in ENV_IDS, "env_id", f"must be one of {ENV_IDS}")
        try:
            self.contrastive_loss_function = LossKind.parse(self.contrastive_loss_function).value
        except ValueError as e:
            raise ConfigError(f"contrastive_loss_function: {e}") from None
        try:
            self.energy_function = EnergyKind.parse(self.energy_function).value
        except ValueError as e:
            raise ConfigError(f"energy_function: {e}") from None

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["hidden_layers"] = list(self.hidden_layers)
        return d

    def env_overrides(self) -> dict[str, Any]:
        kw: dict[str, Any] = {"episode_length": self.episode_length}
        if self.env_id == "PointMassCircle":
            kw["goal_radius"] = self.goal_radius
        if self.maze and self.env_id in ("PointUMaze", "PointBigMaze"):
            kw["maze"] = self.maze
        return kw


SECTIONS: dict[str, tuple[str, ...]] = {
    "env": ("env_id", "episode_length", "action_repeat", "goal_radius", "maze"),
    "agent": (
        "policy_lr", "critic_lr", "entropy_lr", "contrastive_loss_function", "energy_function",
        "logsumexp_penalty", "hidden_layers", "representation_dimension", "alpha_random",
        "layer_norm", "weight_decay",
    ),
    "trainer": (
        "num_timesteps", "max_replay_size", "min_replay_size", "discounting", "num_envs", "batch_size",
        "multiplier_num_sgd_steps", "unroll_length", "seed", "utd_denominator", "eval_interval",
        "eval_episodes", "num_workers", "checkpoint_interval", "stop_success_rate",
    ),
}  # fmt: skip

FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
assert set(FIELD_TYPES) == {k for keys in SECTIONS.values() for k in keys}

# Scaled-down settings that train in minutes on one CPU core.
PRESETS: dict[str, dict[str, Any]] = {
    "paper": {},
    "desk": dict(
        num_timesteps=2_000_000,
        num_envs=64,
        unroll_length=62,
        batch_size=256,
        utd_denominator=16,
        episode_length=256,
        min_replay_size=256,
        eval_interval=50_000,
        eval_episodes=64,
        hidden_layers=(128, 128),
    ),
}


def parse_value(key: str, raw: Any) -> Any:
    """Convert a raw string (or value) to the declared type of ``key``."""
    if key not in FIELD_TYPES:
        raise ConfigError(f"{key}: unknown configuration key")
    typ = FIELD_TYPES[key]
    if not isinstance(raw, str):
        return tuple(raw) if key == "hidden_layers" else raw
    s = raw.strip()
    try:
        if typ == "int":
            return int(float(s)) if "e" in s.lower() else int(s.replace("_", ""))
        if typ == "float":
            return float(s)
        if typ == "bool":
            low = s.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if key == "hidden_layers":
            return tuple(int(x) for x in s.strip("[]()").replace(",", " ").split())
        return s
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {typ}") from None


def read_config_file(path: str) -> dict[str, Any]:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=None)
    cp.optionxform = str  # keep key case
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    out: dict[str, Any] = {}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"[{section}]: unknown section; expected one of {list(SECTIONS)}")
        for key, raw in cp.items(section):
            if key not in FIELD_TYPES:
                raise ConfigError(f"{key}: unknown configuration key in [{section}]")
            if key not in SECTIONS[section]:
                home = next(s for s, keys in SECTIONS.items() if key in keys)
                raise ConfigError(f"{key}: belongs in [{home}], not [{section}]")
            out[key] = parse_value(key, raw)
    return out


def write_config_file(config: ExperimentConfig, path: str) -> None:
    d = config.to_dict()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = d[k]
            if k == "hidden_layers":
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))


def env_values(environ: Mapping[str, str], prefix: str = "GCRL_") -> dict[str, Any]:
    out = {}
    for name, raw in environ.items():
        if not name.startswith(prefix):
            continue
        key = name[len(prefix) :].lower()
        if key in ("config", "preset"):
            continue
        out[key] = parse_value(key, raw)
    return out


def build_config(
    preset: str | None = None,
    file_values: Mapping[str, Any] | None = None,
    env: Mapping[str, Any] | None = None,
    cli: Mapping[str, Any] | None = None,
) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r}; choose from {list(PRESETS)}")
        values.update(PRESETS[preset])
    for layer in (file_values, env, cli):
        if layer:
            for k, v in layer.items():
                if k not in FIELD_TYPES:
                    raise ConfigError(f"{k}: unknown configuration key")
                values[k] = v
    return ExperimentConfig(**values)


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key`` flag per config field; unset flags stay ``None``."""
    parser.add_argument("--config", help="INI config file with [env]/[agent]/[trainer] sections")
    parser.add_argument("--preset", help=f"named defaults: {', '.join(PRESETS)}")
    for name in FIELD_TYPES:
        parser.add_argument(f"--{name}", dest=name, default=None, metavar="VALUE")


def parse_config(
    argv: Sequence[str] | None = None, environ: Mapping[str, str] | None = None
) -> ExperimentConfig:
    """Parse flags (plus ``--config``/``--preset``) over env vars over file over defaults."""
    parser = argparse.ArgumentParser(add_help=False)
    add_config_flags(parser)
    ns, unknown = parser.parse_known_args(list(argv or []))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown configuration flag")
    return config_from_namespace(ns, os.environ if environ is None else environ)


def config_from_namespace(ns: argparse.Namespace, environ: Mapping[str, str]) -> ExperimentConfig:
    path = ns.config or environ.get("GCRL_CONFIG")
    preset = ns.preset or environ.get("GCRL_PRESET")
    file_values = read_config_file(path) if path else {}
    cli = {k: parse_value(k, getattr(ns, k)) for k in FIELD_TYPES if getattr(ns, k, None) is not None}
    return build_config(preset, file_values, env_values(environ), cli)


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "build_config",
    "parse_config",
    "read_config_file",
    "write_config_file",
]
