"""Collect-then-update training loop, evaluation, IQM aggregation and throughput bench."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .agent import AgentConfig, CrlAgent, UpdateStats
from .config import ExperimentConfig
from .envs import EnvSpec, EnvState, goal_of, make_spec, reset_where, vec_reset, vec_step
from .replay import TrajectoryBuffer

log = logging.getLogger(__name__)

# independent random streams, keyed as (seed, stream)
STREAM_INIT, STREAM_COLLECT, STREAM_SAMPLE, STREAM_UPDATE, STREAM_EVAL = range(5)


@dataclass
class EvalReport:
    step: int
    success_rate: float
    time_near_goal: float
    steps_per_second: float
    wall_clock_seconds: float
    critic_loss: float = math.nan
    actor_loss: float = math.nan
    entropy_coef: float = math.nan
    gradient_steps: int = 0


class Policy(Protocol):
    def act(self, obs: np.ndarray, goals: np.ndarray) -> np.ndarray: ...


def stream(seed: int, key: int, *more: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(key), *map(int, more)])


def agent_config_for(config: ExperimentConfig, spec: EnvSpec) -> AgentConfig:
    return AgentConfig(
        state_dim=spec.state_dim,
        action_dim=spec.action_dim,
        goal_dim=spec.goal_dim,
        repr_dim=config.representation_dimension,
        hidden=config.hidden_layers,
        layer_norm=config.layer_norm,
        energy=config.energy_function,
        loss=config.contrastive_loss_function,
        logsumexp_penalty=config.logsumexp_penalty,
        alpha_random=config.alpha_random,
        policy_lr=config.policy_lr,
        critic_lr=config.critic_lr,
        entropy_lr=config.entropy_lr,
        weight_decay=config.weight_decay,
    )


class Collector:
    """Owns the training env vector and writes its transitions into the buffer."""

    def __init__(self, spec: EnvSpec, num_envs: int, seed: int, action_repeat: int = 1, workers: int = 1):
        self.spec = spec
        self.state = vec_reset(spec, num_envs, seed)
        self.action_repeat = action_repeat
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        self.episodes_finished = 0
        self.successes = 0
        self._reached = np.zeros(num_envs, dtype=bool)

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()

    def run(
        self,
        buffer: TrajectoryBuffer,
        unroll_length: int,
        act: Callable[[np.ndarray, np.ndarray], np.ndarray],
    ) -> int:
        """Advance every env ``unroll_length`` steps; returns transitions written."""
        spec, n = self.spec, len(self.state)
        written = 0
        for _ in range(unroll_length):
            s = self.state
            actions = act(s.obs, s.goal)
            obs0 = s.obs
            for _ in range(self.action_repeat):
                s, out = vec_step(spec, s, actions, self.workers, self._pool)
                if out.done.any():
                    break
            self._reached |= out.reached
            buffer.push_batch(obs0, actions, out.obs, out.done, s.resets)
            written += n
            if out.done.any():
                ended = out.done
                self.episodes_finished += int(ended.sum())
                self.successes += int(self._reached[ended].sum())
                self._reached[ended] = False
                s = reset_where(spec, s, ended)
            self.state = s
        return written


def collect(collector: Collector, agent: CrlAgent | None, buffer: TrajectoryBuffer, unroll_length: int, rng: np.random.Generator) -> int:
    """One collection phase. ``agent=None`` draws uniform random actions (prefill)."""
    if agent is None:
        a_dim = collector.spec.action_dim

        def act(obs, goals):
            return rng.uniform(-1.0, 1.0, size=(len(obs), a_dim))
    else:
        if agent.config.state_dim != collector.spec.state_dim or agent.config.goal_dim != collector.spec.goal_dim:
            raise ValueError("agent and environment dimensions disagree")

        def act(obs, goals):
            return agent.actor_sample(obs, goals, rng)[0]

    return collector.run(buffer, unroll_length, act)


def evaluate(
    policy,
    spec: EnvSpec,
    n_episodes: int,
    seed: int,
) -> tuple[float, float]:
    """Mean success (goal reached at least once) and fraction of steps near the goal.

    ``policy`` is a CrlAgent (mode actions are used) or anything with
    ``act(obs, goals)``. A policy may also define ``state_hook(state, t)`` to
    edit the env state before step ``t`` (scripted test agents use this).
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    act = policy.act_mode if isinstance(policy, CrlAgent) else policy.act
    hook = getattr(policy, "state_hook", None)
    state = vec_reset(spec, n_episodes, seed)
    L = spec.episode_length
    ever = np.zeros(n_episodes, dtype=bool)
    near = np.zeros(n_episodes)
    alive = np.ones(n_episodes, dtype=bool)
    for t in range(L):
        if hook is not None:
            state = hook(state, t)
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        sub = state.take(idx) if idx.size < n_episodes else state
        sub, out = vec_step(spec, sub, act(sub.obs, sub.goal))
        ever[idx] |= out.reached
        near[idx] += out.reached
        if idx.size < n_episodes:
            state.obs[idx] = sub.obs
            state.step_index[idx] = sub.step_index
        else:
            state = sub
        alive[idx] = ~out.done
        state.done[:] = False
    return float(ever.mean()), float(np.mean(near / L))


@dataclass
class TeleportAgent:
    """Scripted test policy: idles, then jumps onto the goal at step ``k`` and stays."""

    spec: EnvSpec
    k: int = 0

    def act(self, obs: np.ndarray, goals: np.ndarray) -> np.ndarray:
        return np.zeros((len(obs), self.spec.action_dim))

    def state_hook(self, state: EnvState, t: int) -> EnvState:
        if t == self.k:
            state.obs[:, list(self.spec.goal_indices)] = state.goal
            state.obs[:, 2:4] = 0.0  # agent velocity
        return state


@dataclass
class TrainState:
    env_steps: int = 0
    training_transitions: int = 0
    gradient_steps: int = 0
    iterations: int = 0
    evals: int = 0
    last_stats: UpdateStats = field(default_factory=UpdateStats)


def num_updates_due(state: TrainState, utd_denominator: int, multiplier: int = 1) -> int:
    """Updates owed so that gradient_steps == floor(transitions / utd) * multiplier exactly."""
    return (state.training_transitions // utd_denominator) * multiplier - state.gradient_steps


def train(
    config: ExperimentConfig,
    on_report: Callable[[EvalReport, CrlAgent, TrainState], None] | None = None,
    agent: CrlAgent | None = None,
    start: TrainState | None = None,
) -> list[EvalReport]:
    """Run the full collect/update loop and return the evaluation reports.

    ``agent`` and ``start`` resume a previous run: counters continue from
    ``start`` and the replay buffer is prefilled afresh.
    """
    cfg = config
    spec = make_spec(cfg.env_id, **cfg.env_overrides())
    if agent is None:
        agent = CrlAgent.create(agent_config_for(cfg, spec), stream(cfg.seed, STREAM_INIT))
    ts = start or TrainState()
    resume = ts.iterations
    rng_collect = stream(cfg.seed, STREAM_COLLECT, resume)
    rng_sample = stream(cfg.seed, STREAM_SAMPLE, resume)
    rng_update = stream(cfg.seed, STREAM_UPDATE, resume)
    collector = Collector(spec, cfg.num_envs, cfg.seed + 7919 * resume, cfg.action_repeat, cfg.num_workers)
    buffer = TrajectoryBuffer(cfg.num_envs, spec.state_dim, spec.action_dim, cfg.max_replay_size, cfg.min_replay_size)
    goal_fn = lambda states: goal_of(spec, states)  # noqa: E731
    reports: list[EvalReport] = []
    t0 = time.perf_counter()
    steps_at_start = ts.env_steps
    next_eval = (ts.env_steps // cfg.eval_interval + 1) * cfg.eval_interval

    def report() -> EvalReport:
        sr, tng = evaluate(agent, spec, cfg.eval_episodes, cfg.seed * 1_000_003 + 104_729 * (ts.evals + 1))
        ts.evals += 1
        wall = time.perf_counter() - t0
        st = ts.last_stats
        r = EvalReport(
            step=ts.env_steps,
            success_rate=sr,
            time_near_goal=tng,
            steps_per_second=(ts.env_steps - steps_at_start) / max(wall, 1e-9),
            wall_clock_seconds=wall,
            critic_loss=st.critic_loss,
            actor_loss=st.actor_loss,
            entropy_coef=agent.entropy_coef,
            gradient_steps=ts.gradient_steps,
        )
        reports.append(r)
        log.info(
            "step %d  success %.3f  near %.3f  critic %.4f  actor %.4f  coef %.4f  sps %.0f",
            r.step, sr, tng, r.critic_loss, r.actor_loss, r.entropy_coef, r.steps_per_second,
        )  # fmt: skip
        if on_report is not None:
            on_report(r, agent, ts)
        return r

    try:
        # prefill phases count as iterations and env steps, but not toward the UTD budget
        while not buffer.ready:
            ts.env_steps += collect(collector, None, buffer, cfg.unroll_length, rng_collect) * cfg.action_repeat
            ts.iterations += 1
        while ts.env_steps < cfg.num_timesteps:
            written = collect(collector, agent, buffer, cfg.unroll_length, rng_collect)
            ts.env_steps += written * cfg.action_repeat
            ts.training_transitions += written
            ts.iterations += 1
            for _ in range(num_updates_due(ts, cfg.utd_denominator, cfg.multiplier_num_sgd_steps)):
                batch = buffer.sample_crl_batch(rng_sample, cfg.batch_size, cfg.discounting, goal_fn, cfg.alpha_random)
                try:
                    ts.last_stats = agent.update(batch, rng_update)
                except FloatingPointError as e:
                    raise type(e)(f"at env step {ts.env_steps}, gradient step {ts.gradient_steps}: {e}") from e
                ts.gradient_steps += 1
            if ts.env_steps >= next_eval:
                r = report()
                next_eval = (ts.env_steps // cfg.eval_interval + 1) * cfg.eval_interval
                if cfg.stop_success_rate > 0 and r.success_rate >= cfg.stop_success_rate:
                    break
        if not reports or reports[-1].step != ts.env_steps:
            report()
    finally:
        collector.close()
    return reports


def iqm(values: Sequence[float]) -> float:
    """Interquartile mean: drop floor(n/4) values from each end of the sorted data."""
    kept = _iqm_kept(values)
    return float(np.mean(kept))


def iqm_stderr(values: Sequence[float]) -> float:
    kept = _iqm_kept(values)
    if len(kept) < 2:
        return 0.0
    return float(np.std(kept, ddof=1) / np.sqrt(len(kept)))


def _iqm_kept(values: Sequence[float]) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("iqm of an empty sequence")
    cut = int(math.floor(0.25 * v.size))
    return v[cut : v.size - cut]


@dataclass
class BenchRow:
    num_envs: int
    mode: str
    env_steps: int
    seconds: float

    @property
    def steps_per_second(self) -> float:
        return self.env_steps / self.seconds if self.seconds > 0 else math.inf


def throughput_bench(
    config: ExperimentConfig,
    env_counts: Sequence[int] = (1, 8, 64, 256, 1024),
    iterations: int = 5,
    train_iterations: int = 0,
) -> list[BenchRow]:
    """Env-steps/second of collection with a fixed random-init agent, per env count.

    With ``train_iterations > 0`` full collect+update iterations are timed as well.
    """
    rows: list[BenchRow] = []
    spec = make_spec(config.env_id, **config.env_overrides())
    agent = CrlAgent.create(agent_config_for(config, spec), stream(config.seed, STREAM_INIT))
    for n in env_counts:
        rng = stream(config.seed, STREAM_COLLECT, n)
        cap = max(config.unroll_length * (iterations + train_iterations + 1), 2)
        buffer = TrajectoryBuffer(n, spec.state_dim, spec.action_dim, cap, 1)
        collector = Collector(spec, n, config.seed, config.action_repeat, config.num_workers)
        try:
            collect(collector, agent, buffer, 1, rng)  # warm-up
            start = time.perf_counter()
            steps = 0
            for _ in range(iterations):
                steps += collect(collector, agent, buffer, config.unroll_length, rng) * config.action_repeat
            rows.append(BenchRow(n, "collect", steps, time.perf_counter() - start))
            if train_iterations > 0:
                ts = TrainState()
                goal_fn = lambda s: goal_of(spec, s)  # noqa: E731
                start = time.perf_counter()
                steps = 0
                for _ in range(train_iterations):
                    w = collect(collector, agent, buffer, config.unroll_length, rng)
                    steps += w * config.action_repeat
                    ts.training_transitions += w
                    for _ in range(num_updates_due(ts, config.utd_denominator, config.multiplier_num_sgd_steps)):
                        batch = buffer.sample_crl_batch(rng, config.batch_size, config.discounting, goal_fn)
                        agent.update(batch, rng)
                        ts.gradient_steps += 1
                rows.append(BenchRow(n, "train", steps, time.perf_counter() - start))
        finally:
            collector.close()
    return rows


def format_bench(rows: Sequence[BenchRow]) -> str:
    lines = [f"{'mode':<8} {'num_envs':>8} {'env_steps':>10} {'seconds':>9} {'steps/s':>12}"]
    for r in rows:
        lines.append(f"{r.mode:<8} {r.num_envs:>8} {r.env_steps:>10} {r.seconds:>9.3f} {r.steps_per_second:>12.0f}")
    return "\n".join(lines)
