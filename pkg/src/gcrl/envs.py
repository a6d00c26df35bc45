"""Vectorized point-mass goal-reaching environments and a tabular CMP oracle.

These are kinematic desk-scale stand-ins for rigid-body locomotion and
manipulation tasks, not physics reproductions. Every continuous env is a
double integrator::

    pos += vel * dt
    vel += clip(action, -1, 1) * accel_scale * dt      (speed clamped to max_speed)

Mazes resolve collisions by axis-separated clamping against a cell grid, so the
agent slides along walls and never enters a wall cell. ``PointPush`` moves a
puck by positional projection whenever the agent disk overlaps it.

State layouts::

    Point*     [x, y, vx, vy]
    PointPush  [x, y, vx, vy, puck_x, puck_y]
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .numcore import ShapeError

U_MAZE = ("#####", "#SGG#", "###G#", "#GGG#", "#####")

BIG_MAZE = (
    "#########",
    "#S.#..GG#",
    "#..#..#G#",
    "#..#..#.#",
    "#....##.#",
    "####.#..#",
    "#GG..#.##",
    "#G.#...G#",
    "#########",
)

ENV_IDS = ("PointReacher", "PointMassCircle", "PointUMaze", "PointBigMaze", "PointPush")


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_dim: int
    action_dim: int
    goal_dim: int
    goal_indices: tuple[int, ...]
    goal_distance: float
    episode_length: int
    goal_sampler: str  # "disk" | "circle" | "cells" | "box"
    dt: float = 0.05
    accel_scale: float = 1.0
    max_speed: float = 2.0
    termination_on_reach: bool = False
    start: tuple[float, float] = (0.0, 0.0)
    start_noise: float = 0.0
    goal_radius: float = 5.0
    goal_radius_range: tuple[float, float] = (0.0, 0.2)
    goal_box: tuple[float, float, float, float] = (-0.65, 0.35, -0.55, 0.45)  # x_lo, x_hi, y_lo, y_hi
    arena: float | None = None  # half-width of a square arena, None for unbounded
    maze: tuple[str, ...] = ()
    cell_size: float = 1.0
    agent_radius: float = 0.1
    puck_radius: float = 0.1
    puck_box: tuple[float, float, float, float] = (0.2, 0.5, -0.3, 0.3)
    _grid: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.goal_distance > 0:
            raise ValueError("goal_distance must be positive")
        if self.episode_length <= 0:
            raise ValueError("episode_length must be positive")
        if self.goal_dim > self.state_dim or len(self.goal_indices) != self.goal_dim:
            raise ValueError("goal coordinates must index into the state")
        if self.maze:
            if len({len(r) for r in self.maze}) != 1:
                raise ValueError("maze rows must all have the same length")
            grid = np.array([[ch == "#" for ch in row] for row in self.maze], dtype=bool)
            if not (grid[0].all() and grid[-1].all() and grid[:, 0].all() and grid[:, -1].all()):
                raise ValueError("maze must be enclosed by walls")
            if sum(row.count("S") for row in self.maze) != 1:
                raise ValueError("maze needs exactly one start cell 'S'")
            object.__setattr__(self, "_grid", grid)

    @property
    def walls(self) -> np.ndarray | None:
        return self._grid

    def cells(self, char: str) -> np.ndarray:
        """World-space centres of maze cells marked ``char``."""
        out = [
            ((c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size)
            for r, row in enumerate(self.maze)
            for c, ch in enumerate(row)
            if ch == char
        ]
        return np.array(out, dtype=np.float64).reshape(-1, 2)


def make_spec(env_id: str, **overrides) -> EnvSpec:
    """Registered desk-scale environment with optional field overrides."""
    base: dict
    if env_id == "PointReacher":
        base = dict(goal_distance=0.05, goal_sampler="disk", arena=0.5)
    elif env_id == "PointMassCircle":
        base = dict(goal_distance=0.5, goal_sampler="circle", goal_radius=5.0, start_noise=0.1)
    elif env_id == "PointUMaze":
        base = dict(goal_distance=0.5, goal_sampler="cells", maze=U_MAZE, cell_size=2.0, start_noise=0.1)
    elif env_id == "PointBigMaze":
        base = dict(goal_distance=0.5, goal_sampler="cells", maze=BIG_MAZE, cell_size=2.0, start_noise=0.1)
    elif env_id == "PointPush":
        base = dict(goal_distance=0.1, goal_sampler="box", arena=1.0, start=(-0.5, 0.0))
    else:
        raise ValueError(f"unknown env_id {env_id!r}; choose from {ENV_IDS}")
    push = env_id == "PointPush"
    base.update(
        env_id=env_id,
        state_dim=6 if push else 4,
        action_dim=2,
        goal_dim=2,
        goal_indices=(4, 5) if push else (0, 1),
        episode_length=256,
    )
    base.update(overrides)
    if isinstance(base.get("maze"), str):
        base["maze"] = tuple(r.strip() for r in base["maze"].split("/") if r.strip())
    return EnvSpec(**base)


@dataclass
class EnvState:
    """Batched environment state; row k belongs to environment ``env_ids[k]``."""

    obs: np.ndarray  # (N, state_dim) float64
    goal: np.ndarray  # (N, goal_dim)
    step_index: np.ndarray  # (N,) int64
    done: np.ndarray  # (N,) bool, set once an episode ended and not yet reset
    env_ids: np.ndarray  # (N,) int64
    resets: np.ndarray  # (N,) int64 reset counter per env
    seed: int = 0

    def __len__(self) -> int:
        return self.obs.shape[0]

    def take(self, idx) -> "EnvState":
        return EnvState(
            self.obs[idx], self.goal[idx], self.step_index[idx], self.done[idx],
            self.env_ids[idx], self.resets[idx], self.seed,
        )  # fmt: skip

    def copy(self) -> "EnvState":
        return self.take(slice(None))


@dataclass
class StepOutcome:
    obs: np.ndarray
    distance: np.ndarray
    reached: np.ndarray
    done: np.ndarray
    truncated: np.ndarray


def goal_of(spec: EnvSpec, states: np.ndarray) -> np.ndarray:
    """Goal-space coordinates of one state (1-D) or a batch of states (2-D)."""
    idx = list(spec.goal_indices)
    return states[..., idx]


def env_rng(seed: int, env_index: int, reset_count: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(env_index), int(reset_count)])


def _sample_initial(spec: EnvSpec, gen: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    obs = np.zeros(spec.state_dim)
    if spec.maze:
        start = spec.cells("S")[0]
    else:
        start = np.array(spec.start, dtype=np.float64)
    if spec.start_noise > 0:
        start = start + gen.uniform(-spec.start_noise, spec.start_noise, size=2)
    obs[:2] = start

    s = spec.goal_sampler
    if s == "circle":
        theta = gen.uniform(0.0, 2.0 * np.pi)
        goal = spec.goal_radius * np.array([np.cos(theta), np.sin(theta)])
    elif s == "disk":
        lo, hi = spec.goal_radius_range
        r = gen.uniform(lo, hi)
        theta = gen.uniform(0.0, 2.0 * np.pi)
        goal = r * np.array([np.cos(theta), np.sin(theta)])
    elif s == "cells":
        cells = spec.cells("G")
        goal = cells[gen.integers(len(cells))].copy()
    elif s == "box":
        x0, x1, y0, y1 = spec.goal_box
        goal = np.array([gen.uniform(x0, x1), gen.uniform(y0, y1)])
    else:
        raise ValueError(f"unknown goal sampler {s!r}")

    if spec.env_id == "PointPush":
        x0, x1, y0, y1 = spec.puck_box
        obs[4:6] = [gen.uniform(x0, x1), gen.uniform(y0, y1)]
    return obs, goal


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    """Single-environment reset drawing from ``rng``."""
    obs, goal = _sample_initial(spec, rng)
    one = np.zeros(1, dtype=np.int64)
    return EnvState(obs[None], goal[None], one.copy(), np.zeros(1, dtype=bool), one.copy(), one.copy())


def vec_reset(spec: EnvSpec, num_envs: int, seed: int, first_env: int = 0) -> EnvState:
    """Reset ``num_envs`` environments; env k draws from stream (seed, first_env + k, 0)."""
    ids = np.arange(first_env, first_env + num_envs, dtype=np.int64)
    obs = np.zeros((num_envs, spec.state_dim))
    goal = np.zeros((num_envs, spec.goal_dim))
    for k, e in enumerate(ids):
        obs[k], goal[k] = _sample_initial(spec, env_rng(seed, e, 0))
    z = np.zeros(num_envs, dtype=np.int64)
    return EnvState(obs, goal, z, np.zeros(num_envs, dtype=bool), ids, z.copy(), seed)


def reset_where(spec: EnvSpec, state: EnvState, mask: np.ndarray) -> EnvState:
    """Reset the masked environments in place with their next rng stream."""
    for k in np.flatnonzero(mask):
        state.resets[k] += 1
        state.obs[k], state.goal[k] = _sample_initial(spec, env_rng(state.seed, state.env_ids[k], state.resets[k]))
        state.step_index[k] = 0
        state.done[k] = False
    return state


def _clamp_axis(spec: EnvSpec, pos: np.ndarray, vel: np.ndarray, new: np.ndarray, axis: int) -> None:
    """Move ``pos[:, axis]`` to ``new`` unless that enters a wall cell; clamp at the face otherwise."""
    cs = spec.cell_size
    grid = spec.walls
    other = 1 - axis
    old_cell = np.floor(pos[:, axis] / cs).astype(np.int64)
    new_cell = np.floor(new / cs).astype(np.int64)
    fixed = np.floor(pos[:, other] / cs).astype(np.int64)
    rows, cols = grid.shape
    if axis == 0:
        r = np.clip(fixed, 0, rows - 1)
        c = np.clip(new_cell, 0, cols - 1)
    else:
        r = np.clip(new_cell, 0, rows - 1)
        c = np.clip(fixed, 0, cols - 1)
    blocked = grid[r, c] & (new_cell != old_cell)
    eps = 1e-6 * cs
    hit_hi = blocked & (new_cell > old_cell)
    hit_lo = blocked & (new_cell < old_cell)
    new = np.where(hit_hi, new_cell * cs - eps, new)
    new = np.where(hit_lo, old_cell * cs + eps, new)
    pos[:, axis] = new
    # resting on a face: no velocity into the wall either
    v = vel[:, axis]
    cell = np.floor(new / cs).astype(np.int64)
    ahead = cell + np.sign(v).astype(np.int64)
    near_face = np.where(v > 0, (cell + 1) * cs - new, new - cell * cs) <= 2 * eps
    if axis == 0:
        wall_ahead = grid[np.clip(fixed, 0, rows - 1), np.clip(ahead, 0, cols - 1)]
    else:
        wall_ahead = grid[np.clip(ahead, 0, rows - 1), np.clip(fixed, 0, cols - 1)]
    pressed = (v != 0) & near_face & wall_ahead
    vel[:, axis] = np.where(blocked | pressed, 0.0, v)


def _dynamics(spec: EnvSpec, obs: np.ndarray, action: np.ndarray) -> np.ndarray:
    obs = obs.copy()
    pos = obs[:, 0:2]
    vel = obs[:, 2:4]
    a = np.clip(action, -1.0, 1.0)
    new_pos = pos + vel * spec.dt
    new_vel = vel + a * (spec.accel_scale * spec.dt)
    speed = np.sqrt(np.sum(new_vel * new_vel, axis=1, keepdims=True))
    new_vel = np.where(speed > spec.max_speed, new_vel * (spec.max_speed / np.maximum(speed, 1e-12)), new_vel)
    if spec.walls is not None:
        vel[:] = new_vel
        _clamp_axis(spec, pos, vel, new_pos[:, 0], 0)
        _clamp_axis(spec, pos, vel, new_pos[:, 1], 1)
    else:
        pos[:] = new_pos
        vel[:] = new_vel
    if spec.arena is not None:
        lim = spec.arena
        out = np.abs(pos) > lim
        pos[:] = np.clip(pos, -lim, lim)
        vel[:] = np.where(out, 0.0, vel)
    if spec.env_id == "PointPush":
        puck = obs[:, 4:6]
        d = puck - pos
        dist = np.sqrt(np.sum(d * d, axis=1, keepdims=True))
        reach = spec.agent_radius + spec.puck_radius
        contact = dist < reach
        # coincident centres: push along the agent's velocity, or +x if at rest
        fallback = np.where(np.sum(vel * vel, axis=1, keepdims=True) > 0, vel, np.array([[1.0, 0.0]]))
        direction = np.where(dist > 1e-12, d, fallback)
        norm = np.sqrt(np.sum(direction * direction, axis=1, keepdims=True))
        pushed = pos + direction * (reach / norm)
        puck[:] = np.where(contact, pushed, puck)
        if spec.arena is not None:
            puck[:] = np.clip(puck, -spec.arena, spec.arena)
            # a puck pinned at the boundary stops the agent at contact distance
            d = puck - pos
            dist = np.sqrt(np.sum(d * d, axis=1, keepdims=True))
            stuck = contact & (dist < reach)
            back = puck - d * (reach / np.maximum(dist, 1e-12))
            pos[:] = np.where(stuck, np.clip(back, -spec.arena, spec.arena), pos)
            vel[:] = np.where(stuck, 0.0, vel)
    return obs


def step(spec: EnvSpec, state: EnvState, action: np.ndarray) -> tuple[EnvState, StepOutcome]:
    """Advance every environment in ``state`` by one step."""
    action = np.asarray(action, dtype=np.float64)
    if action.ndim == 1:
        action = action[None]
    if action.shape != (len(state), spec.action_dim):
        raise ShapeError(f"actions must have shape {(len(state), spec.action_dim)}, got {action.shape}")
    if state.done.any():
        raise EnvError("cannot step an environment whose episode has ended; reset it first")
    obs = _dynamics(spec, state.obs, action)
    diff = goal_of(spec, obs) - state.goal
    distance = np.sqrt(np.sum(diff * diff, axis=1))
    reached = distance < spec.goal_distance
    step_index = state.step_index + 1
    truncated = step_index >= spec.episode_length
    done = truncated | (reached & spec.termination_on_reach)
    new_state = EnvState(obs, state.goal.copy(), step_index, done, state.env_ids.copy(), state.resets.copy(), state.seed)
    return new_state, StepOutcome(obs, distance, reached, done, truncated)


def _concat_states(parts: Sequence[EnvState]) -> EnvState:
    return EnvState(
        np.concatenate([p.obs for p in parts]),
        np.concatenate([p.goal for p in parts]),
        np.concatenate([p.step_index for p in parts]),
        np.concatenate([p.done for p in parts]),
        np.concatenate([p.env_ids for p in parts]),
        np.concatenate([p.resets for p in parts]),
        parts[0].seed,
    )


def vec_step(
    spec: EnvSpec, state: EnvState, actions: np.ndarray, workers: int = 1, pool: ThreadPoolExecutor | None = None
) -> tuple[EnvState, StepOutcome]:
    """Step a vector of environments, optionally sharded over ``workers`` threads.

    Dynamics are element-wise, so the result is bitwise identical for any
    partition; shards are merged in env order.
    """
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[0] != len(state):
        raise ShapeError(f"expected {len(state)} action rows, got shape {actions.shape}")
    if workers <= 1 or len(state) < 2:
        return step(spec, state, actions)
    bounds = np.linspace(0, len(state), min(workers, len(state)) + 1).astype(int)
    slices = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]

    def run(sl):
        return step(spec, state.take(sl), actions[sl])

    if pool is None:
        with ThreadPoolExecutor(max_workers=len(slices)) as ex:
            results = list(ex.map(run, slices))
    else:
        results = list(pool.map(run, slices))
    new_state = _concat_states([r[0] for r in results])
    outs = [r[1] for r in results]
    outcome = StepOutcome(*(np.concatenate([getattr(o, f) for o in outs]) for f in ("obs", "distance", "reached", "done", "truncated")))
    return new_state, outcome


def in_wall(spec: EnvSpec, pos: np.ndarray) -> np.ndarray:
    """True where a position lies strictly inside a wall cell."""
    cs = spec.cell_size
    grid = spec.walls
    if grid is None:
        return np.zeros(len(pos), dtype=bool)
    x, y = pos[:, 0] / cs, pos[:, 1] / cs
    c, r = np.floor(x).astype(int), np.floor(y).astype(int)
    on_face = (x == c) | (y == r)
    inside = (r >= 0) & (r < grid.shape[0]) & (c >= 0) & (c < grid.shape[1])
    out = np.ones(len(pos), dtype=bool)
    out[inside] = grid[r[inside], c[inside]]
    return out & ~on_face


# ---------------------------------------------------------------------------
# tabular CMPs


@dataclass
class FiniteChain:
    """Finite controlled Markov process: ``P[s, a, s']`` transition tensor."""

    P: np.ndarray

    def __post_init__(self):
        check_stochastic(self.P)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def random(cls, n_states: int, n_actions: int, rng: np.random.Generator, sparsity: float = 0.5) -> "FiniteChain":
        logits = rng.exponential(size=(n_states, n_actions, n_states))
        logits *= rng.random(logits.shape) > sparsity
        # keep at least one successor per (s, a)
        logits[np.arange(n_states)[:, None], np.arange(n_actions)[None, :], rng.integers(n_states, size=(n_states, n_actions))] += 1.0
        return cls(logits / logits.sum(axis=2, keepdims=True))

    @classmethod
    def chain(cls, n_states: int) -> "FiniteChain":
        """Action 0 stays, action 1 moves right; the last state absorbs."""
        P = np.zeros((n_states, 2, n_states))
        for s in range(n_states):
            P[s, 0, s] = 1.0
            P[s, 1, min(s + 1, n_states - 1)] = 1.0
        return cls(P)


def check_stochastic(P: np.ndarray, atol: float = 1e-9) -> None:
    if P.ndim != 3 or P.shape[0] != P.shape[2]:
        raise ShapeError(f"transition tensor must be (S, A, S), got {P.shape}")
    if (P < 0).any() or not np.allclose(P.sum(axis=2), 1.0, atol=atol):
        raise ValueError("transition rows must be probability distributions")


def _policy_matrix(P: np.ndarray, policy: np.ndarray) -> np.ndarray:
    if policy.shape != P.shape[:2]:
        raise ShapeError(f"policy must have shape {P.shape[:2]}, got {policy.shape}")
    if (policy < 0).any() or not np.allclose(policy.sum(axis=1), 1.0, atol=1e-9):
        raise ValueError("policy rows must be probability distributions")
    return np.einsum("sa,sat->st", policy, P)


def tabular_visitation_oracle(
    P: np.ndarray, policy: np.ndarray, gamma: float, s: int, a: int, g: int | None = None, tol: float = 1e-10
):
    """(1-gamma) * sum_t gamma^t Pr(s_t = g | s_0 = s, a_0 = a) by propagating the state distribution.

    ``policy[s, a]`` is the (goal-conditioned) action distribution used from
    t = 1 on. The series stops once gamma^t drops below ``tol``. With
    ``g=None`` the whole distribution over goals is returned.
    """
    check_stochastic(P)
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    T = _policy_matrix(P, policy)
    p = np.zeros(P.shape[0])
    p[s] = 1.0
    total = (1.0 - gamma) * p
    p = P[s, a].copy()
    w = gamma
    while w >= tol:
        total += (1.0 - gamma) * w * p
        p = p @ T
        w *= gamma
    return total if g is None else float(total[g])


def q_function_dp(P: np.ndarray, policy: np.ndarray, gamma: float, g: int) -> np.ndarray:
    """Q_g(s, a) for the goal reward r_g, solved exactly as a linear Bellman system.

    r_g(s_t, a_t) = (1-gamma) gamma Pr(s_{t+1}=g | s_t, a_t), with the extra
    (1-gamma) [s_0 = g] term at t = 0.
    """
    check_stochastic(P)
    n_s, n_a, _ = P.shape
    R = (1.0 - gamma) * gamma * P[:, :, g]
    # Q'(s,a) = R(s,a) + gamma sum_{s'} P(s'|s,a) sum_{a'} pi(a'|s') Q'(s',a')
    M = np.einsum("sat,tb->satb", P, policy).reshape(n_s * n_a, n_s * n_a)
    q = np.linalg.solve(np.eye(n_s * n_a) - gamma * M, R.ravel()).reshape(n_s, n_a)
    q[g, :] += 1.0 - gamma
    return q


def monte_carlo_visitation(
    P: np.ndarray, policy: np.ndarray, gamma: float, s: int, a: int, n_rollouts: int, rng: np.random.Generator
) -> np.ndarray:
    """Empirical distribution of s_T for T ~ Geom(1-gamma) on {0, 1, ...}."""
    n_s = P.shape[0]
    horizon = rng.geometric(1.0 - gamma, size=n_rollouts) - 1
    cum_P = np.cumsum(P, axis=2)
    cum_pi = np.cumsum(policy, axis=1)
    states = np.full(n_rollouts, s)
    actions = np.full(n_rollouts, a)
    final = np.where(horizon == 0, s, -1)
    for t in range(1, int(horizon.max()) + 1):
        u = rng.random(n_rollouts)
        states = np.minimum((u[:, None] > cum_P[states, actions]).sum(axis=1), n_s - 1)
        final = np.where(horizon == t, states, final)
        u = rng.random(n_rollouts)
        actions = np.minimum((u[:, None] > cum_pi[states]).sum(axis=1), policy.shape[1] - 1)
    return np.bincount(final, minlength=n_s) / n_rollouts


def with_overrides(spec: EnvSpec, **kw) -> EnvSpec:
    return replace(spec, _grid=None, **kw)
