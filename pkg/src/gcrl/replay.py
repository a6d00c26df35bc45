"""Per-environment trajectory ring buffer with discounted future-goal sampling."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np


class ReplayError(RuntimeError):
    pass


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    truncated: bool
    done: bool
    episode_id: int


@dataclass
class CrlBatch:
    states: np.ndarray
    actions: np.ndarray
    future_goals: np.ndarray
    random_goals: np.ndarray | None = None
    # exposed for auditing: (env, slot) of each state and of its goal source
    env_index: np.ndarray | None = None
    state_slot: np.ndarray | None = None
    goal_slot: np.ndarray | None = None
    offsets: np.ndarray | None = None


def truncated_geometric(rng: np.random.Generator, gamma: float, max_offset, size=None) -> np.ndarray | int:
    """Draw k in {1..max_offset} with P(k) proportional to gamma**(k-1).

    ``max_offset`` may be an array, in which case one draw is made per entry.
    Uses the inverse CDF F(k) = (1 - gamma**k) / (1 - gamma**m).
    """
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    m = np.asarray(max_offset)
    if (m < 1).any():
        raise ValueError("max_offset must be >= 1")
    shape = m.shape if size is None else size
    scalar = size is None and m.ndim == 0
    if gamma == 0.0:
        k = np.ones(shape, dtype=np.int64)
        return int(k) if scalar else k
    u = rng.random(shape)
    log_g = np.log(gamma)
    mass = -np.expm1(m * log_g)  # 1 - gamma**m
    k = np.ceil(np.log1p(-u * mass) / log_g).astype(np.int64)
    k = np.clip(k, 1, m)
    return int(k) if scalar else k


def truncated_geometric_pmf(gamma: float, max_offset: int) -> np.ndarray:
    k = np.arange(1, max_offset + 1)
    if gamma == 0:
        return (k == 1).astype(np.float64)
    w = gamma ** (k - 1.0)
    return w / w.sum()


class TrajectoryBuffer:
    """Struct-of-arrays ring storage, one ring per environment.

    Every slot remembers its episode id and its index inside that episode, so
    a sampled state only ever pairs with goals from later in the same episode.
    """

    def __init__(
        self,
        num_envs: int,
        state_dim: int,
        action_dim: int,
        max_size: int,
        min_size: int = 1,
        dtype=np.float32,
    ):
        if max_size < 1 or num_envs < 1:
            raise ValueError("buffer needs at least one env and one slot")
        if not 0 <= min_size <= max_size:
            raise ValueError("min_replay_size must lie in [0, max_replay_size]")
        self.num_envs = num_envs
        self.capacity = max_size
        self.min_size = min_size
        self.states = np.zeros((num_envs, max_size, state_dim), dtype=dtype)
        self.actions = np.zeros((num_envs, max_size, action_dim), dtype=dtype)
        self.next_states = np.zeros((num_envs, max_size, state_dim), dtype=dtype)
        self.episode = np.full((num_envs, max_size), -1, dtype=np.int64)
        self.t_in_episode = np.zeros((num_envs, max_size), dtype=np.int64)
        self.episode_len = np.zeros((num_envs, max_size), dtype=np.int64)  # filled when an episode closes
        self.cursor = np.zeros(num_envs, dtype=np.int64)
        self.size = np.zeros(num_envs, dtype=np.int64)
        self.current_episode = np.full(num_envs, -1, dtype=np.int64)
        self.current_len = np.zeros(num_envs, dtype=np.int64)
        self.closed = np.ones(num_envs, dtype=bool)

    @property
    def total(self) -> int:
        return int(self.size.sum())

    @property
    def ready(self) -> bool:
        return bool((self.size >= self.min_size).all())

    def nbytes(self) -> int:
        return sum(a.nbytes for a in (self.states, self.actions, self.next_states, self.episode, self.t_in_episode, self.episode_len))

    def _check_episode(self, env: np.ndarray, episode_id: np.ndarray) -> None:
        cont = ~self.closed[env]
        if (cont & (episode_id != self.current_episode[env])).any():
            raise ReplayError("new episode id without closing the previous episode (missing done/truncated)")
        if (~cont & (episode_id == self.current_episode[env])).any():
            raise ReplayError("push after done/truncated must start a new episode")

    def push(self, env_index: int, transition: Transition) -> None:
        if not 0 <= env_index < self.num_envs:
            raise IndexError(f"env_index {env_index} out of range for {self.num_envs} envs")
        self.push_batch(
            transition.state[None],
            transition.action[None],
            transition.next_state[None],
            np.array([transition.done or transition.truncated]),
            np.array([transition.episode_id]),
            env=np.array([env_index]),
        )

    def push_batch(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        next_states: np.ndarray,
        ends: np.ndarray,
        episode_ids: np.ndarray,
        env: np.ndarray | None = None,
    ) -> None:
        """Append one transition per listed env (all envs by default).

        ``ends`` marks transitions that are done or truncated; they close the episode.
        """
        env = np.arange(self.num_envs) if env is None else np.asarray(env)
        episode_ids = np.asarray(episode_ids, dtype=np.int64)
        self._check_episode(env, episode_ids)
        pos = self.cursor[env]
        new_ep = self.closed[env]
        self.current_len[env] = np.where(new_ep, 0, self.current_len[env])
        self.current_episode[env] = episode_ids
        t = self.current_len[env]

        self.states[env, pos] = states
        self.actions[env, pos] = actions
        self.next_states[env, pos] = next_states
        self.episode[env, pos] = episode_ids
        self.t_in_episode[env, pos] = t
        self.current_len[env] = t + 1
        ends = np.asarray(ends, dtype=bool)
        self.closed[env] = ends
        self.cursor[env] = (pos + 1) % self.capacity
        self.size[env] = np.minimum(self.size[env] + 1, self.capacity)
        for e in env[ends]:
            self._close(int(e))

    def _close(self, e: int) -> None:
        length = int(self.current_len[e])
        last = (int(self.cursor[e]) - 1) % self.capacity
        n = min(length, self.capacity)
        slots = (last - np.arange(n)) % self.capacity
        self.episode_len[e, slots] = length

    def _episode_lengths(self, env: np.ndarray, slot: np.ndarray) -> np.ndarray:
        # open episodes only extend as far as what has been written so far
        ep = self.episode[env, slot]
        is_open = (~self.closed[env]) & (ep == self.current_episode[env])
        return np.where(is_open, self.current_len[env], self.episode_len[env, slot])

    def sample_indices(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Uniform (env, slot) pairs over all stored transitions."""
        if not self.ready or self.total == 0:
            raise ReplayError(f"buffer below prefill threshold ({self.min_size} per env)")
        sizes = self.size
        flat = rng.integers(0, int(sizes.sum()), size=n)
        bounds = np.cumsum(sizes)
        env = np.searchsorted(bounds, flat, side="right")
        slot = flat - (bounds[env] - sizes[env])
        # slots [0, size) are ring-ordered from the oldest entry
        oldest = np.where(sizes[env] < self.capacity, 0, self.cursor[env])
        slot = (oldest + slot) % self.capacity
        return env, slot

    def sample_crl_batch(
        self,
        rng: np.random.Generator,
        batch_size: int,
        gamma: float,
        goal_fn: Callable[[np.ndarray], np.ndarray],
        alpha_random: float = 0.0,
    ) -> CrlBatch:
        """States/actions uniform over the buffer, goals from the same episode's future.

        The goal for the transition at episode step t is taken from
        ``next_state`` at step t + k - 1, k ~ truncated geometric on
        {1 .. steps remaining}, i.e. from the state k steps after s_t.
        """
        if batch_size < 2:
            raise ValueError("batch_size must be >= 2 for contrastive training")
        env, slot = self.sample_indices(rng, batch_size)
        t = self.t_in_episode[env, slot]
        remaining = self._episode_lengths(env, slot) - t
        k = truncated_geometric(rng, gamma, remaining)
        goal_slot = (slot + k - 1) % self.capacity
        batch = CrlBatch(
            states=self.states[env, slot],
            actions=self.actions[env, slot],
            future_goals=goal_fn(self.next_states[env, goal_slot]),
            env_index=env,
            state_slot=slot,
            goal_slot=goal_slot,
            offsets=k,
        )
        if alpha_random > 0:
            renv, rslot = self.sample_indices(rng, batch_size)
            batch.random_goals = goal_fn(self.states[renv, rslot])
        return batch


@dataclass
class Trajectory:
    """One complete episode plus the goal it was commanded to reach."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    goal: np.ndarray
    relabeled: bool = False

    def __len__(self) -> int:
        return len(self.states)


def her_relabel(
    trajectory: Trajectory, rng: np.random.Generator, relabel_prob: float, goal_fn: Callable[[np.ndarray], np.ndarray]
) -> Trajectory:
    """Final-state hindsight relabeling: with prob ``relabel_prob`` the goal
    becomes the goal coordinates of the last state reached."""
    if len(trajectory) == 0:
        raise ValueError("cannot relabel an empty trajectory")
    if not 0 <= relabel_prob <= 1:
        raise ValueError("relabel_prob must lie in [0, 1]")
    if rng.random() < relabel_prob:
        return replace(trajectory, goal=goal_fn(trajectory.next_states[-1]).copy(), relabeled=True)
    return trajectory
