"""Contrastive actor-critic: encoders phi(s, a), psi(g) and a tanh-Gaussian actor.

The agent mutates its parameters in place; update methods return diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energies import EnergyKind, energy_backward, energy_matrix, energy_pairs, energy_pairs_backward
from .numcore import AdamHyper, AdamState, MlpParams, NonFiniteError, adam_step, init_mlp, mlp_backward, mlp_forward
from .objectives import LossKind, critic_loss, logsumexp_penalty
from .replay import CrlBatch

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
TANH_EPS = 1e-6
# float32 tanh rounds to exactly +-1 for |u| > 9; emitted actions stay inside
ACTION_BOUND = np.float32(1.0 - 1e-6)
HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class AgentConfig:
    state_dim: int
    action_dim: int
    goal_dim: int
    repr_dim: int = 64
    hidden: tuple[int, ...] = (256, 256)
    layer_norm: bool = False
    energy: EnergyKind = EnergyKind.L2
    loss: LossKind = LossKind.INFONCE_SYM
    logsumexp_penalty: float = 0.1
    alpha_random: float = 0.0
    policy_lr: float = 6e-4
    critic_lr: float = 3e-4
    entropy_lr: float = 3e-4
    weight_decay: float = 0.0
    init_log_entropy_coef: float = 0.0
    target_entropy: float | None = None

    def __post_init__(self):
        self.energy = EnergyKind.parse(self.energy)
        self.loss = LossKind.parse(self.loss)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.repr_dim <= 0:
            raise ValueError("repr_dim must be positive")
        if not 0 <= self.alpha_random <= 1:
            raise ValueError("alpha_random must lie in [0, 1]")
        if self.target_entropy is None:
            self.target_entropy = -float(self.action_dim)


@dataclass
class UpdateStats:
    critic_loss: float = 0.0
    penalty: float = 0.0
    actor_loss: float = 0.0
    entropy: float = 0.0
    entropy_coef: float = 0.0
    logits_diag: float = 0.0
    logits_offdiag: float = 0.0


@dataclass
class CrlAgent:
    config: AgentConfig
    sa_encoder: MlpParams
    goal_encoder: MlpParams
    actor: MlpParams
    log_entropy_coef: np.ndarray
    sa_opt: AdamState = field(repr=False, default=None)
    goal_opt: AdamState = field(repr=False, default=None)
    actor_opt: AdamState = field(repr=False, default=None)
    entropy_opt: AdamState = field(repr=False, default=None)

    def __post_init__(self):
        self.sa_opt = self.sa_opt or AdamState.zeros(self.sa_encoder.arrays())
        self.goal_opt = self.goal_opt or AdamState.zeros(self.goal_encoder.arrays())
        self.actor_opt = self.actor_opt or AdamState.zeros(self.actor.arrays())
        self.entropy_opt = self.entropy_opt or AdamState.zeros([self.log_entropy_coef])

    @classmethod
    def create(cls, config: AgentConfig, rng: np.random.Generator, dtype=np.float32) -> "CrlAgent":
        c = config
        hid = list(c.hidden)
        sa = init_mlp(rng, [c.state_dim + c.action_dim, *hid, c.repr_dim], c.layer_norm, dtype=dtype)
        g = init_mlp(rng, [c.goal_dim, *hid, c.repr_dim], c.layer_norm, dtype=dtype)
        actor = init_mlp(rng, [c.state_dim + c.goal_dim, *hid, 2 * c.action_dim], c.layer_norm, final_scale=1e-2, dtype=dtype)
        return cls(c, sa, g, actor, np.array([c.init_log_entropy_coef], dtype=dtype))

    @property
    def dtype(self):
        return self.actor.dtype

    @property
    def entropy_coef(self) -> float:
        return float(np.exp(self.log_entropy_coef[0]))

    def astype(self, dtype) -> "CrlAgent":
        """Copy with parameters cast to ``dtype`` and fresh optimizer state."""
        return CrlAgent(
            self.config,
            self.sa_encoder.astype(dtype),
            self.goal_encoder.astype(dtype),
            self.actor.astype(dtype),
            self.log_entropy_coef.astype(dtype),
        )

    # -- actor ---------------------------------------------------------------

    def _actor_head(self, states: np.ndarray, goals: np.ndarray, train: bool):
        a_dim = self.config.action_dim
        x = np.concatenate([states, goals], axis=1).astype(self.dtype, copy=False)
        out, cache = mlp_forward(self.actor, x, train)
        mu = out[:, :a_dim]
        raw = out[:, a_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        return mu, log_std, raw, cache

    def act_mode(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        mu, _, _, _ = self._actor_head(states, goals, train=False)
        return np.clip(np.tanh(mu), -ACTION_BOUND, ACTION_BOUND)

    def actor_sample(
        self, states: np.ndarray, goals: np.ndarray, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Reparameterized tanh-Gaussian sample and its log-density."""
        if len(states) != len(goals):
            raise ValueError("states and goals must have the same number of rows")
        mu, log_std, _, _ = self._actor_head(states, goals, train=False)
        eps = rng.standard_normal(mu.shape).astype(self.dtype)
        actions, log_prob, _ = squash(mu, log_std, eps)
        return np.clip(actions, -ACTION_BOUND, ACTION_BOUND), log_prob

    # -- critic --------------------------------------------------------------

    def critic_objective(self, batch: CrlBatch):
        """Loss, encoder gradients and diagnostics for one batch (no parameter change)."""
        c = self.config
        dt = self.dtype
        x = np.concatenate([batch.states, batch.actions], axis=1).astype(dt, copy=False)
        phi, sa_cache = mlp_forward(self.sa_encoder, x)
        psi, g_cache = mlp_forward(self.goal_encoder, batch.future_goals.astype(dt, copy=False))
        logits = energy_matrix(c.energy, phi, psi)
        loss, dlogits = critic_loss(c.loss, logits)
        pen, dpen = logsumexp_penalty(logits, c.logsumexp_penalty)
        total = loss + pen
        if not np.isfinite(total):
            raise NonFiniteError(
                f"non-finite critic loss (loss={loss}, penalty={pen}, "
                f"max|logit|={float(np.max(np.abs(logits))) if np.isfinite(logits).all() else 'nan'})"
            )
        dphi, dpsi = energy_backward(c.energy, phi, psi, dlogits + dpen)
        _, g_sa = mlp_backward(self.sa_encoder, sa_cache, dphi)
        _, g_goal = mlp_backward(self.goal_encoder, g_cache, dpsi)
        b = logits.shape[0]
        diag = np.diagonal(logits)
        stats = UpdateStats(
            critic_loss=float(loss),
            penalty=float(pen),
            logits_diag=float(np.mean(np.abs(diag))),
            logits_offdiag=float((np.abs(logits).sum() - np.abs(diag).sum()) / (b * (b - 1))),
        )
        return total, g_sa, g_goal, stats

    def critic_update(self, batch: CrlBatch) -> UpdateStats:
        _, g_sa, g_goal, stats = self.critic_objective(batch)
        hyper = AdamHyper(self.config.critic_lr, weight_decay=self.config.weight_decay)
        adam_step(self.sa_encoder.arrays(), g_sa.arrays(), self.sa_opt, hyper)
        adam_step(self.goal_encoder.arrays(), g_goal.arrays(), self.goal_opt, hyper)
        return stats

    # -- actor update --------------------------------------------------------

    def _goal_terms(self, batch: CrlBatch) -> list[tuple[float, np.ndarray]]:
        alpha = self.config.alpha_random
        if alpha == 0:
            return [(1.0, batch.future_goals)]
        if batch.random_goals is None:
            raise ValueError("alpha_random > 0 needs random_goals in the batch")
        return [(1.0 - alpha, batch.future_goals), (alpha, batch.random_goals)]

    def draw_actor_noise(self, batch: CrlBatch, rng: np.random.Generator) -> list[np.ndarray]:
        shape = (len(batch.states), self.config.action_dim)
        return [rng.standard_normal(shape).astype(self.dtype) for _ in self._goal_terms(batch)]

    def actor_objective(self, batch: CrlBatch, noise: list[np.ndarray]):
        """Actor loss = -[sum_w w * mean(f(s, a', g) - coef * log pi(a'|s, g))] with frozen noise.

        Returns (loss, actor gradient, log_probs of the future-goal sample).
        """
        c = self.config
        dt = self.dtype
        coef = self.entropy_coef
        states = batch.states.astype(dt, copy=False)
        grads = None
        loss = 0.0
        first_logp = None
        for (w, goals), eps in zip(self._goal_terms(batch), noise):
            goals = goals.astype(dt, copy=False)
            b = len(states)
            mu, log_std, raw, a_cache = self._actor_head(states, goals, train=True)
            actions, logp, tanh_grad = squash(mu, log_std, eps)
            phi, sa_cache = mlp_forward(self.sa_encoder, np.concatenate([states, actions], axis=1))
            psi, _ = mlp_forward(self.goal_encoder, goals, train=False)
            f = energy_pairs(c.energy, phi, psi)
            loss += w * float(np.mean(-f + coef * logp))
            df = np.full(b, -w / b, dtype=dt)
            dphi, _ = energy_pairs_backward(c.energy, phi, psi, df)
            dx, _ = mlp_backward(self.sa_encoder, sa_cache, dphi)
            da = dx[:, c.state_dim :]
            dlogp = w * coef / b
            # logp = sum(-eps^2/2 - log_std - log(2 pi)/2) - sum log(1 - a^2 + eps)
            du = da * (1.0 - actions * actions) + dlogp * tanh_grad
            dmu = du
            dlog_std = du * np.exp(log_std) * eps - dlogp
            dlog_std = np.where((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX), dlog_std, 0.0)
            _, g = mlp_backward(self.actor, a_cache, np.concatenate([dmu, dlog_std], axis=1).astype(dt, copy=False))
            if grads is None:
                grads, first_logp = g, logp
            else:
                for acc, extra in zip(grads.arrays(), g.arrays()):
                    acc += extra
        return loss, grads, first_logp

    def actor_update(self, batch: CrlBatch, rng: np.random.Generator) -> tuple[UpdateStats, np.ndarray]:
        noise = self.draw_actor_noise(batch, rng)
        loss, grads, logp = self.actor_objective(batch, noise)
        if not np.isfinite(loss):
            raise NonFiniteError(f"non-finite actor loss {loss}")
        adam_step(self.actor.arrays(), grads.arrays(), self.actor_opt, AdamHyper(self.config.policy_lr))
        stats = UpdateStats(actor_loss=loss, entropy=float(-np.mean(logp)), entropy_coef=self.entropy_coef)
        return stats, logp

    def entropy_coef_update(self, log_probs: np.ndarray) -> float:
        """Adam step on log(coef) for the loss coef * mean(-log_prob - target_entropy)."""
        gap = float(np.mean(-log_probs)) - self.config.target_entropy
        grad = np.array([self.entropy_coef * gap], dtype=self.log_entropy_coef.dtype)
        adam_step([self.log_entropy_coef], [grad], self.entropy_opt, AdamHyper(self.config.entropy_lr))
        return self.entropy_coef

    def update(self, batch: CrlBatch, rng: np.random.Generator) -> UpdateStats:
        """Critic step, then actor step, then entropy-coefficient step."""
        stats = self.critic_update(batch)
        a_stats, logp = self.actor_update(batch, rng)
        stats.actor_loss = a_stats.actor_loss
        stats.entropy = a_stats.entropy
        stats.entropy_coef = self.entropy_coef_update(logp)
        return stats

    # -- serialization helpers ----------------------------------------------

    def named_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net, opt in (
            ("sa_encoder", self.sa_encoder, self.sa_opt),
            ("goal_encoder", self.goal_encoder, self.goal_opt),
            ("actor", self.actor, self.actor_opt),
        ):
            for name, arr, m, v in zip(net.names(), net.arrays(), opt.m, opt.v):
                out[f"{prefix}/{name}"] = arr
                out[f"{prefix}/adam_m/{name}"] = m
                out[f"{prefix}/adam_v/{name}"] = v
        out["log_entropy_coef"] = self.log_entropy_coef
        out["log_entropy_coef/adam_m"] = self.entropy_opt.m[0]
        out["log_entropy_coef/adam_v"] = self.entropy_opt.v[0]
        return out

    def optimizer_steps(self) -> dict[str, int]:
        return {"sa_encoder": self.sa_opt.t, "goal_encoder": self.goal_opt.t, "actor": self.actor_opt.t, "log_entropy_coef": self.entropy_opt.t}


def squash(mu: np.ndarray, log_std: np.ndarray, eps: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """a = tanh(mu + std * eps) with its log-density and d(log-density)/du."""
    u = mu + np.exp(log_std) * eps
    a = np.tanh(u)
    one_minus = 1.0 - a * a
    gauss = np.sum(-0.5 * eps * eps - log_std - HALF_LOG_2PI, axis=1)
    logp = gauss - np.sum(np.log(one_minus + TANH_EPS), axis=1)
    # d/du of -log(1 - tanh(u)^2 + eps)
    tanh_grad = 2.0 * a * one_minus / (one_minus + TANH_EPS)
    return a, logp, tanh_grad
