import numpy as np
import pytest
from scipy import stats

from gcrl.replay import (
    ReplayError,
    Trajectory,
    TrajectoryBuffer,
    Transition,
    her_relabel,
    truncated_geometric,
    truncated_geometric_pmf,
)

ident = lambda s: s[..., :2]  # noqa: E731


def pmf_oracle(gamma: float, m: int) -> np.ndarray:
    # independent form: P(k) = (1-g) g^(k-1) / (1 - g^m)
    k = np.arange(1, m + 1, dtype=np.float64)
    if gamma == 0:
        return (k == 1).astype(float)
    return (1 - gamma) * gamma ** (k - 1) / (1 - gamma**m)


def chi2_pvalue(samples: np.ndarray, pmf: np.ndarray, min_expected: float = 5.0) -> float:
    """Chi-square goodness of fit, pooling low-expectation cells into the tail."""
    n = len(samples)
    counts = np.bincount(samples - 1, minlength=len(pmf)).astype(float)
    exp = pmf * n
    keep = np.flatnonzero(exp >= min_expected)
    last = keep.max()
    obs_c = np.append(counts[: last + 1], counts[last + 1 :].sum())
    exp_c = np.append(exp[: last + 1], exp[last + 1 :].sum())
    mask = exp_c > 0
    return float(stats.chisquare(obs_c[mask], exp_c[mask]).pvalue)


def make_buffer(lengths, capacity=64, num_envs=1, min_size=1):
    """Sequential episodes per env; state row t of episode e is (e, t, 0, 0)."""
    buf = TrajectoryBuffer(num_envs, 4, 2, capacity, min_size)
    for env in range(num_envs):
        for ep, L in enumerate(lengths):
            for t in range(L):
                s = np.array([ep, t, env, 0.0])
                nxt = np.array([ep, t + 1, env, 0.0])
                buf.push(env, Transition(s, np.zeros(2), nxt, truncated=t == L - 1, done=False, episode_id=ep))
    return buf


# ---- truncated geometric law


def test_pmf_matches_oracle():
    for g, m in ((0.0, 5), (0.5, 7), (0.99, 1000)):
        np.testing.assert_allclose(truncated_geometric_pmf(g, m), pmf_oracle(g, m), rtol=1e-12)


def test_gamma_zero_gives_one():
    rng = np.random.default_rng(0)
    assert truncated_geometric(rng, 0.0, 50) == 1
    assert (truncated_geometric(rng, 0.0, np.full(100, 9)) == 1).all()


@pytest.mark.parametrize("gamma,m", [(0.9, 50), (0.99, 1000), (0.999999, 20)])
def test_chi_square_against_pmf(gamma, m):
    rng = np.random.default_rng(7)
    draws = truncated_geometric(rng, gamma, m, size=100_000)
    assert draws.min() >= 1 and draws.max() <= m
    assert chi2_pvalue(draws, pmf_oracle(gamma, m)) > 0.01


def test_near_one_is_uniform():
    rng = np.random.default_rng(8)
    draws = truncated_geometric(rng, 0.999999, 20, size=100_000)
    assert chi2_pvalue(draws, np.full(20, 1 / 20)) > 0.01


def test_argument_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        truncated_geometric(rng, 0.9, 0)
    with pytest.raises(ValueError):
        truncated_geometric(rng, 1.0, 3)


# ---- ring storage


def test_ring_eviction():
    buf = TrajectoryBuffer(1, 4, 2, max_size=4)
    for t in range(5):
        buf.push(0, Transition(np.full(4, t), np.zeros(2), np.full(4, t + 1), False, False, 0))
    assert buf.total == 4
    assert sorted(buf.states[0, :, 0]) == [1, 2, 3, 4]


def test_constant_memory_after_capacity():
    buf = TrajectoryBuffer(2, 4, 2, max_size=8)
    before = buf.nbytes()
    for t in range(50):
        buf.push_batch(np.zeros((2, 4)), np.zeros((2, 2)), np.zeros((2, 4)), np.zeros(2, bool), np.zeros(2, int))
    assert buf.nbytes() == before and buf.total == 16


def test_push_contract_errors():
    buf = TrajectoryBuffer(2, 4, 2, max_size=8)
    z4, z2 = np.zeros(4), np.zeros(2)
    buf.push(0, Transition(z4, z2, z4, False, True, 0))
    with pytest.raises(ReplayError):
        buf.push(0, Transition(z4, z2, z4, False, False, 0))  # same episode after done
    buf.push(1, Transition(z4, z2, z4, False, False, 3))
    with pytest.raises(ReplayError):
        buf.push(1, Transition(z4, z2, z4, False, False, 4))  # new id without a close
    with pytest.raises(IndexError):
        buf.push(2, Transition(z4, z2, z4, False, False, 0))


def test_sampling_before_prefill_fails():
    buf = make_buffer([3], min_size=10)
    with pytest.raises(ReplayError):
        buf.sample_crl_batch(np.random.default_rng(0), 4, 0.9, ident)
    buf = make_buffer([3])
    with pytest.raises(ValueError):
        buf.sample_crl_batch(np.random.default_rng(0), 1, 0.9, ident)


# ---- CRL batches


def test_forced_pair_length_two():
    buf = TrajectoryBuffer(1, 4, 2, 8)
    s0, s1, s2 = np.array([0, 0, 0, 0.0]), np.array([0, 1, 0, 0.0]), np.array([0, 2, 0, 0.0])
    buf.push(0, Transition(s0, np.zeros(2), s1, False, False, 0))
    buf.push(0, Transition(s1, np.zeros(2), s2, True, False, 0))
    b = buf.sample_crl_batch(np.random.default_rng(0), 64, 0.0, ident)
    # gamma 0: goal is the very next state of each sampled row
    np.testing.assert_array_equal(b.future_goals[:, 1], b.states[:, 1] + 1)
    first = b.states[:, 1] == 0
    assert first.any()
    np.testing.assert_array_equal(b.future_goals[first], np.tile([0.0, 1.0], (first.sum(), 1)))


def test_boundary_audit():
    buf = make_buffer([3, 5, 2, 7, 1, 4], capacity=16, num_envs=3)
    rng = np.random.default_rng(1)
    violations = 0
    for _ in range(100):
        b = buf.sample_crl_batch(rng, 1000, 0.9, lambda s: s)
        same_ep = b.future_goals[:, 0] == b.states[:, 0]
        same_env = b.future_goals[:, 2] == b.states[:, 2]
        later = b.future_goals[:, 1] > b.states[:, 1]
        violations += int((~(same_ep & same_env & later)).sum())
        np.testing.assert_array_equal(b.future_goals[:, 1] - b.states[:, 1], b.offsets)
    assert violations == 0


def test_open_episode_is_truncated_to_written_steps():
    buf = TrajectoryBuffer(1, 4, 2, 32)
    for t in range(6):
        buf.push(0, Transition(np.array([0, t, 0, 0.0]), np.zeros(2), np.array([0, t + 1, 0, 0.0]), False, False, 0))
    b = buf.sample_crl_batch(np.random.default_rng(0), 2000, 0.99, lambda s: s)
    assert b.future_goals[:, 1].max() <= 6
    assert (b.future_goals[:, 1] > b.states[:, 1]).all()


def test_offsets_follow_law_per_remaining_length():
    buf = make_buffer([12], capacity=32)
    rng = np.random.default_rng(2)
    rem, off = [], []
    for _ in range(100):
        b = buf.sample_crl_batch(rng, 1000, 0.8, lambda s: s)
        rem.append(12 - b.states[:, 1].astype(int))
        off.append(b.offsets)
    rem, off = np.concatenate(rem), np.concatenate(off)
    for m in (3, 6, 12):
        sel = off[rem == m]
        assert chi2_pvalue(sel, pmf_oracle(0.8, m)) > 0.01


def test_uniform_occupancy():
    buf = make_buffer([5, 3], capacity=8, num_envs=2)
    rng = np.random.default_rng(3)
    env, slot = buf.sample_indices(rng, 100_000)
    flat = env * 8 + slot
    counts = np.bincount(flat, minlength=16)
    assert stats.chisquare(counts).pvalue > 0.01


def test_random_goals_for_alpha():
    buf = make_buffer([4, 4])
    b = buf.sample_crl_batch(np.random.default_rng(0), 32, 0.9, ident, alpha_random=0.5)
    assert b.random_goals.shape == (32, 2)
    assert buf.sample_crl_batch(np.random.default_rng(0), 32, 0.9, ident).random_goals is None


# ---- HER


def _traj(rng, n=10):
    s = rng.normal(size=(n, 4))
    return Trajectory(s[:-1], np.zeros((n - 1, 2)), s[1:], goal=np.array([9.0, 9.0]))


def test_her_identity_and_final():
    rng = np.random.default_rng(0)
    t = _traj(rng)
    assert her_relabel(t, rng, 0.0, ident) is t
    r = her_relabel(t, rng, 1.0, ident)
    assert r.relabeled
    assert np.linalg.norm(ident(r.next_states[-1]) - r.goal) == 0.0


def test_her_fraction():
    rng = np.random.default_rng(4)
    t = _traj(rng)
    frac = np.mean([her_relabel(t, rng, 0.5, ident).relabeled for _ in range(10_000)])
    assert 0.48 <= frac <= 0.52


def test_her_errors():
    rng = np.random.default_rng(0)
    empty = Trajectory(np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 4)), np.zeros(2))
    with pytest.raises(ValueError):
        her_relabel(empty, rng, 0.5, ident)
    with pytest.raises(ValueError):
        her_relabel(_traj(rng), rng, 1.5, ident)
