import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gcrl.objectives import LossKind, critic_loss, flatnce_grad_oracle, logsumexp_penalty, surrogate_flatnce
from helpers import max_rel_err, numeric_grads

K = LossKind
FLAT = (K.FLATNCE_FWD, K.FLATNCE_BWD, K.FLATNCE_SYM)
SMOOTH = [k for k in K if k not in FLAT]


def _lse(v):
    m = max(v)
    return m + math.log(sum(math.exp(x - m) for x in v))


def _logsig(x):
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def loop_loss(kind: LossKind, L: np.ndarray) -> float:
    """Scalar, entry-by-entry evaluation of each objective's definition."""
    b = len(L)
    rows = [list(map(float, r)) for r in L]
    cols = [list(map(float, c)) for c in L.T]
    if kind is K.INFONCE_FWD:
        return sum(_lse(rows[i]) - rows[i][i] for i in range(b)) / b
    if kind is K.INFONCE_BWD:
        return sum(_lse(cols[i]) - cols[i][i] for i in range(b)) / b
    if kind is K.INFONCE_SYM:
        return loop_loss(K.INFONCE_FWD, L) + loop_loss(K.INFONCE_BWD, L)
    if kind in FLAT:
        return 0.0
    if kind is K.FORWARD_BACKWARD:
        tot = 0.0
        for i in range(b):
            tot += -math.exp(rows[i][i]) + sum(math.exp(rows[i][j]) ** 2 for j in range(b) if j != i) / (2 * (b - 1))
        return tot / b
    pairs = [(i, j) for i in range(b) for j in range(b)]
    if kind is K.DPO:
        return sum(-_logsig(rows[i][i] - rows[i][j]) for i, j in pairs) / len(pairs)
    if kind is K.IPO:
        return sum((rows[i][i] - rows[i][j] - 1) ** 2 for i, j in pairs) / len(pairs)
    if kind is K.SPPO:
        return sum((rows[i][i] - 1) ** 2 + (rows[i][j] + 1) ** 2 for i, j in pairs) / len(pairs)
    if kind is K.NCE_BINARY:
        tot = 0.0
        for i in range(b):
            tot += -(_logsig(rows[i][i]) + sum(_logsig(-rows[i][j]) for j in range(b) if j != i))
        return tot / b
    raise AssertionError(kind)


def flat_oracle(kind: LossKind, L: np.ndarray) -> np.ndarray:
    fwd = flatnce_grad_oracle(L)
    bwd = flatnce_grad_oracle(L.T).T
    return {K.FLATNCE_FWD: fwd, K.FLATNCE_BWD: bwd, K.FLATNCE_SYM: fwd + bwd}[kind]


# ---- closed forms


@pytest.mark.parametrize(
    "kind,expected",
    [
        (K.INFONCE_FWD, math.log(2)),
        (K.INFONCE_BWD, math.log(2)),
        (K.INFONCE_SYM, 2 * math.log(2)),
        (K.DPO, math.log(2)),
        (K.IPO, 1.0),
        (K.SPPO, 2.0),
        (K.FORWARD_BACKWARD, -0.5),
        (K.NCE_BINARY, 2 * math.log(2)),
        (K.FLATNCE_FWD, 0.0),
        (K.FLATNCE_BWD, 0.0),
        (K.FLATNCE_SYM, 0.0),
    ],
)
def test_zero_logit_closed_forms(kind, expected):
    value, _ = critic_loss(kind, np.zeros((2, 2)))
    assert abs(value - expected) <= 1e-9


def test_penalty_closed_form():
    value, _ = logsumexp_penalty(np.zeros((2, 2)), 0.1)
    assert abs(value - 0.1 * math.log(2) ** 2) <= 1e-9
    assert value == pytest.approx(0.04805, abs=1e-5)


def test_identity_logits_infonce():
    value, _ = critic_loss(K.INFONCE_FWD, np.eye(2))
    assert value == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert value == pytest.approx(0.3133, abs=1e-4)


def test_flatnce_oracle_zero_logits():
    g = flatnce_grad_oracle(np.zeros((2, 2)))
    np.testing.assert_array_equal(g, np.array([[-0.5, 0.5], [0.5, -0.5]]) / 2)


# ---- values and gradients against oracles


@pytest.mark.parametrize("kind", list(K))
def test_values_match_loop_oracle(kind, rng):
    for _ in range(5):
        L = rng.normal(scale=2.0, size=(5, 5))
        value, _ = critic_loss(kind, L)
        assert value == pytest.approx(loop_loss(kind, L), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("kind", SMOOTH)
def test_gradients_match_finite_differences(kind, rng):
    for _ in range(10):
        L = rng.normal(size=(6, 6))
        _, grad = critic_loss(kind, L)
        num = numeric_grads(lambda: critic_loss(kind, L)[0], [L])
        assert max_rel_err(grad, num) <= 1e-4


@pytest.mark.parametrize("kind", FLAT)
def test_flatnce_gradient_matches_oracle(kind, rng):
    for _ in range(10):
        L = rng.normal(size=(6, 6))
        _, grad = critic_loss(kind, L)
        np.testing.assert_array_equal(grad, flat_oracle(kind, L))


def test_flatnce_oracle_matches_surrogate_differences(rng):
    for _ in range(5):
        L = rng.normal(size=(5, 5))
        num = numeric_grads(lambda: surrogate_flatnce(L), [L])
        assert max_rel_err(flatnce_grad_oracle(L), num) <= 1e-4


def test_penalty_gradient(rng):
    for beta in (0.1, 2.0):
        L = rng.normal(size=(5, 5))
        _, grad = logsumexp_penalty(L, beta)
        assert max_rel_err(grad, numeric_grads(lambda: logsumexp_penalty(L, beta)[0], [L])) <= 1e-4
    v, g = logsumexp_penalty(L, 0.0)
    assert v == 0.0 and not g.any()
    with pytest.raises(ValueError):
        logsumexp_penalty(L, -1.0)


# ---- identities and invariances


logit_mats = arrays(np.float64, st.integers(2, 6).map(lambda n: (n, n)), elements=st.floats(-20, 20, allow_nan=False))


@given(logit_mats)
@settings(max_examples=60, deadline=None)
def test_symmetric_is_exact_sum(L):
    vs, gs = critic_loss(K.INFONCE_SYM, L)
    vf, gf = critic_loss(K.INFONCE_FWD, L)
    vb, gb = critic_loss(K.INFONCE_BWD, L)
    assert vs == vf + vb
    assert np.array_equal(gs, gf + gb)


@given(logit_mats)
@settings(max_examples=60, deadline=None)
def test_flatnce_values_vanish(L):
    for kind in FLAT:
        assert abs(critic_loss(kind, L)[0]) <= 1e-9


def test_flatnce_gradient_nonzero_for_nonconstant_rows(rng):
    L = rng.normal(size=(4, 4))
    for kind in FLAT:
        assert np.abs(critic_loss(kind, L)[1]).max() > 1e-3


SHIFT_INVARIANT = {K.INFONCE_FWD, K.INFONCE_BWD, K.INFONCE_SYM, *FLAT, K.DPO, K.IPO}


@pytest.mark.parametrize("kind", list(K))
def test_shift_invariance_table(kind, rng):
    L = rng.normal(size=(5, 5))
    a, _ = critic_loss(kind, L)
    b, _ = critic_loss(kind, L + 1.7)
    if kind in SHIFT_INVARIANT:
        assert b == pytest.approx(a, abs=1e-9)
    else:
        assert abs(b - a) > 1e-3


def test_penalty_not_shift_invariant(rng):
    L = rng.normal(size=(5, 5))
    assert abs(logsumexp_penalty(L, 0.1)[0] - logsumexp_penalty(L + 1.7, 0.1)[0]) > 1e-3


def _below_targets(kind: LossKind, L: np.ndarray) -> np.ndarray:
    # Sppo pulls positives toward +1 and Ipo pulls margins toward +1, so the
    # monotone direction only exists while positives sit below those targets
    if kind in (K.SPPO, K.IPO):
        L = L.copy()
        np.fill_diagonal(L, L.min(axis=1) - np.abs(np.diag(L)))
    return L


@pytest.mark.parametrize("kind", list(K))
def test_raising_the_diagonal_lowers_the_loss(kind, rng):
    # FlatNCE values are constant, so its non-detached surrogate carries the check
    value = (lambda M: surrogate_flatnce(M) + surrogate_flatnce(M.T)) if kind in FLAT else (lambda M: critic_loss(kind, M)[0])
    for _ in range(10):
        L = _below_targets(kind, rng.normal(size=(6, 6)))
        assert value(L + 0.1 * np.eye(6)) < value(L)


@pytest.mark.parametrize("kind", [K.SPPO, K.IPO])
def test_targeted_losses_rise_past_their_targets(kind):
    L = np.zeros((4, 4))
    np.fill_diagonal(L, 3.0)
    assert critic_loss(kind, L + 0.1 * np.eye(4))[0] > critic_loss(kind, L)[0]


def test_rejects_bad_shapes():
    for kind in K:
        with pytest.raises(ValueError):
            critic_loss(kind, np.zeros((1, 1)))
        with pytest.raises(ValueError):
            critic_loss(kind, np.zeros((2, 3)))


def test_parse_aliases():
    assert K.parse("InfoNCE-sym") is K.INFONCE_SYM
    assert K.parse("nce_binary") is K.NCE_BINARY
    assert len(K) == 11
    with pytest.raises(ValueError):
        K.parse("triplet")
