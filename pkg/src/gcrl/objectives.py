"""Contrastive critic objectives over a square logits matrix.

Diagonal entries are positives, off-diagonal entries negatives. Every loss
returns ``(value, dlogits)`` with mean reduction over rows (InfoNCE family,
FB, NCE-binary) or over all B*B pairs (DPO, IPO, SPPO). Values are numpy
scalars in the logits dtype, so extended-precision inputs stay extended.
"""

from __future__ import annotations

import enum

import numpy as np

from .numcore import ShapeError, sigmoid


class LossKind(str, enum.Enum):
    INFONCE_FWD = "fwd_infonce"
    INFONCE_BWD = "bwd_infonce"
    INFONCE_SYM = "symmetric_infonce"
    FLATNCE_FWD = "fwd_flatnce"
    FLATNCE_BWD = "bwd_flatnce"
    FLATNCE_SYM = "sym_flatnce"
    FORWARD_BACKWARD = "fb"
    DPO = "dpo"
    IPO = "ipo"
    SPPO = "sppo"
    NCE_BINARY = "nce_binary"

    @classmethod
    def parse(cls, name: "str | LossKind") -> "LossKind":
        if isinstance(name, LossKind):
            return name
        key = name.strip().lower().replace("-", "_")
        aliases = {
            "infonce": "fwd_infonce",
            "infonce_fwd": "fwd_infonce",
            "infonce_bwd": "bwd_infonce",
            "infonce_sym": "symmetric_infonce",
            "sym_infonce": "symmetric_infonce",
            "flatnce": "fwd_flatnce",
            "flatnce_fwd": "fwd_flatnce",
            "flatnce_bwd": "bwd_flatnce",
            "flatnce_sym": "sym_flatnce",
            "symmetric_flatnce": "sym_flatnce",
            "forward_backward": "fb",
            "binary": "nce_binary",
            "binary_nce": "nce_binary",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown contrastive loss {name!r}; choose from {[k.value for k in cls]}") from None


def log_sigmoid(x: np.ndarray) -> np.ndarray:
    # log sigma(x) = min(x, 0) - log1p(exp(-|x|))
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def _row_softmax_lse(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    s = e.sum(axis=1, keepdims=True)
    return e / s, (m + np.log(s))[:, 0]


def _infonce_rows(logits: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    p, lse = _row_softmax_lse(logits)
    value = np.mean(lse - np.diagonal(logits))
    grad = p
    grad[np.diag_indices(b)] -= 1.0
    grad /= b
    return value, grad


def _flatnce_rows(logits: np.ndarray) -> tuple[float, np.ndarray]:
    # value: -log(S / detach(S)) is exactly zero; gradient: that of mean_i log S_i,
    # S_i = sum_j exp(l_ij - l_ii)
    b = logits.shape[0]
    shifted = logits - np.diagonal(logits)[:, None]
    m = shifted.max(axis=1, keepdims=True)
    e = np.exp(shifted - m)
    s = e.sum(axis=1, keepdims=True)
    log_s = m + np.log(s)
    value = np.mean(log_s - log_s)
    grad = e / s
    grad[np.diag_indices(b)] -= 1.0
    grad /= b
    return value, grad


def critic_loss(kind: LossKind, logits: np.ndarray) -> tuple[float, np.ndarray]:
    kind = LossKind.parse(kind)
    if logits.ndim != 2 or logits.shape[0] != logits.shape[1]:
        raise ShapeError(f"contrastive losses need a square logits matrix, got {logits.shape}")
    b = logits.shape[0]
    if b < 2:
        raise ValueError("contrastive losses need a batch of at least 2 (no negatives otherwise)")
    diag = np.diagonal(logits)
    idx = np.diag_indices(b)

    if kind is LossKind.INFONCE_FWD:
        return _infonce_rows(logits)
    if kind is LossKind.INFONCE_BWD:
        v, g = _infonce_rows(logits.T)
        return v, g.T
    if kind is LossKind.INFONCE_SYM:
        vf, gf = critic_loss(LossKind.INFONCE_FWD, logits)
        vb, gb = critic_loss(LossKind.INFONCE_BWD, logits)
        return vf + vb, gf + gb
    if kind is LossKind.FLATNCE_FWD:
        return _flatnce_rows(logits)
    if kind is LossKind.FLATNCE_BWD:
        v, g = _flatnce_rows(logits.T)
        return v, g.T
    if kind is LossKind.FLATNCE_SYM:
        vf, gf = critic_loss(LossKind.FLATNCE_FWD, logits)
        vb, gb = critic_loss(LossKind.FLATNCE_BWD, logits)
        return vf + vb, gf + gb

    if kind is LossKind.FORWARD_BACKWARD:
        e2 = np.exp(2.0 * logits)
        e2[idx] = 0.0
        ed = np.exp(diag)
        c = 1.0 / (2.0 * (b - 1))
        value = np.mean(-ed + c * e2.sum(axis=1))
        grad = (2.0 * c / b) * e2
        grad[idx] = -ed / b
        return value, grad

    if kind is LossKind.NCE_BINARY:
        pos = log_sigmoid(diag)
        neg = log_sigmoid(-logits)  # log(1 - sigma(x)) = log sigma(-x)
        neg[idx] = 0.0
        value = np.mean(-(pos + neg.sum(axis=1)))
        grad = sigmoid(logits) / b
        grad[idx] = -sigmoid(-diag) / b
        return value, grad

    # pairwise objectives over d_ij = l_ii - l_ij, averaged over all B*B pairs
    n = b * b
    diff = diag[:, None] - logits
    if kind is LossKind.DPO:
        value = np.mean(-log_sigmoid(diff))
        dd = -sigmoid(-diff) / n
    elif kind is LossKind.IPO:
        r = diff - 1.0
        value = np.mean(r * r)
        dd = 2.0 * r / n
    elif kind is LossKind.SPPO:
        rp = diag - 1.0
        rn = logits + 1.0
        value = np.mean(rp[:, None] * rp[:, None] + rn * rn)
        grad = (2.0 / n) * rn
        grad[idx] += (2.0 * b / n) * rp
        return value, grad
    else:  # pragma: no cover - the enum is closed
        raise ValueError(kind)
    # d(diff_ij)/d(l_ii) = +1 summed over j, d(diff_ij)/d(l_ij) = -1
    grad = -dd
    grad[idx] += dd.sum(axis=1)
    return value, grad


def logsumexp_penalty(logits: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """beta * mean_i (logsumexp_j logits_ij)^2 and its gradient."""
    if beta < 0:
        raise ValueError("logsumexp penalty coefficient must be >= 0")
    if beta == 0:
        return 0.0, np.zeros_like(logits)
    b = logits.shape[0]
    p, lse = _row_softmax_lse(logits)
    value = beta * np.mean(lse * lse)
    grad = p * ((2.0 * beta / b) * lse)[:, None]
    return value, grad


def flatnce_grad_oracle(logits: np.ndarray) -> np.ndarray:
    """Row-by-row gradient of mean_i log sum_j exp(l_ij - l_ii).

    Written as an explicit per-row loop so it can cross-check the batched path.
    """
    b = logits.shape[0]
    out = np.empty_like(logits)
    for i in range(b):
        row = logits[i] - logits[i, i]
        m = row.max()
        e = np.exp(row - m)
        w = e / e.sum()
        w[i] -= 1.0
        out[i] = w / b
    return out


def surrogate_flatnce(logits: np.ndarray) -> float:
    """Non-detached FlatNCE-fwd surrogate, whose gradient FlatNCE-fwd follows."""
    shifted = logits - np.diagonal(logits)[:, None]
    m = shifted.max(axis=1, keepdims=True)
    return np.mean(m[:, 0] + np.log(np.exp(shifted - m).sum(axis=1)))
