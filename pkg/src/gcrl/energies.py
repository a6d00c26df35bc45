"""Critic energy functions f(phi_i, psi_j) as batched logits matrices.

All metric energies are negated distances, so larger means "more likely the
goal is in this state-action's future".
"""

from __future__ import annotations

import enum

import numpy as np

from .numcore import ShapeError

NORM_EPS = 1e-8


class EnergyKind(str, enum.Enum):
    COSINE = "cos"
    DOT = "dot"
    L1 = "l1"
    L2 = "l2"
    L2_NO_SQRT = "l2_no_sqrt"

    @classmethod
    def parse(cls, name: "str | EnergyKind") -> "EnergyKind":
        if isinstance(name, EnergyKind):
            return name
        key = name.strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"cosine": "cos", "l2_w/o_sqrt": "l2_no_sqrt", "l2_wo_sqrt": "l2_no_sqrt", "norm": "l2"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown energy function {name!r}; choose from {[k.value for k in cls]}") from None


def _check(phi: np.ndarray, psi: np.ndarray) -> None:
    if phi.ndim != 2 or phi.shape[1] != psi.shape[1] or psi.ndim != 2:
        raise ShapeError(f"phi {phi.shape} and psi {psi.shape} must be 2-D with equal width")


def _sq_dists(phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    a = np.sum(phi * phi, axis=1)
    b = np.sum(psi * psi, axis=1)
    sq = a[:, None] + b[None, :] - 2.0 * (phi @ psi.T)
    return np.maximum(sq, 0.0, out=sq)


def energy_matrix(kind: EnergyKind, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """logits[i, j] = f(phi[i], psi[j]); phi is (B, d), psi is (C, d)."""
    kind = EnergyKind.parse(kind)
    _check(phi, psi)
    if kind is EnergyKind.DOT:
        return phi @ psi.T
    if kind is EnergyKind.COSINE:
        u = phi / np.maximum(np.linalg.norm(phi, axis=1, keepdims=True), NORM_EPS)
        v = psi / np.maximum(np.linalg.norm(psi, axis=1, keepdims=True), NORM_EPS)
        return u @ v.T
    if kind is EnergyKind.L1:
        return -np.abs(phi[:, None, :] - psi[None, :, :]).sum(axis=2)
    sq = _sq_dists(phi, psi)
    if kind is EnergyKind.L2_NO_SQRT:
        return -sq
    return -np.sqrt(sq)


def energy_backward(
    kind: EnergyKind, phi: np.ndarray, psi: np.ndarray, dlogits: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`energy_matrix` w.r.t. phi and psi."""
    kind = EnergyKind.parse(kind)
    _check(phi, psi)
    if dlogits.shape != (phi.shape[0], psi.shape[0]):
        raise ShapeError(f"dlogits shape {dlogits.shape} does not match logits")
    g = dlogits
    if kind is EnergyKind.DOT:
        return g @ psi, g.T @ phi
    if kind is EnergyKind.COSINE:
        nphi = np.linalg.norm(phi, axis=1, keepdims=True)
        npsi = np.linalg.norm(psi, axis=1, keepdims=True)
        cphi, cpsi = np.maximum(nphi, NORM_EPS), np.maximum(npsi, NORM_EPS)
        u, v = phi / cphi, psi / cpsi
        du, dv = g @ v, g.T @ u
        # the clamped norm is constant below the floor, so only the scaling survives there
        dphi = np.where(nphi > NORM_EPS, (du - u * np.sum(u * du, axis=1, keepdims=True)) / cphi, du / cphi)
        dpsi = np.where(npsi > NORM_EPS, (dv - v * np.sum(v * dv, axis=1, keepdims=True)) / cpsi, dv / cpsi)
        return dphi, dpsi
    if kind is EnergyKind.L1:
        sgn = np.sign(phi[:, None, :] - psi[None, :, :])
        dphi = -np.einsum("ij,ijk->ik", g, sgn)
        dpsi = np.einsum("ij,ijk->jk", g, sgn)
        return dphi, dpsi
    if kind is EnergyKind.L2_NO_SQRT:
        h = -g
    else:
        dist = np.sqrt(_sq_dists(phi, psi))
        h = -g / (2.0 * np.maximum(dist, NORM_EPS))
    # h = dL/d(sq); sq_ij = |phi_i|^2 + |psi_j|^2 - 2 phi_i . psi_j
    dphi = 2.0 * (h.sum(axis=1)[:, None] * phi - h @ psi)
    dpsi = 2.0 * (h.sum(axis=0)[:, None] * psi - h.T @ phi)
    return dphi, dpsi


def energy_pairs(kind: EnergyKind, phi: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Row-aligned energies f(phi[i], psi[i]), shape (B,)."""
    kind = EnergyKind.parse(kind)
    if phi.shape != psi.shape:
        raise ShapeError(f"paired energy needs equal shapes, got {phi.shape} and {psi.shape}")
    if kind is EnergyKind.DOT:
        return np.sum(phi * psi, axis=1)
    if kind is EnergyKind.COSINE:
        nphi = np.maximum(np.linalg.norm(phi, axis=1), NORM_EPS)
        npsi = np.maximum(np.linalg.norm(psi, axis=1), NORM_EPS)
        return np.sum(phi * psi, axis=1) / (nphi * npsi)
    diff = phi - psi
    if kind is EnergyKind.L1:
        return -np.abs(diff).sum(axis=1)
    sq = np.sum(diff * diff, axis=1)
    if kind is EnergyKind.L2_NO_SQRT:
        return -sq
    return -np.sqrt(sq)


def energy_pairs_backward(
    kind: EnergyKind, phi: np.ndarray, psi: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    kind = EnergyKind.parse(kind)
    d = dout[:, None]
    if kind is EnergyKind.DOT:
        return d * psi, d * phi
    if kind is EnergyKind.COSINE:
        nphi = np.linalg.norm(phi, axis=1, keepdims=True)
        npsi = np.linalg.norm(psi, axis=1, keepdims=True)
        cphi, cpsi = np.maximum(nphi, NORM_EPS), np.maximum(npsi, NORM_EPS)
        u, v = phi / cphi, psi / cpsi
        c = np.sum(u * v, axis=1, keepdims=True)
        dphi = np.where(nphi > NORM_EPS, d * (v - c * u) / cphi, d * v / cphi)
        dpsi = np.where(npsi > NORM_EPS, d * (u - c * v) / cpsi, d * u / cpsi)
        return dphi, dpsi
    diff = phi - psi
    if kind is EnergyKind.L1:
        gd = -d * np.sign(diff)
    elif kind is EnergyKind.L2_NO_SQRT:
        gd = -2.0 * d * diff
    else:
        dist = np.sqrt(np.sum(diff * diff, axis=1, keepdims=True))
        gd = -d * diff / np.maximum(dist, NORM_EPS)
    return gd, -gd
