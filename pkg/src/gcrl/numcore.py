"""Dense numeric kernels: matmul, MLP forward/backward with optional layer norm, Adam.

Matrices are plain 2-D numpy arrays. Training runs in float32; every kernel
also accepts float64 so gradient checks can be run at double precision.

The hidden activation is SiLU (``x * sigmoid(x)``), which is smooth and maps
0 to 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LN_EPS = 1e-6


class ShapeError(ValueError):
    """Raised when array dimensions do not compose."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where it must not."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D arrays, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: overflow-free and much cheaper than a masked exp
    y = np.multiply(x, 0.5, dtype=x.dtype)
    np.tanh(y, out=y)
    y *= 0.5
    y += 0.5
    return y


def silu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s = sigmoid(x)
    return x * s, s


@dataclass
class MlpParams:
    """Weights of a fully connected network.

    ``weights[k]`` has shape (in, out). ``ln_gains``/``ln_biases`` are empty
    when layer norm is disabled, otherwise one entry per hidden layer.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    ln_gains: list[np.ndarray] = field(default_factory=list)
    ln_biases: list[np.ndarray] = field(default_factory=list)
    activation: str = "silu"

    @property
    def layer_norm(self) -> bool:
        return bool(self.ln_gains)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self) -> np.dtype:
        return self.weights[0].dtype

    def arrays(self) -> list[np.ndarray]:
        """Flat, fixed-order view of every parameter array (no copies)."""
        out = []
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append(w)
            out.append(b)
            if self.layer_norm and k < len(self.weights) - 1:
                out.append(self.ln_gains[k])
                out.append(self.ln_biases[k])
        return out

    def names(self) -> list[str]:
        out = []
        for k in range(len(self.weights)):
            out += [f"w{k}", f"b{k}"]
            if self.layer_norm and k < len(self.weights) - 1:
                out += [f"ln_gain{k}", f"ln_bias{k}"]
        return out

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            [np.zeros_like(g) for g in self.ln_gains],
            [np.zeros_like(b) for b in self.ln_biases],
            self.activation,
        )

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [g.copy() for g in self.ln_gains],
            [b.copy() for b in self.ln_biases],
            self.activation,
        )

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            [g.astype(dtype) for g in self.ln_gains],
            [b.astype(dtype) for b in self.ln_biases],
            self.activation,
        )


def init_mlp(
    rng: np.random.Generator,
    widths: Sequence[int],
    layer_norm: bool = False,
    final_scale: float = 1.0,
    dtype=np.float32,
) -> MlpParams:
    """Fan-in scaled uniform init, zero biases, unit layer-norm gains.

    ``final_scale`` shrinks the output layer (the actor uses 1e-2).
    """
    if len(widths) < 2:
        raise ShapeError("an MLP needs at least an input and an output width")
    weights, biases, gains, ln_biases = [], [], [], []
    n_layers = len(widths) - 1
    for k in range(n_layers):
        fan_in, fan_out = widths[k], widths[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if k == n_layers - 1:
            w = w * final_scale
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
        if layer_norm and k < n_layers - 1:
            gains.append(np.ones(fan_out, dtype=dtype))
            ln_biases.append(np.zeros(fan_out, dtype=dtype))
    return MlpParams(weights, biases, gains, ln_biases)


@dataclass
class ForwardCache:
    params_id: int
    inputs: list[np.ndarray]  # input to each affine layer
    xhat: list[np.ndarray]  # normalized pre-activations (layer norm only)
    inv_std: list[np.ndarray]
    act_in: list[np.ndarray]  # argument of the activation
    sig: list[np.ndarray]  # sigmoid(act_in), reused by the SiLU derivative


def mlp_forward(params: MlpParams, x: np.ndarray, train: bool = True) -> tuple[np.ndarray, ForwardCache | None]:
    """Affine -> [layer norm] -> SiLU per hidden layer, affine output layer.

    With ``train=False`` no cache is built and ``None`` is returned in its place.
    """
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ShapeError(f"MLP expects input of width {params.in_dim}, got shape {x.shape}")
    n_layers = len(params.weights)
    cache = ForwardCache(id(params), [], [], [], [], []) if train else None
    h = x
    for k in range(n_layers):
        if train:
            cache.inputs.append(h)
        z = h @ params.weights[k]
        z += params.biases[k]
        if k == n_layers - 1:
            return z, cache
        if params.layer_norm:
            mu = z.mean(axis=1, keepdims=True)
            zc = z - mu
            var = np.mean(zc * zc, axis=1, keepdims=True)
            inv_std = 1.0 / np.sqrt(var + LN_EPS)
            xhat = zc * inv_std
            z = xhat * params.ln_gains[k] + params.ln_biases[k]
            if train:
                cache.xhat.append(xhat)
                cache.inv_std.append(inv_std)
        h, s = silu(z)
        if train:
            cache.act_in.append(z)
            cache.sig.append(s)
    raise AssertionError("unreachable")


def mlp_backward(params: MlpParams, cache: ForwardCache, dy: np.ndarray) -> tuple[np.ndarray, MlpParams]:
    """Reverse-mode gradients of :func:`mlp_forward` for cotangent ``dy``."""
    if cache is None or cache.params_id != id(params) or len(cache.inputs) != len(params.weights):
        raise ValueError("forward cache does not belong to these parameters")
    n_layers = len(params.weights)
    if dy.shape != (cache.inputs[0].shape[0], params.out_dim):
        raise ShapeError(f"cotangent shape {dy.shape} does not match output")
    dw: list[np.ndarray] = [None] * n_layers
    db: list[np.ndarray] = [None] * n_layers
    dg: list[np.ndarray] = [None] * (n_layers - 1) if params.layer_norm else []
    dlb: list[np.ndarray] = [None] * (n_layers - 1) if params.layer_norm else []
    g = dy
    for k in range(n_layers - 1, -1, -1):
        dw[k] = cache.inputs[k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
        if k == 0:
            break
        # through the SiLU of hidden layer k-1
        z, s = cache.act_in[k - 1], cache.sig[k - 1]
        g = g * (s * (1.0 + z * (1.0 - s)))
        if params.layer_norm:
            xhat, inv_std = cache.xhat[k - 1], cache.inv_std[k - 1]
            dg[k - 1] = np.sum(g * xhat, axis=0)
            dlb[k - 1] = g.sum(axis=0)
            gx = g * params.ln_gains[k - 1]
            g = inv_std * (gx - gx.mean(axis=1, keepdims=True) - xhat * np.mean(gx * xhat, axis=1, keepdims=True))
    return g, MlpParams(dw, db, dg, dlb, params.activation)


@dataclass
class AdamHyper:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, hyper: AdamHyper) -> None:
    """One bias-corrected Adam step, applied in place to ``params`` and ``state``.

    Weight decay is decoupled: ``p -= lr * weight_decay * p`` before the Adam delta.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to adam_step")
    state.t += 1
    b1, b2, lr = hyper.beta1, hyper.beta2, hyper.learning_rate
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    step = lr / bc1
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if hyper.weight_decay > 0:
            p -= (lr * hyper.weight_decay) * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= step * m / (np.sqrt(v / bc2) + hyper.epsilon)


def finite_diff_grad(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a flat float64 vector."""
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        fp = f(x)
        x[i] = orig - eps
        fm = f(x)
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad


def flatten(arrays: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)


def unflatten_into(vec: np.ndarray, arrays: Sequence[np.ndarray]) -> None:
    """Write a flat vector back into ``arrays`` in place."""
    i = 0
    for a in arrays:
        n = a.size
        a[...] = vec[i : i + n].reshape(a.shape)
        i += n
    if i != vec.size:
        raise ShapeError("flat vector length does not match the arrays")
