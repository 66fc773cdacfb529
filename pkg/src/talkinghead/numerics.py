"""Dense-tensor helpers shared by every trainable stage.

Tensors are plain ``numpy.ndarray`` objects. Training runs in float32; the
same code paths run in float64 when gradients are checked against finite
differences.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

ACTIVATIONS = ("relu", "identity", "sigmoid", "softplus", "tanh")


class ShapeError(ValueError):
    """Raised when array shapes do not chain."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient contains NaN/inf."""


class TrainingDivergence(RuntimeError):
    """A training loop produced a non-finite loss."""

    def __init__(self, stage: str, step: int, detail: str = "") -> None:
        self.stage = stage
        self.step = step
        super().__init__(f"{stage}: training diverged at step {step}" + (f" ({detail})" if detail else ""))


def check_finite_loss(stage: str, step: int, value: float) -> float:
    if not math.isfinite(value):
        raise TrainingDivergence(stage, step, f"loss={value}")
    return value


def cosine_forward(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine similarity of ``(..., D)`` arrays."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    return (a * b).sum(-1) / (na * nb)


def cosine_backward(a: np.ndarray, b: np.ndarray, gc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(gc * cosine_forward(a, b))`` w.r.t. ``a`` and ``b``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    c = ((a * b).sum(-1, keepdims=True)) / (na * nb)
    g = gc[..., None]
    ga = g * (b / (na * nb) - c * a / (na * na))
    gb = g * (a / (na * nb) - c * b / (nb * nb))
    return ga, gb


# ---------------------------------------------------------------------------
# ReLU sign tracing (used by grad_check to skip kink coordinates)
# ---------------------------------------------------------------------------

_relu_trace: list | None = None


@contextlib.contextmanager
def trace_relu() -> Iterator[list]:
    """Record a copy of every ReLU pre-activation evaluated inside the block."""
    global _relu_trace
    prev = _relu_trace
    _relu_trace = []
    try:
        yield _relu_trace
    finally:
        _relu_trace = prev


def relu(z: np.ndarray) -> np.ndarray:
    if _relu_trace is not None:
        _relu_trace.append(np.asarray(z).copy())
    return np.maximum(z, 0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, z).astype(z.dtype, copy=False)


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return relu(z)
    if kind == "identity":
        return z
    if kind == "sigmoid":
        return sigmoid(z)
    if kind == "softplus":
        return softplus(z)
    if kind == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def _activate_grad(kind: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """d activation / d z, given pre-activation ``z`` and output ``a``."""
    if kind == "relu":
        return (z > 0).astype(z.dtype)
    if kind == "identity":
        return np.ones_like(z)
    if kind == "sigmoid":
        return a * (1 - a)
    if kind == "softplus":
        return sigmoid(z)
    if kind == "tanh":
        return 1 - a * a
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# Multilayer perceptron
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Ordered fully connected layers.

    ``weights[i]`` has shape ``(in, out)`` and acts on row vectors, so
    ``y = act(x @ W + b)``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self) -> None:
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: bias {b.shape} does not match weight {w.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {i}: input dim {w.shape[0]} != previous output "
                                 f"{self.weights[i - 1].shape[1]}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @classmethod
    def init(cls, dims: list[int], activations: list[str], rng: np.random.Generator,
             dtype=np.float32) -> "MlpParams":
        """He-uniform weights, zero biases."""
        if len(dims) - 1 != len(activations):
            raise ShapeError("need one activation per layer")
        weights, biases = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            bound = math.sqrt(6.0 / n_in)
            weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype))
            biases.append(np.zeros(n_out, dtype=dtype))
        return cls(weights, biases, list(activations))

    def named(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.{i}.weight"] = w
            out[f"{prefix}.{i}.bias"] = b
        return out

    @classmethod
    def from_named(cls, tensors: dict[str, np.ndarray], prefix: str,
                   activations: list[str]) -> "MlpParams":
        weights = [tensors[f"{prefix}.{i}.weight"] for i in range(len(activations))]
        biases = [tensors[f"{prefix}.{i}.bias"] for i in range(len(activations))]
        return cls(weights, biases, list(activations))


@dataclass
class MlpCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)


def mlp_forward(params: MlpParams, x: np.ndarray, return_cache: bool = False):
    """Evaluate the network on ``x`` of shape ``(..., in_dim)``."""
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"input last dim {x.shape[-1]} != {params.in_dim}")
    cache = MlpCache()
    lead = x.shape[:-1]
    h = x.reshape(-1, x.shape[-1])  # one 2-D GEMM per layer, not one per leading index
    for w, b, act in zip(params.weights, params.biases, params.activations):
        cache.inputs.append(h)
        z = h @ w + b
        h = _activate(act, z)
        cache.pre.append(z)
        cache.post.append(h)
    out = h.reshape(lead + (h.shape[-1],))
    if return_cache:
        return out, cache
    return out


def mlp_backward(params: MlpParams, x: np.ndarray, upstream_grad: np.ndarray,
                 cache: MlpCache | None = None) -> tuple[MlpParams, np.ndarray]:
    """Gradients of ``sum(upstream_grad * mlp_forward(params, x))``.

    Returns a gradient ``MlpParams`` mirroring ``params`` and the gradient
    with respect to ``x``. Leading batch axes are summed over.
    """
    if cache is None:
        out, cache = mlp_forward(params, x, return_cache=True)
    else:
        out = cache.post[-1].reshape(x.shape[:-1] + (params.out_dim,))
    if upstream_grad.shape != out.shape:
        raise ShapeError(f"upstream grad {upstream_grad.shape} != output {out.shape}")
    gws: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    gbs: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    g = upstream_grad.reshape(-1, params.out_dim)
    for i in reversed(range(len(params.weights))):
        gz = g * _activate_grad(params.activations[i], cache.pre[i], cache.post[i])
        gws[i] = cache.inputs[i].T @ gz
        gbs[i] = gz.sum(axis=0)
        g = gz @ params.weights[i].T
    return MlpParams(gws, gbs, list(params.activations)), g.reshape(x.shape)


# ---------------------------------------------------------------------------
# Dilated 1-D convolution (time axis -2, channels last)
# ---------------------------------------------------------------------------


def conv1d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, dilation: int) -> np.ndarray:
    """'Same'-padded dilated convolution.

    ``x``: ``(B, T, C_in)``; ``w``: ``(K, C_in, C_out)`` with odd ``K``;
    output ``(B, T, C_out)``.
    """
    k = w.shape[0]
    if k % 2 != 1:
        raise ShapeError("kernel size must be odd")
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv input channels {x.shape[-1]} != {w.shape[1]}")
    half = (k // 2) * dilation
    t = x.shape[1]
    xp = np.pad(x, ((0, 0), (half, half), (0, 0)))
    y = np.broadcast_to(b, x.shape[:2] + (w.shape[2],)).copy()
    for j in range(k):
        y += xp[:, j * dilation:j * dilation + t] @ w[j]
    return y


def conv1d_backward(x: np.ndarray, w: np.ndarray, dilation: int,
                    gy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(gx, gw, gb)`` for :func:`conv1d_forward`."""
    k = w.shape[0]
    half = (k // 2) * dilation
    t = x.shape[1]
    xp = np.pad(x, ((0, 0), (half, half), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    gy2 = gy.reshape(-1, gy.shape[-1])
    for j in range(k):
        sl = xp[:, j * dilation:j * dilation + t]
        gw[j] = sl.reshape(-1, sl.shape[-1]).T @ gy2
        gxp[:, j * dilation:j * dilation + t] += gy @ w[j].T
    gb = gy2.sum(axis=0)
    return gxp[:, half:half + t], gw, gb


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Plain gradient descent (``kind="sgd"``) or Adam (``kind="adam"``)."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def optimizer_step(state: OptimizerState, params: dict[str, np.ndarray],
                   grads: dict[str, np.ndarray], lr: float | None = None) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return it.

    Adam uses bias-corrected moments:
    ``p -= lr * m_hat / (sqrt(v_hat) + eps)``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient {name!r} shape {g.shape} != {params[name].shape}")
    lr = state.lr if lr is None else lr
    state.step += 1
    if state.kind == "sgd":
        for name, g in grads.items():
            params[name] -= (lr * g).astype(params[name].dtype, copy=False)
        return params
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)
    return params


def training_step(stage: str, step: int, state: OptimizerState, params: dict[str, np.ndarray],
                  grads: dict[str, np.ndarray], lr: float | None = None) -> None:
    """``optimizer_step`` that reports non-finite gradients as a divergence of ``stage``."""
    try:
        optimizer_step(state, params, grads, lr)
    except NonFiniteError as exc:
        raise TrainingDivergence(stage, step, str(exc)) from exc


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped_kinks: int
    flagged: list[tuple[str, tuple[int, ...], float, float]]

    @property
    def passed(self) -> bool:
        return not self.flagged


def grad_check(params: dict[str, np.ndarray],
               loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
               epsilon: float = 1e-5, tolerance: float = 1e-4, *,
               kink_window: float = 1e-3, max_coords_per_tensor: int | None = None,
               rng: np.random.Generator | None = None,
               abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` returns ``(loss, grads)``. Parameters are perturbed in
    place and restored. A coordinate is skipped when some ReLU
    pre-activation of magnitude below ``kink_window`` changes sign between
    the ``+epsilon`` and ``-epsilon`` evaluations.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"grad_check requires float64 parameters; {name!r} is {p.dtype}")
    loss0, grads = loss_fn(params)
    if not math.isfinite(float(loss0)):
        raise NonFiniteError("loss is not finite")
    rng = rng or np.random.default_rng(0)
    flagged = []
    worst = 0.0
    checked = skipped = 0
    for name, p in params.items():
        flat = p.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        idx = np.arange(flat.size)
        if max_coords_per_tensor is not None and flat.size > max_coords_per_tensor:
            idx = np.sort(rng.choice(flat.size, size=max_coords_per_tensor, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            with trace_relu() as tr_plus:
                lp = float(loss_fn(params)[0])
            flat[i] = orig - epsilon
            with trace_relu() as tr_minus:
                lm = float(loss_fn(params)[0])
            flat[i] = orig
            if not (math.isfinite(lp) and math.isfinite(lm)):
                raise NonFiniteError(f"loss not finite while perturbing {name}[{i}]")
            if _crosses_kink(tr_plus, tr_minus, kink_window):
                skipped += 1
                continue
            numeric = (lp - lm) / (2 * epsilon)
            a = float(analytic[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            checked += 1
            worst = max(worst, rel)
            if rel > tolerance:
                flagged.append((name, np.unravel_index(i, p.shape), a, numeric))
    return GradCheckReport(worst, checked, skipped, flagged)


def _crosses_kink(tr_plus: list, tr_minus: list, window: float) -> bool:
    for zp, zm in zip(tr_plus, tr_minus):
        near = (np.abs(zp) < window) | (np.abs(zm) < window)
        if np.any(near & ((zp > 0) != (zm > 0))):
            return True
    return False
