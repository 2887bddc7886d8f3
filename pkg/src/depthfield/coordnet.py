"""Self-contained coordinate network with exact reverse-mode gradients.

A small fully connected network (ReLU hidden layers, linear head) maps a
positionally encoded 5-vector to four scale/offset coefficients. Training
support is limited to exactly what the correction field needs: the L1
anchor loss through the exponential-scale correction, AdamW with decoupled
weight decay, and a cosine-annealing warm-restart learning-rate schedule.

Parameters are plain numpy arrays; the arithmetic runs in whatever dtype
the parameters carry (float32 for production training, float64 in the
finite-difference gradient tests).
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass

import numpy as np

__all__ = [
    "PosEncConfig",
    "MlpParams",
    "AdamWState",
    "LrSchedule",
    "NumericFailure",
    "positional_encode",
    "init_mlp",
    "mlp_forward",
    "correction_outputs",
    "correction_loss_and_grad",
    "adamw_step",
    "cosine_warm_restart_lr",
    "write_weights",
    "read_weights",
]


class NumericFailure(ArithmeticError):
    """Non-finite value reached the optimizer or a training loss."""


# ---------------------------------------------------------------------------
# Positional encoding


@dataclass(frozen=True)
class PosEncConfig:
    """Sinusoidal feature lifting: L frequency octaves per input dimension."""

    num_frequencies: int = 6
    include_identity: bool = True

    def encoded_dim(self, input_dim: int) -> int:
        return input_dim * (int(self.include_identity) + 2 * self.num_frequencies)


def positional_encode(z, config: PosEncConfig) -> np.ndarray:
    """Encode inputs as [z, sin(2^0 pi z), cos(2^0 pi z), ..., cos(2^(L-1) pi z)].

    Accepts (D,) or (B, D); returns the encoding with matching leading shape.
    """
    arr = np.asarray(z)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)
    parts = [arr] if config.include_identity else []
    for k in range(config.num_frequencies):
        ang = (2.0**k * np.pi) * arr
        parts.append(np.sin(ang))
        parts.append(np.cos(ang))
    out = np.concatenate(parts, axis=1)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# MLP


@dataclass(eq=False)
class MlpParams:
    """Weight matrices (in x out) and bias vectors of a fully connected net."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def layer_dims(self) -> list[int]:
        return [w.shape[0] for w in self.weights] + [self.weights[-1].shape[1]]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "MlpParams":
        return MlpParams(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
        )


def init_mlp(layer_dims, rng: np.random.Generator, dtype=np.float32) -> MlpParams:
    """He-uniform hidden layers; the final layer is zeroed.

    The zero head makes the untrained correction an exact identity
    (exp(0) * d + 0 == d).
    """
    dims = list(layer_dims)
    if len(dims) < 2:
        raise ValueError("need at least input and output dimensions")
    weights, biases = [], []
    for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        last = i == len(dims) - 2
        if last:
            w = np.zeros((din, dout), dtype=dtype)
        else:
            bound = np.sqrt(6.0 / din)
            w = rng.uniform(-bound, bound, size=(din, dout)).astype(dtype)
        weights.append(w)
        biases.append(np.zeros(dout, dtype=dtype))
    return MlpParams(weights, biases)


def mlp_forward(params: MlpParams, features) -> np.ndarray:
    """Forward pass: ReLU hidden activations, linear output layer."""
    x = np.asarray(features, dtype=params.dtype)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.shape[1] != params.weights[0].shape[0]:
        raise ValueError(
            f"feature dim {h.shape[1]} does not match input layer "
            f"{params.weights[0].shape[0]}"
        )
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if i != last:
            np.maximum(h, 0.0, out=h)
    return h[0] if single else h


def correction_outputs(out4: np.ndarray, d_v, d_m) -> tuple[np.ndarray, np.ndarray]:
    """Apply the four predicted coefficients: d_hat = exp(alpha) * d + beta."""
    dv_hat = np.exp(out4[..., 0]) * d_v + out4[..., 1]
    dm_hat = np.exp(out4[..., 2]) * d_m + out4[..., 3]
    return dv_hat, dm_hat


class _Workspace:
    """Reusable buffers for one (layer-dims, batch, dtype) combination.

    Avoids per-step large-array allocation, which dominates step time on
    small machines. Buffers are cached per thread; returned gradients alias
    workspace memory and are only valid until the next call on that thread.
    """

    def __init__(self, dims: list[int], n: int, dtype):
        self.key = (tuple(dims), n, np.dtype(dtype).str)
        self.acts = [np.empty((n, d), dtype=dtype) for d in dims[1:]]
        self.masks = [np.empty((n, d), dtype=bool) for d in dims[1:-1]]
        self.gbufs = [np.empty((n, d), dtype=dtype) for d in dims[1:]]
        self.grad_w = [
            np.empty((din, dout), dtype=dtype) for din, dout in zip(dims[:-1], dims[1:])
        ]
        self.grad_b = [np.empty(d, dtype=dtype) for d in dims[1:]]


_workspaces = threading.local()


def _get_workspace(params: MlpParams, n: int) -> _Workspace:
    key = (tuple(params.layer_dims), n, np.dtype(params.dtype).str)
    ws = getattr(_workspaces, "cache", None)
    if ws is None or ws.key != key:
        ws = _Workspace(params.layer_dims, n, params.dtype)
        _workspaces.cache = ws
    return ws


def correction_loss_and_grad(
    params: MlpParams, features: np.ndarray, d_v: np.ndarray, d_m: np.ndarray,
    target: np.ndarray,
) -> tuple[float, MlpParams]:
    """Mean L1 anchor loss through the correction, with its exact gradient.

    loss = mean_k |exp(a_v) d_v + b_v - t| + |exp(a_m) d_m + b_m - t|.
    The L1 subgradient at zero residual is taken as 0. Returns the loss and
    a gradient with the same structure as ``params``; the gradient arrays
    are reused by the next call on the same thread.
    """
    x = np.ascontiguousarray(features, dtype=params.dtype)
    d_v = np.asarray(d_v, dtype=params.dtype)
    d_m = np.asarray(d_m, dtype=params.dtype)
    target = np.asarray(target, dtype=params.dtype)
    n = len(x)
    last = len(params.weights) - 1
    ws = _get_workspace(params, n)

    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        np.matmul(h, w, out=ws.acts[i])
        ws.acts[i] += b
        if i != last:
            np.greater(ws.acts[i], 0.0, out=ws.masks[i])
            np.maximum(ws.acts[i], 0.0, out=ws.acts[i])
        h = ws.acts[i]
    out = ws.acts[last]  # (n, 4)

    exp_v = np.exp(out[:, 0])
    exp_m = np.exp(out[:, 2])
    res_v = exp_v * d_v + out[:, 1] - target
    res_m = exp_m * d_m + out[:, 3] - target
    loss = float(np.mean(np.abs(res_v) + np.abs(res_m)))

    g = ws.gbufs[last]
    sv = np.sign(res_v)
    sv /= n
    sm = np.sign(res_m)
    sm /= n
    g[:, 0] = sv * exp_v * d_v
    g[:, 1] = sv
    g[:, 2] = sm * exp_m * d_m
    g[:, 3] = sm

    for i in range(last, -1, -1):
        src = ws.acts[i - 1] if i > 0 else x
        np.matmul(src.T, g, out=ws.grad_w[i])
        g.sum(axis=0, out=ws.grad_b[i])
        if i > 0:
            np.matmul(g, params.weights[i].T, out=ws.gbufs[i - 1])
            g = ws.gbufs[i - 1]
            g *= ws.masks[i - 1]
    return loss, MlpParams(ws.grad_w, ws.grad_b)


# ---------------------------------------------------------------------------
# AdamW


@dataclass(eq=False)
class AdamWState:
    """Moment accumulators and step count for AdamW."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(cls, params: MlpParams, weight_decay: float = 1e-2) -> "AdamWState":
        return cls(
            m_w=[np.zeros_like(w) for w in params.weights],
            v_w=[np.zeros_like(w) for w in params.weights],
            m_b=[np.zeros_like(b) for b in params.biases],
            v_b=[np.zeros_like(b) for b in params.biases],
            weight_decay=weight_decay,
        )


def adamw_step(
    state: AdamWState, params: MlpParams, grads: MlpParams, lr: float
) -> tuple[AdamWState, MlpParams]:
    """One AdamW update (decoupled weight decay), in place.

    Raises NumericFailure when any gradient entry is non-finite.
    """
    for g in (*grads.weights, *grads.biases):
        if not np.isfinite(g).all():
            raise NumericFailure("non-finite gradient, step rejected")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(
        (*params.weights, *params.biases),
        (*grads.weights, *grads.biases),
        (*state.m_w, *state.m_b),
        (*state.v_w, *state.v_b),
    ):
        if state.weight_decay:
            p *= 1.0 - lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        p -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return state, params


# ---------------------------------------------------------------------------
# Learning-rate schedule


@dataclass(frozen=True)
class LrSchedule:
    """Cosine annealing with warm restarts."""

    eta_max: float = 1e-3
    eta_min: float = 0.0
    t0: int = 1000
    t_mult: int = 1

    def __post_init__(self):
        if not (0 <= self.eta_min <= self.eta_max):
            raise ValueError("need 0 <= eta_min <= eta_max")
        if self.t0 < 1:
            raise ValueError("restart period must be >= 1")


def cosine_warm_restart_lr(step: int, schedule: LrSchedule) -> float:
    """Learning rate at a given step; each restart resets the cosine phase."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.t_mult == 1:
        t_cur = step % schedule.t0
        period = schedule.t0
    else:
        period = schedule.t0
        t_cur = step
        while t_cur >= period:
            t_cur -= period
            period *= schedule.t_mult
    span = schedule.eta_max - schedule.eta_min
    return schedule.eta_min + 0.5 * span * (1.0 + np.cos(np.pi * t_cur / period))


# ---------------------------------------------------------------------------
# Weight checkpoint

_WEIGHTS_MAGIC = b"DFW1"
_WEIGHTS_VERSION = 1


def write_weights(params: MlpParams) -> bytes:
    """Serialize weights: versioned header, layer-dimension table, f32 payload."""
    dims = params.layer_dims
    header = _WEIGHTS_MAGIC + struct.pack("<II", _WEIGHTS_VERSION, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims)
    chunks = [header]
    for w, b in zip(params.weights, params.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def read_weights(data: bytes) -> MlpParams:
    """Inverse of :func:`write_weights` (parameters come back float32)."""
    if data[:4] != _WEIGHTS_MAGIC:
        raise ValueError("not a weight checkpoint (bad magic)")
    version, n_dims = struct.unpack_from("<II", data, 4)
    if version != _WEIGHTS_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    dims = list(struct.unpack_from(f"<{n_dims}I", data, 12))
    offset = 12 + 4 * n_dims
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(data, dtype="<f4", count=din * dout, offset=offset)
        offset += 4 * din * dout
        b = np.frombuffer(data, dtype="<f4", count=dout, offset=offset)
        offset += 4 * dout
        weights.append(w.reshape(din, dout).copy())
        biases.append(b.copy())
    if offset != len(data):
        raise ValueError("checkpoint payload size mismatch")
    return MlpParams(weights, biases)
