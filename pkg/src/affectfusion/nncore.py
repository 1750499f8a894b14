"""Small numpy neural toolkit: dense, LSTM, dropout, Adam, gradient checking.

Every array is float64. Layers are plain functions with an explicit
forward/backward pair; the backward functions take the cache produced by
the matching forward call, so a training step is

    y, cache = dense_forward(x, W, b, "relu", return_cache=True)
    dx, dW, db = dense_backward(dy, cache)

Parameters live in a ``ParamSet`` (an ordered ``dict`` of name -> array).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, EmptySequenceError, ShapeError

ParamSet = dict[str, np.ndarray]

ACTIVATIONS = ("identity", "relu", "sigmoid", "tanh")
LAYER_KINDS = ("dense", "lstm", "dropout", "activation")

DEFAULT_DROPOUT = 0.5
FORGET_BIAS = 1.0


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; identical seeds give identical draws on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------- activations

def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def activate(z: np.ndarray, act: str) -> np.ndarray:
    if act == "identity":
        return z
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "sigmoid":
        return sigmoid(z)
    if act == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


def activation_grad(y: np.ndarray, act: str) -> np.ndarray:
    """Derivative of ``act`` expressed through its output ``y``."""
    if act == "identity":
        return np.ones_like(y)
    if act == "relu":
        return (y > 0.0).astype(np.float64)
    if act == "sigmoid":
        return y * (1.0 - y)
    if act == "tanh":
        return 1.0 - y * y
    raise ConfigError(f"unknown activation {act!r}; expected one of {ACTIVATIONS}")


# ---------------------------------------------------------------- layer specs

@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    in_dim: int
    out_dim: int
    activation: str = "identity"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ConfigError(
                f"layer {self.name!r}: dims must be positive, got {self.in_dim}->{self.out_dim}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"layer {self.name!r}: unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"layer {self.name!r}: dropout rate {self.dropout_rate} not in [0, 1)")
        if self.kind in ("dropout", "activation") and self.in_dim != self.out_dim:
            raise ConfigError(f"layer {self.name!r}: {self.kind} layers cannot change width")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_params(specs: list[LayerSpec], rng: np.random.Generator) -> ParamSet:
    """Glorot-uniform weights, zero biases, unit LSTM forget-gate bias.

    Dense layers get ``<name>.W`` (in x out) and ``<name>.b``.  LSTM layers get
    ``<name>.W`` (in x 4H), ``<name>.U`` (H x 4H) and ``<name>.b`` (4H), with
    gate blocks ordered input, forget, candidate, output.
    """
    params: ParamSet = {}
    prev: LayerSpec | None = None
    for spec in specs:
        if prev is not None and prev.out_dim != spec.in_dim:
            raise ConfigError(
                f"dimension chain broken: layer {prev.name!r} outputs {prev.out_dim} "
                f"but layer {spec.name!r} expects {spec.in_dim}"
            )
        prev = spec
        if spec.kind == "dense":
            bound = glorot_bound(spec.in_dim, spec.out_dim)
            _add(params, f"{spec.name}.W", rng.uniform(-bound, bound, (spec.in_dim, spec.out_dim)))
            _add(params, f"{spec.name}.b", np.zeros(spec.out_dim))
        elif spec.kind == "lstm":
            d, h = spec.in_dim, spec.out_dim
            W = rng.uniform(-1.0, 1.0, (d, 4 * h)) * glorot_bound(d, h)
            U = rng.uniform(-1.0, 1.0, (h, 4 * h)) * glorot_bound(h, h)
            b = np.zeros(4 * h)
            b[h:2 * h] = FORGET_BIAS
            _add(params, f"{spec.name}.W", W)
            _add(params, f"{spec.name}.U", U)
            _add(params, f"{spec.name}.b", b)
    return params


def _add(params: ParamSet, name: str, value: np.ndarray) -> None:
    if name in params:
        raise ConfigError(f"duplicate parameter name {name!r}")
    params[name] = np.ascontiguousarray(value, dtype=np.float64)


def param_count(params: Mapping[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


# ---------------------------------------------------------------- dense

def dense_forward(x, W, b, act: str = "identity", return_cache: bool = False):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"dense: input {x.shape}, weights {W.shape}, bias {b.shape} do not conform")
    y = activate(x @ W + b, act)
    out = y[0] if squeeze else y
    if return_cache:
        return out, (x, W, y, act, squeeze)
    return out


def dense_backward(dy: np.ndarray, cache):
    x, W, y, act, squeeze = cache
    if squeeze:
        dy = dy[None, :]
    dz = dy * activation_grad(y, act)
    dW = x.T @ dz
    db = dz.sum(axis=0)
    dx = dz @ W.T
    return (dx[0] if squeeze else dx), dW, db


# ---------------------------------------------------------------- LSTM

def lstm_forward(seq, W, U, b, return_cache: bool = False):
    """Run a standard LSTM from zero state.

    ``seq`` is T x D or batched B x T x D.  Returns ``(hidden_seq, last_hidden)``
    with matching batch layout, plus the backward cache when requested.
    """
    seq = np.asarray(seq, dtype=np.float64)
    squeeze = seq.ndim == 2
    if squeeze:
        seq = seq[None]
    if seq.ndim != 3:
        raise ShapeError(f"lstm: expected T x D or B x T x D input, got shape {seq.shape}")
    B, T, D = seq.shape
    if T == 0:
        raise EmptySequenceError("lstm: sequence has no time steps")
    H = U.shape[0]
    if W.shape != (D, 4 * H) or U.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise ShapeError(
            f"lstm: input width {D} incompatible with W {W.shape}, U {U.shape}, b {b.shape}"
        )

    xw = seq @ W + b  # (B, T, 4H), input projection done once
    hs = np.zeros((B, T, H))
    cs = np.zeros((B, T, H))
    gates = np.zeros((B, T, 4 * H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        z = xw[:, t] + h @ U
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t, :H] = i
        gates[:, t, H:2 * H] = f
        gates[:, t, 2 * H:3 * H] = g
        gates[:, t, 3 * H:] = o
        hs[:, t] = h
        cs[:, t] = c

    out = (hs[0], hs[0, -1]) if squeeze else (hs, hs[:, -1])
    if return_cache:
        return out + ((seq, W, U, hs, cs, gates, squeeze),)
    return out


def lstm_backward(dhs: np.ndarray, cache):
    """Backpropagation through time.

    ``dhs`` holds the loss gradient w.r.t. every hidden state (zeros where a
    step is not read).  Returns ``(dseq, dW, dU, db)``.
    """
    seq, W, U, hs, cs, gates, squeeze = cache
    if squeeze:
        dhs = dhs[None]
    B, T, H = hs.shape
    dW = np.zeros_like(W)
    dU = np.zeros_like(U)
    db = np.zeros(4 * H)
    dseq = np.zeros_like(seq)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    dz = np.empty((B, 4 * H))
    for t in reversed(range(T)):
        i = gates[:, t, :H]
        f = gates[:, t, H:2 * H]
        g = gates[:, t, 2 * H:3 * H]
        o = gates[:, t, 3 * H:]
        c_prev = cs[:, t - 1] if t > 0 else np.zeros((B, H))
        h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
        tc = np.tanh(cs[:, t])

        dh = dhs[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz[:, :H] = dc * g * i * (1.0 - i)
        dz[:, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dz[:, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dz[:, 3 * H:] = dh * tc * o * (1.0 - o)

        dW += seq[:, t].T @ dz
        dU += h_prev.T @ dz
        db += dz.sum(axis=0)
        dseq[:, t] = dz @ W.T
        dh_next = dz @ U.T
        dc_next = dc * f
    return (dseq[0] if squeeze else dseq), dW, dU, db


# ---------------------------------------------------------------- dropout

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} not in [0, 1)")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout_apply(x, rate: float, mode: str, rng: np.random.Generator | None = None):
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} not in [0, 1)")
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("train-mode dropout needs an rng")
    return x * dropout_mask(x.shape, rate, rng)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamSet, grads: Mapping[str, np.ndarray], state: OptimizerState) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            raise ShapeError(f"no gradient supplied for parameter {name!r}")
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------- gradient check

def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that are zero up to rounding (dead ReLUs,
    saturated gates) from dividing noise by noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], float], param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = loss_fn()
        flat[k] = orig - eps
        down = loss_fn()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * eps)
    return grad


def finite_diff_check(
    loss_fn: Callable[[], float],
    params: ParamSet,
    analytic: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> tuple[float, str]:
    """Worst relative error between ``analytic`` and central differences.

    ``loss_fn`` must read ``params`` on every call and be deterministic
    (dropout off or masks frozen).  Returns ``(max_error, parameter_name)``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    worst, worst_name = 0.0, ""
    for name, p in params.items():
        numeric = numeric_gradient(loss_fn, p, eps)
        err = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name
