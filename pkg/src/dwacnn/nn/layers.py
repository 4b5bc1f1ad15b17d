"""Layer primitives with explicit forward/backward passes.

Convolution inputs are batches of sequences shaped (B, T, D); feature maps
come out as (B, N, T_out). Dynamic-weight-aligned (DWA) convolution and the
plain convolution share one product kernel: plain convolution is the DWA
kernel with every weight row matched to the window row of the same index.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from ..align import AlignmentPath, align_bank
from ..core import ContractError, DimensionError, DomainError


@dataclass
class ConvFilterBank:
    weights: np.ndarray  # (N, I, D_in)
    bias: np.ndarray  # (N,)
    stride: int = 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 3 or min(self.weights.shape) < 1:
            raise DimensionError(f"filter weights must be N x I x D, got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} filters")
        if int(self.stride) < 1:
            raise DimensionError(f"stride must be >= 1, got {self.stride}")

    @property
    def num_filters(self):
        return self.weights.shape[0]

    @property
    def width(self):
        return self.weights.shape[1]


@dataclass
class ConvTrace:
    """Matches used by one DWA forward call, kept for the paired backward."""

    match: np.ndarray  # (B, N, T_out, I): 0-based window row per weight row
    stride: int
    input_shape: tuple

    @property
    def offsets(self) -> np.ndarray:
        return np.arange(self.match.shape[2]) * self.stride

    def path(self, b: int, n: int, t: int) -> AlignmentPath:
        """1-based match set for sample b, filter n, output position t (cost not kept)."""
        js = self.match[b, n, t]
        return AlignmentPath(tuple((i + 1, int(j) + 1) for i, j in enumerate(js)), float("nan"))


def output_length(T: int, width: int, stride: int) -> int:
    return (T - width) // stride + 1 if T >= width else 0


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise DimensionError(f"conv input must be T x D or B x T x D, got {x.shape}")
    return x, False


def _windows(x, width, stride):
    B, T, D = x.shape
    if T < width:
        raise DimensionError(f"input length {T} is shorter than filter width {width}")
    v = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)[:, ::stride]
    # (B, T_out, D, I) -> (B, T_out, I, D)
    return np.ascontiguousarray(v.transpose(0, 1, 3, 2))


def _check(x, bank):
    if x.shape[2] != bank.weights.shape[2]:
        raise DimensionError(
            f"input feature dim {x.shape[2]} does not match filters {bank.weights.shape}")


def _out_len_checked(x, bank):
    if x.shape[1] < bank.width:
        raise DimensionError(f"input length {x.shape[1]} is shorter than filter width {bank.width}")
    return output_length(x.shape[1], bank.width, bank.stride)


def diagonal_match(B, N, T_out, I) -> np.ndarray:
    return np.broadcast_to(np.arange(I), (B, N, T_out, I))


@numba.njit(cache=True)
def _conv_fwd_kernel(x, w, bias, match, stride, out):
    B, N, T, I = match.shape
    D = x.shape[2]
    for b in range(B):
        for n in range(N):
            for t in range(T):
                acc = 0.0
                for i in range(I):
                    row = t * stride + match[b, n, t, i]
                    dot = 0.0
                    for k in range(D):
                        dot += w[n, i, k] * x[b, row, k]
                    acc += dot
                out[b, n, t] = acc + bias[n]


@numba.njit(cache=True)
def _conv_bwd_kernel(x, w, match, stride, delta, gw, gb, gx):
    B, N, T, I = match.shape
    D = x.shape[2]
    for b in range(B):
        for n in range(N):
            for t in range(T):
                dl = delta[b, n, t]
                gb[n] += dl
                for i in range(I):
                    row = t * stride + match[b, n, t, i]
                    for k in range(D):
                        gw[n, i, k] += dl * x[b, row, k]
                        gx[b, row, k] += dl * w[n, i, k]


def _fast(*arrays):
    return all(a.dtype == np.float64 for a in arrays)


def conv_product(x, bank, match):
    """z[b, n, t] = sum_i <w[n, i], x[b, t*S + match[b, n, t, i]]> + bias[n]."""
    w, bias, S = bank.weights, bank.bias, bank.stride
    B, N, T, I = match.shape
    if _fast(x, w, bias):
        out = np.empty((B, N, T))
        _conv_fwd_kernel(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(bias),
                         np.ascontiguousarray(match), S, out)
        return out
    # generic-dtype path (extended-precision gradient checks)
    win = _windows(x, I, S)
    J, D = win.shape[2], win.shape[3]
    inner = (win.reshape(B * T * J, D) @ w.reshape(N * I, D).T)
    inner = inner.reshape(B, T, J, N, I).transpose(0, 3, 1, 4, 2)  # (B, N, T, I, J)
    picked = np.take_along_axis(inner, match[..., None], axis=-1)[..., 0]
    return picked.sum(axis=-1) + bias[None, :, None]


def conv_grads(x, bank, match, delta):
    w, S = bank.weights, bank.stride
    B, N, T, I = match.shape
    if _fast(x, w, delta):
        gw, gb, gx = np.zeros_like(w), np.zeros(N), np.zeros_like(x)
        _conv_bwd_kernel(np.ascontiguousarray(x), np.ascontiguousarray(w), np.ascontiguousarray(match),
                         S, np.ascontiguousarray(delta), gw, gb, gx)
        return gw, gb, gx
    win = _windows(x, I, S)
    J, D = win.shape[2], win.shape[3]
    onehot = np.zeros((B, N, T, I, J), dtype=delta.dtype)
    vals = np.broadcast_to(delta[:, :, :, None, None], (B, N, T, I, 1))
    np.put_along_axis(onehot, np.ascontiguousarray(match)[..., None], vals, axis=-1)
    onehot = onehot.transpose(0, 2, 4, 1, 3).reshape(B * T * J, N * I)
    grad_w = (onehot.T @ win.reshape(B * T * J, D)).reshape(N, I, D)
    grad_b = delta.sum(axis=(0, 2))
    grad_win = (onehot @ w.reshape(N * I, D)).reshape(B, T, J, D)
    grad_x = np.zeros_like(x)
    span = S * (T - 1) + 1
    for j in range(J):
        grad_x[:, j:j + span:S] += grad_win[:, :, j]
    return grad_w, grad_b, grad_x


def _trace_check(trace, x, bank, delta=None):
    B, T_in, _ = x.shape
    N, I, _ = bank.weights.shape
    T_out = output_length(T_in, I, bank.stride)
    want = (B, N, T_out, I)
    if trace.match.shape != want or trace.stride != bank.stride or tuple(trace.input_shape) != x.shape:
        raise ContractError(f"trace {trace.match.shape}/stride {trace.stride} does not fit input "
                            f"{x.shape} with filters {bank.weights.shape}, stride {bank.stride}")
    if delta is not None and delta.shape != (B, N, T_out):
        raise ContractError(f"delta shape {delta.shape}, expected {(B, N, T_out)}")


def dwa_align(x, bank) -> ConvTrace:
    """Align every filter to every receptive-field window of ``x`` (B, T, D)."""
    _check(x, bank)
    win = _windows(x, bank.width, bank.stride)
    B, T_out, I, D = win.shape
    _, match = align_bank(bank.weights, win.reshape(B * T_out, I, D))
    match = match.reshape(B, T_out, bank.num_filters, I).transpose(0, 2, 1, 3)
    return ConvTrace(np.ascontiguousarray(match), bank.stride, x.shape)


def dwa_conv_forward(x, bank, trace=None):
    """DWA convolution. Alignments are recomputed unless a ``trace`` is supplied
    (frozen-alignment evaluation)."""
    x, single = _batched(x)
    _check(x, bank)
    if trace is None:
        trace = dwa_align(x, bank)
    else:
        _trace_check(trace, x, bank)
    z = conv_product(x, bank, trace.match)
    return (z[0] if single else z), trace


def dwa_conv_backward(trace, x, bank, delta):
    x, single = _batched(x)
    delta = np.asarray(delta)
    if single:
        delta = delta[None]
    _trace_check(trace, x, bank, delta)
    gw, gb, gx = conv_grads(x, bank, trace.match, delta)
    return gw, gb, (gx[0] if single else gx)


def linear_conv_forward(x, bank):
    x, single = _batched(x)
    _check(x, bank)
    T_out = _out_len_checked(x, bank)
    z = conv_product(x, bank, diagonal_match(x.shape[0], bank.num_filters, T_out, bank.width))
    return z[0] if single else z


def linear_conv_backward(x, bank, delta):
    x, single = _batched(x)
    delta = np.asarray(delta)
    if single:
        delta = delta[None]
    _check(x, bank)
    B = x.shape[0]
    T_out = _out_len_checked(x, bank)
    if delta.shape != (B, bank.num_filters, T_out):
        raise DimensionError(f"delta shape {delta.shape}, expected {(B, bank.num_filters, T_out)}")
    gw, gb, gx = conv_grads(x, bank, diagonal_match(B, bank.num_filters, T_out, bank.width), delta)
    return gw, gb, (gx[0] if single else gx)


# -- batch normalization ----------------------------------------------------------

class UninitializedStatsError(RuntimeError):
    pass


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    initialized: bool = False

    @classmethod
    def create(cls, channels, eps=1e-5, momentum=0.1):
        if eps <= 0 or not 0 < momentum <= 1:
            raise DomainError(f"need eps > 0 and 0 < momentum <= 1, got {eps}, {momentum}")
        return cls(np.ones(channels), np.zeros(channels), np.zeros(channels), np.ones(channels),
                   eps, momentum)


def batchnorm_forward(x, state, train=True, update_stats=True):
    """Normalize (B, C, T) per channel over batch and time."""
    if train:
        n = x.shape[0] * x.shape[2]
        if n < 2:
            raise DimensionError(f"train-mode batch norm needs >= 2 values per channel, got {n}")
        mean = x.mean(axis=(0, 2))
        centered = x - mean[None, :, None]
        var = (centered ** 2).mean(axis=(0, 2))
        if update_stats:
            m = state.momentum
            state.running_mean = (1 - m) * state.running_mean + m * mean
            state.running_var = (1 - m) * state.running_var + m * var * (n / (n - 1))
            state.initialized = True
    else:
        if not state.initialized:
            raise UninitializedStatsError("batch norm running statistics were never updated")
        centered = x - state.running_mean[None, :, None]
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv_std[None, :, None]
    out = state.gamma[None, :, None] * xhat + state.beta[None, :, None]
    return out, {"xhat": xhat, "inv_std": inv_std, "train": train, "shape": x.shape}


def batchnorm_backward(cache, state, delta):
    if delta.shape != cache["shape"]:
        raise ContractError(f"delta shape {delta.shape} does not match forward {cache['shape']}")
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    grad_gamma = (delta * xhat).sum(axis=(0, 2))
    grad_beta = delta.sum(axis=(0, 2))
    dxhat = delta * state.gamma[None, :, None]
    if not cache["train"]:
        return dxhat * inv_std[None, :, None], grad_gamma, grad_beta
    n = delta.shape[0] * delta.shape[2]
    s1 = dxhat.sum(axis=(0, 2))[None, :, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2))[None, :, None]
    grad_x = (inv_std[None, :, None] / n) * (n * dxhat - s1 - xhat * s2)
    return grad_x, grad_gamma, grad_beta


# -- dense and output ------------------------------------------------------------

@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(f"dense shapes inconsistent: {self.weights.shape}, {self.bias.shape}")


def dense_forward(x, layer):
    if x.shape[-1] != layer.weights.shape[1]:
        raise DimensionError(f"dense input {x.shape} vs weights {layer.weights.shape}")
    pre = x @ layer.weights.T + layer.bias
    out = np.tanh(pre) if layer.activation == "tanh" else pre
    return out, {"x": x, "out": out}


def dense_backward(cache, layer, delta):
    if layer.activation == "tanh":
        delta = delta * (1.0 - cache["out"] ** 2)
    grad_w = delta.T @ cache["x"]
    grad_b = delta.sum(axis=0)
    return delta @ layer.weights, grad_w, grad_b


def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Loss and gradient w.r.t. the logits for a batch (B, K) of integer labels."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    K = logits.shape[-1]
    if labels.shape != logits.shape[:1]:
        raise DimensionError(f"labels {labels.shape} vs logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= K):
        raise DomainError(f"label out of range [0, {K})")
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(len(labels))
    losses = logsum - shifted[rows, labels]
    probs = softmax(logits)
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    if reduction == "mean":
        return losses.mean(), grad / len(labels)
    if reduction == "sum":
        return losses.sum(), grad
    raise ValueError(f"unknown reduction {reduction!r}")
