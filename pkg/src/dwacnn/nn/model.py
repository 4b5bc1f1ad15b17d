"""The five-layer network: two convolution blocks (conv -> batch norm -> tanh),
two tanh dense layers and a softmax output."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import DimensionError
from .layers import (BatchNormState, ConvFilterBank, DenseLayer, batchnorm_backward,
                     batchnorm_forward, dense_backward, dense_forward, dwa_conv_backward,
                     dwa_conv_forward, linear_conv_backward, linear_conv_forward, output_length,
                     softmax_cross_entropy)

PARAM_ORDER = (
    "conv1.w", "conv1.b", "bn1.gamma", "bn1.beta",
    "conv2.w", "conv2.b", "bn2.gamma", "bn2.beta",
    "fc1.w", "fc1.b", "fc2.w", "fc2.b", "out.w", "out.b",
)
BUFFER_ORDER = ("bn1.running_mean", "bn1.running_var", "bn2.running_mean", "bn2.running_var")
CONV_MODES = ("dwa", "linear")


@dataclass(frozen=True)
class ModelConfig:
    length: int  # fixed input length L
    dim: int  # input feature dim D
    classes: int  # K
    filters: int = 50
    conv1_width: int = 8
    conv1_stride: int = 2
    conv2_width: int = 8
    conv2_stride: int = 2
    fc1: int = 400
    fc2: int = 100
    conv_mode: str = "dwa"
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.conv_mode not in CONV_MODES:
            raise ValueError(f"conv_mode must be one of {CONV_MODES}, got {self.conv_mode!r}")
        for name in ("length", "dim", "classes", "filters", "conv1_width", "conv1_stride",
                     "conv2_width", "conv2_stride", "fc1", "fc2"):
            if getattr(self, name) < 1:
                raise DimensionError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.conv2_out < 1:
            raise DimensionError(
                f"geometry does not chain: L={self.length}, conv1 {self.conv1_width}/{self.conv1_stride} "
                f"-> {self.conv1_out}, conv2 {self.conv2_width}/{self.conv2_stride} -> {self.conv2_out}")

    @property
    def conv1_out(self) -> int:
        return output_length(self.length, self.conv1_width, self.conv1_stride)

    @property
    def conv2_out(self) -> int:
        return output_length(self.conv1_out, self.conv2_width, self.conv2_stride)

    @property
    def flat_size(self) -> int:
        return self.filters * self.conv2_out

    def param_shapes(self) -> dict:
        N = self.filters
        return {
            "conv1.w": (N, self.conv1_width, self.dim), "conv1.b": (N,),
            "bn1.gamma": (N,), "bn1.beta": (N,),
            "conv2.w": (N, self.conv2_width, N), "conv2.b": (N,),
            "bn2.gamma": (N,), "bn2.beta": (N,),
            "fc1.w": (self.fc1, self.flat_size), "fc1.b": (self.fc1,),
            "fc2.w": (self.fc2, self.fc1), "fc2.b": (self.fc2,),
            "out.w": (self.classes, self.fc2), "out.b": (self.classes,),
        }

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict  # name -> array, keys in PARAM_ORDER
    bn1: BatchNormState = field(init=False)
    bn2: BatchNormState = field(init=False)

    def __post_init__(self):
        c = self.config
        shapes = c.param_shapes()
        for name in PARAM_ORDER:
            if self.params[name].shape != shapes[name]:
                raise DimensionError(f"{name}: shape {self.params[name].shape}, expected {shapes[name]}")
        self.bn1 = BatchNormState.create(c.filters, c.bn_eps, c.bn_momentum)
        self.bn2 = BatchNormState.create(c.filters, c.bn_eps, c.bn_momentum)
        self._sync_bn()

    def _sync_bn(self):
        p = self.params
        self.bn1.gamma, self.bn1.beta = p["bn1.gamma"], p["bn1.beta"]
        self.bn2.gamma, self.bn2.beta = p["bn2.gamma"], p["bn2.beta"]

    def set_params(self, params: dict):
        self.params = params
        self._sync_bn()

    @property
    def buffers(self) -> dict:
        return {"bn1.running_mean": self.bn1.running_mean, "bn1.running_var": self.bn1.running_var,
                "bn2.running_mean": self.bn2.running_mean, "bn2.running_var": self.bn2.running_var}

    def set_buffers(self, buffers: dict, initialized: bool = True):
        self.bn1.running_mean, self.bn1.running_var = buffers["bn1.running_mean"], buffers["bn1.running_var"]
        self.bn2.running_mean, self.bn2.running_var = buffers["bn2.running_mean"], buffers["bn2.running_var"]
        self.bn1.initialized = self.bn2.initialized = initialized

    def bank(self, layer: int) -> ConvFilterBank:
        c = self.config
        stride = c.conv1_stride if layer == 1 else c.conv2_stride
        return ConvFilterBank(self.params[f"conv{layer}.w"], self.params[f"conv{layer}.b"], stride)

    def dense(self, name: str) -> DenseLayer:
        return DenseLayer(self.params[f"{name}.w"], self.params[f"{name}.b"],
                          "identity" if name == "out" else "tanh")

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def copy(self) -> "ModelState":
        m = ModelState(self.config, {k: v.copy() for k, v in self.params.items()})
        m.set_buffers({k: v.copy() for k, v in self.buffers.items()}, self.bn1.initialized)
        return m

    def astype(self, dtype) -> "ModelState":
        m = ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()})
        m.set_buffers({k: v.astype(dtype) for k, v in self.buffers.items()}, self.bn1.initialized)
        return m


def _glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_model(config: ModelConfig, rng: np.random.Generator) -> ModelState:
    """Scaled-uniform weights, zero biases, unit batch-norm scale."""
    c, N = config, config.filters
    shapes = c.param_shapes()
    fans = {
        "conv1.w": (c.conv1_width * c.dim, c.conv1_width * N),
        "conv2.w": (c.conv2_width * N, c.conv2_width * N),
        "fc1.w": (c.flat_size, c.fc1),
        "fc2.w": (c.fc1, c.fc2),
        "out.w": (c.fc2, c.classes),
    }
    params = {}
    for name in PARAM_ORDER:
        if name in fans:
            params[name] = _glorot(rng, shapes[name], *fans[name])
        elif name.endswith("gamma"):
            params[name] = np.ones(shapes[name])
        else:
            params[name] = np.zeros(shapes[name])
    return ModelState(config, params)


def zero_model(config: ModelConfig) -> ModelState:
    """All parameters zero; running statistics (0, 1) count as set, so the
    model can be evaluated directly."""
    shapes = config.param_shapes()
    m = ModelState(config, {k: np.zeros(shapes[k]) for k in PARAM_ORDER})
    m.bn1.initialized = m.bn2.initialized = True
    return m


def _conv(model, layer, x, frozen):
    bank = model.bank(layer)
    if model.config.conv_mode == "linear":
        return linear_conv_forward(x, bank), None
    return dwa_conv_forward(x, bank, trace=None if frozen is None else frozen[layer])


def model_forward(model: ModelState, x, train: bool = True, frozen=None, update_stats: bool = True):
    """Run a (B, L, D) batch through the network.

    ``frozen`` maps conv layer (1, 2) to a ConvTrace whose matches are reused
    instead of re-aligning. Returns ``(logits, trace)``; the trace carries
    everything ``model_backward`` needs.
    """
    x = np.asarray(x)
    c = model.config
    if x.ndim != 3 or x.shape[1:] != (c.length, c.dim):
        raise DimensionError(f"batch shape {x.shape}, model expects (B, {c.length}, {c.dim})")
    tr = {"x": x, "train": train}
    z1, tr["conv1"] = _conv(model, 1, x, frozen)
    n1, tr["bn1"] = batchnorm_forward(z1, model.bn1, train, update_stats)
    h1 = np.tanh(n1)
    a1 = np.ascontiguousarray(h1.transpose(0, 2, 1))  # time-major for conv2
    z2, tr["conv2"] = _conv(model, 2, a1, frozen)
    n2, tr["bn2"] = batchnorm_forward(z2, model.bn2, train, update_stats)
    h2 = np.tanh(n2)
    flat = h2.reshape(x.shape[0], -1)
    f1, tr["fc1"] = dense_forward(flat, model.dense("fc1"))
    f2, tr["fc2"] = dense_forward(f1, model.dense("fc2"))
    logits, tr["out"] = dense_forward(f2, model.dense("out"))
    tr.update(h1=h1, a1=a1, h2=h2)
    return logits, tr


def model_backward(model: ModelState, trace: dict, labels, reduction: str = "mean"):
    """Loss and gradients for every parameter, keyed as in ``PARAM_ORDER``."""
    logits = trace["out"]["out"]
    loss, g = softmax_cross_entropy(logits, labels, reduction)
    grads = {}
    for name in ("out", "fc2", "fc1"):
        g, grads[f"{name}.w"], grads[f"{name}.b"] = dense_backward(trace[name], model.dense(name), g)
    h2 = trace["h2"]
    g = g.reshape(h2.shape) * (1.0 - h2 ** 2)
    g, grads["bn2.gamma"], grads["bn2.beta"] = batchnorm_backward(trace["bn2"], model.bn2, g)
    g, grads["conv2.w"], grads["conv2.b"] = _conv_back(model, 2, trace["conv2"], trace["a1"], g)
    g = g.transpose(0, 2, 1) * (1.0 - trace["h1"] ** 2)
    g, grads["bn1.gamma"], grads["bn1.beta"] = batchnorm_backward(trace["bn1"], model.bn1, g)
    _, grads["conv1.w"], grads["conv1.b"] = _conv_back(model, 1, trace["conv1"], trace["x"], g)
    return loss, {k: grads[k] for k in PARAM_ORDER}


def _conv_back(model, layer, ctrace, x, delta):
    bank = model.bank(layer)
    if ctrace is None:
        gw, gb, gx = linear_conv_backward(x, bank, delta)
    else:
        gw, gb, gx = dwa_conv_backward(ctrace, x, bank, delta)
    return gx, gw, gb


def predict(model: ModelState, x, batch_size: int = 256) -> np.ndarray:
    """Inference-mode logits for a (B, L, D) array, evaluated in chunks."""
    x = np.asarray(x)
    out = [model_forward(model, x[i:i + batch_size], train=False)[0]
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.config.classes))
