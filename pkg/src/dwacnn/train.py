"""SGD training loop, evaluation, metrics log and checkpoint files."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Dataset, DimensionError, Rng
from .nn import (BUFFER_ORDER, PARAM_ORDER, ModelConfig, ModelState, init_model,
                 model_backward, model_forward, predict)

log = logging.getLogger(__name__)

CONV_PARAMS = ("conv1.w", "conv1.b", "conv2.w", "conv2.b")


class DivergedError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    lr0: float = 0.001  # conv layers, decayed as lr0 / (1 + alpha * t)
    alpha: float = 0.001
    lr_fc: float = 0.0001  # dense, output and batch-norm parameters
    batch_size: int = 100
    iterations: int = 60000
    seed: int = 0
    eval_every: int = 1000
    loss_reduction: str = "mean"

    def __post_init__(self):
        if not (self.lr0 > 0 and self.alpha >= 0 and self.lr_fc > 0):
            raise ValueError(f"need lr0 > 0, alpha >= 0, lr_fc > 0; got {self.lr0}, {self.alpha}, {self.lr_fc}")
        if self.batch_size < 1 or self.iterations < 1 or self.eval_every < 1:
            raise ValueError("batch_size, iterations and eval_every must be >= 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError(f"loss_reduction must be 'sum' or 'mean', got {self.loss_reduction!r}")


def lr_schedule(t: int, lr0: float, alpha: float) -> float:
    if t < 0:
        raise ValueError(f"iteration must be >= 0, got {t}")
    return lr0 / (1.0 + alpha * t)


def sgd_step(model: ModelState, grads: dict, t: int, config: TrainConfig) -> ModelState:
    """In-place update: conv filters at the decayed rate, everything else at lr_fc."""
    for name in PARAM_ORDER:
        if not np.all(np.isfinite(grads[name])):
            raise DivergedError(f"non-finite gradient for {name} at iteration {t}")
    conv_lr = lr_schedule(t, config.lr0, config.alpha)
    for name in PARAM_ORDER:
        lr = conv_lr if name in CONV_PARAMS else config.lr_fc
        model.params[name] -= lr * grads[name]
    return model


# -- evaluation -----------------------------------------------------------------

def evaluate(model: ModelState, dataset: Dataset):
    """Accuracy and K x K confusion matrix (rows: true class). Ties in the
    output go to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    c = model.config
    if dataset.fixed_length != c.length or dataset.feature_dim != c.dim:
        raise DimensionError(
            f"dataset geometry (L={dataset.fixed_length}, D={dataset.feature_dim}) does not match "
            f"model (L={c.length}, D={c.dim})")
    if dataset.num_classes != c.classes:
        raise DimensionError(f"dataset has {dataset.num_classes} classes, model {c.classes}")
    pred = np.argmax(predict(model, dataset.to_array()), axis=1)
    truth = dataset.labels
    confusion = np.zeros((c.classes, c.classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    return float(np.mean(pred == truth)), confusion


# -- metrics ----------------------------------------------------------------------

METRICS_HEADER = "iteration\ttrain_loss\tval_acc\ttest_acc\tseconds"


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)  # (t, loss, val_acc, test_acc, seconds)

    def append(self, t, loss, val_acc, test_acc, seconds):
        if self.rows and t <= self.rows[-1][0]:
            raise ValueError(f"metrics iteration {t} not after {self.rows[-1][0]}")
        self.rows.append((int(t), float(loss), float(val_acc), float(test_acc), float(seconds)))

    @staticmethod
    def format_row(row, timing=True) -> str:
        t, loss, va, te, sec = row
        va_s = "nan" if math.isnan(va) else f"{va:.6f}"
        sec_s = f"{sec:.3f}" if timing else "nan"
        return f"{t}\t{loss:.10g}\t{va_s}\t{te:.6f}\t{sec_s}"

    def write(self, path, timing=True):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(METRICS_HEADER + "\n")
            for row in self.rows:
                fh.write(self.format_row(row, timing) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, encoding="utf-8") as fh:
            next(fh)
            for line in fh:
                t, loss, va, te, sec = line.rstrip("\n").split("\t")
                out.rows.append((int(t), float(loss), float(va), float(te), float(sec)))
        return out

    @property
    def test_acc(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows])


# -- loop -----------------------------------------------------------------------

class BatchSampler:
    """Epoch-wise shuffles without replacement; batches run across epoch edges."""

    def __init__(self, n: int, batch_size: int, gen: np.random.Generator):
        self.n, self.batch_size, self.gen = n, batch_size, gen
        self._queue = np.zeros(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._queue) < self.batch_size:
            self._queue = np.concatenate([self._queue, self.gen.permutation(self.n)])
        batch, self._queue = self._queue[:self.batch_size], self._queue[self.batch_size:]
        return batch


def train_loop(config: TrainConfig, train_set: Dataset, val_set: Dataset | None, test_set: Dataset,
               metrics_path=None, timing=True, model: ModelState | None = None):
    """Run ``config.iterations`` SGD steps; returns ``(model, MetricsLog, rng)``.

    Metrics are evaluated every ``eval_every`` iterations and after the last
    one; ``train_loss`` is the mean batch loss since the previous eval point.
    With ``metrics_path`` the log is appended to disk row by row.
    """
    train_set.check_training()
    rng = Rng(config.seed)
    if model is None:
        model = init_model(config.model, rng.stream("init"))
    X, y = train_set.to_array(), train_set.labels
    if X.shape[1:] != (config.model.length, config.model.dim):
        raise DimensionError(f"training data {X.shape[1:]} vs model ({config.model.length}, {config.model.dim})")
    sampler = BatchSampler(len(X), config.batch_size, rng.stream("shuffle"))
    metrics = MetricsLog()
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", encoding="utf-8")
        fh.write(METRICS_HEADER + "\n")
    start = time.perf_counter()
    losses = []
    try:
        for t in range(config.iterations):
            idx = sampler.next()
            _, trace = model_forward(model, X[idx], train=True)
            loss, grads = model_backward(model, trace, y[idx], config.loss_reduction)
            if not np.isfinite(loss):
                raise DivergedError(f"training loss became non-finite at iteration {t}")
            sgd_step(model, grads, t, config)
            losses.append(loss / (len(idx) if config.loss_reduction == "sum" else 1))
            done = t + 1
            if done % config.eval_every == 0 or done == config.iterations:
                val_acc = evaluate(model, val_set)[0] if val_set is not None and len(val_set) else float("nan")
                test_acc = evaluate(model, test_set)[0]
                metrics.append(done, float(np.mean(losses)), val_acc, test_acc, time.perf_counter() - start)
                losses = []
                log.info("iter %d loss %.4f val %.4f test %.4f", *metrics.rows[-1][:4])
                if fh is not None:
                    fh.write(MetricsLog.format_row(metrics.rows[-1], timing) + "\n")
                    fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return model, metrics, rng


# -- checkpoints ------------------------------------------------------------------
# layout: MAGIC | u32 version | u32 header length | JSON header | float64 LE payload
#         | 8-byte blake2b digest of everything before it

MAGIC = b"DWACKPT\0"
VERSION = 1


def _digest(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_checkpoint(model: ModelState, path, iteration: int = 0, rng_state: dict | None = None):
    arrays = [(n, model.params[n]) for n in PARAM_ORDER] + [(n, model.buffers[n]) for n in BUFFER_ORDER]
    header = {
        "config": model.config.to_dict(),
        "iteration": int(iteration),
        "rng_state": rng_state or {},
        "bn_initialized": bool(model.bn1.initialized),
        "dtype": "<f8",
        "arrays": [[n, list(a.shape)] for n, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(hbytes)))
    buf.write(hbytes)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + _digest(body))


def load_checkpoint(path):
    """Returns ``(model, header)``; ``header`` holds iteration and rng state."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 16 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-8], data[-8:]
    if _digest(body) != digest:
        raise CheckpointError(f"{path}: checksum mismatch (file corrupted or truncated)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = len(MAGIC) + 8
    header = json.loads(body[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated payload at {name}")
        arrays[name] = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    model = ModelState(ModelConfig(**header["config"]), {n: arrays[n] for n in PARAM_ORDER})
    model.set_buffers({n: arrays[n] for n in BUFFER_ORDER}, header["bn_initialized"])
    return model, header


def with_mode(config: TrainConfig, mode: str) -> TrainConfig:
    return replace(config, model=replace(config.model, conv_mode=mode))
