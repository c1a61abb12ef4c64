"""Seq2Point and multi-task Seq2Point networks on top of :mod:`nilmfed.tensor`.

Layer indexing used by freeze masks and transfer experiments::

    0..4   convolutional layers (ReLU)
    5      shared fully connected layer (ReLU)
    6      output heads, one linear unit per task
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import substream
from .tensor import (
    Adam,
    DivergenceError,
    FilterBank,
    conv1d_backward,
    conv1d_forward,
    conv_output_width,
    dense_backward,
    dense_forward,
    relu,
    relu_backward,
)

DEFAULT_CONV_LAYERS = ((30, 10), (30, 8), (40, 6), (50, 5), (50, 5))
DEFAULT_DENSE_WIDTH = 1024

# above this many bytes the frozen-prefix activations are recomputed per batch
PREFIX_CACHE_LIMIT = 768 * 2**20


class TrainingDiverged(DivergenceError):
    def __init__(self, message: str, params: ModelParams, history: list[float]):
        super().__init__(message)
        self.params = params
        self.history = history


@dataclass(frozen=True)
class ArchSpec:
    window_size: int
    conv_layers: tuple[tuple[int, int], ...] = DEFAULT_CONV_LAYERS
    dense_width: int = DEFAULT_DENSE_WIDTH
    n_tasks: int = 1

    def __post_init__(self):
        object.__setattr__(
            self, "conv_layers", tuple((int(n), int(k)) for n, k in self.conv_layers)
        )
        if self.n_tasks < 1:
            raise ValueError("n_tasks must be >= 1")
        if self.dense_width < 1:
            raise ValueError("dense_width must be >= 1")
        width = self.window_size
        for i, (n, k) in enumerate(self.conv_layers):
            if n < 1 or k < 1:
                raise ValueError(f"conv layer {i}: filters and kernel must be >= 1")
            width = conv_output_width(width, k)
            if width < 1:
                raise ValueError(
                    f"window size {self.window_size} is too small for the conv stack "
                    f"(width drops to {width} at layer {i})"
                )

    @property
    def n_conv(self) -> int:
        return len(self.conv_layers)

    @property
    def n_layers(self) -> int:
        return self.n_conv + 2

    @property
    def dense_index(self) -> int:
        return self.n_conv

    @property
    def head_index(self) -> int:
        return self.n_conv + 1

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(n for n, _ in self.conv_layers)

    @property
    def conv_widths(self) -> tuple[int, ...]:
        widths = []
        width = self.window_size
        for _, k in self.conv_layers:
            width = conv_output_width(width, k)
            widths.append(width)
        return tuple(widths)

    @property
    def flatten_size(self) -> int:
        if not self.conv_layers:
            return self.window_size
        return self.conv_layers[-1][0] * self.conv_widths[-1]

    def with_filters(self, filters) -> ArchSpec:
        filters = tuple(int(n) for n in filters)
        if len(filters) != self.n_conv:
            raise ValueError("one filter count per conv layer required")
        return replace(
            self, conv_layers=tuple((n, k) for n, (_, k) in zip(filters, self.conv_layers))
        )

    def to_dict(self) -> dict:
        return {
            "window_size": self.window_size,
            "conv_layers": [list(layer) for layer in self.conv_layers],
            "dense_width": self.dense_width,
            "n_tasks": self.n_tasks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ArchSpec:
        return cls(
            window_size=int(d["window_size"]),
            conv_layers=tuple(tuple(layer) for layer in d["conv_layers"]),
            dense_width=int(d["dense_width"]),
            n_tasks=int(d["n_tasks"]),
        )


@dataclass
class ModelParams:
    arch: ArchSpec
    conv: list[FilterBank]
    dense_w: np.ndarray
    dense_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray
    freeze_mask: tuple[bool, ...] = field(default=None)

    def __post_init__(self):
        a = self.arch
        if self.freeze_mask is None:
            self.freeze_mask = (False,) * a.n_layers
        self.freeze_mask = tuple(bool(f) for f in self.freeze_mask)
        if len(self.freeze_mask) != a.n_layers:
            raise ValueError(f"freeze_mask needs {a.n_layers} entries")
        if len(self.conv) != a.n_conv:
            raise ValueError("number of filter banks does not match arch")
        n_in = 1
        for i, (bank, (n, k)) in enumerate(zip(self.conv, a.conv_layers)):
            if bank.weights.shape != (n, n_in, k):
                raise ValueError(f"conv layer {i} has shape {bank.weights.shape}, arch wants {(n, n_in, k)}")
            n_in = n
        if self.dense_w.shape != (a.dense_width, a.flatten_size) or self.dense_b.shape != (a.dense_width,):
            raise ValueError("dense layer shape does not match arch")
        if self.head_w.shape != (a.n_tasks, a.dense_width) or self.head_b.shape != (a.n_tasks,):
            raise ValueError("head shape does not match arch")

    def layer_arrays(self, index: int) -> list[np.ndarray]:
        """The live parameter arrays of one layer (weights first, then bias)."""
        a = self.arch
        if 0 <= index < a.n_conv:
            return [self.conv[index].weights, self.conv[index].bias]
        if index == a.dense_index:
            return [self.dense_w, self.dense_b]
        if index == a.head_index:
            return [self.head_w, self.head_b]
        raise IndexError(f"layer {index} out of range")

    def arrays(self) -> list[np.ndarray]:
        return [arr for i in range(self.arch.n_layers) for arr in self.layer_arrays(i)]

    def array_names(self) -> list[str]:
        names = []
        for i in range(self.arch.n_conv):
            names += [f"conv{i}.weights", f"conv{i}.bias"]
        return names + ["dense.weights", "dense.bias", "head.weights", "head.bias"]

    def copy(self) -> ModelParams:
        return ModelParams(
            self.arch,
            [b.copy() for b in self.conv],
            self.dense_w.copy(),
            self.dense_b.copy(),
            self.head_w.copy(),
            self.head_b.copy(),
            self.freeze_mask,
        )

    def with_arrays(self, arrays: list[np.ndarray]) -> ModelParams:
        """New params of the same arch built from arrays in :meth:`arrays` order."""
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        n = self.arch.n_conv
        conv = [FilterBank(arrays[2 * i], arrays[2 * i + 1]) for i in range(n)]
        return ModelParams(self.arch, conv, *arrays[2 * n : 2 * n + 4], freeze_mask=self.freeze_mask)

    def with_freeze(self, mask) -> ModelParams:
        out = self.copy()
        out.freeze_mask = tuple(bool(f) for f in mask)
        if len(out.freeze_mask) != self.arch.n_layers:
            raise ValueError(f"freeze_mask needs {self.arch.n_layers} entries")
        return out

    def conv_frozen(self) -> ModelParams:
        n = self.arch.n_conv
        return self.with_freeze([True] * n + [False, False])

    def to_bytes(self) -> bytes:
        return params_to_bytes(self)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def init_params(arch: ArchSpec, seed: int = 0, layers=None) -> ModelParams:
    """Randomly initialised parameters; each layer draws from its own seeded stream.

    ``layers`` restricts which layers are drawn (others are zero) so that
    partially re-initialised models stay reproducible layer by layer.
    """
    layers = set(range(arch.n_layers)) if layers is None else set(layers)
    conv = []
    n_in = 1
    for i, (n, k) in enumerate(arch.conv_layers):
        w = np.zeros((n, n_in, k))
        if i in layers:
            w = _he_normal(substream(seed, "init", i), (n, n_in, k), n_in * k)
        conv.append(FilterBank(w, np.zeros(n)))
        n_in = n
    dense_w = np.zeros((arch.dense_width, arch.flatten_size))
    if arch.dense_index in layers:
        dense_w = _he_normal(
            substream(seed, "init", arch.dense_index), dense_w.shape, arch.flatten_size
        )
    head_w = np.zeros((arch.n_tasks, arch.dense_width))
    if arch.head_index in layers:
        # linear output: variance-preserving rather than He scaling
        head_w = substream(seed, "init", arch.head_index).normal(
            0.0, np.sqrt(1.0 / arch.dense_width), size=head_w.shape
        )
    return ModelParams(
        arch, conv, dense_w, np.zeros(arch.dense_width), head_w, np.zeros(arch.n_tasks)
    )


def build_seq2point(
    window_size: int,
    n_tasks: int = 1,
    seed: int = 0,
    conv_layers=DEFAULT_CONV_LAYERS,
    dense_width: int = DEFAULT_DENSE_WIDTH,
) -> ModelParams:
    arch = ArchSpec(window_size, tuple(conv_layers), dense_width, n_tasks)
    return init_params(arch, seed)


def reinit_layers(params: ModelParams, layers, seed: int) -> ModelParams:
    """Copy of ``params`` with the listed layers replaced by fresh random values."""
    fresh = init_params(params.arch, seed, layers=layers)
    out = params.copy()
    for i in layers:
        for dst, src in zip(out.layer_arrays(i), fresh.layer_arrays(i)):
            dst[...] = src
    return out


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    start: int
    inputs: list[np.ndarray]  # inputs[j] feeds layer start + j; last entry is the hidden layer

    @property
    def hidden(self) -> np.ndarray:
        return self.inputs[-1]


def forward_cached(params: ModelParams, x: np.ndarray, start: int = 0):
    """Run layers ``start..head``; ``x`` is the input of layer ``start``.

    Returns ``(predictions, cache)``. For ``start == 0``, ``x`` is a batch of
    windows ``(B, w)``.
    """
    a = params.arch
    h = np.asarray(x, dtype=np.float64)
    if start == 0:
        if h.ndim != 2 or h.shape[1] != a.window_size:
            raise ValueError(f"expected windows of shape (B, {a.window_size}), got {h.shape}")
        h = h[:, None, :]
    inputs = []
    for i in range(start, a.n_conv):
        inputs.append(h)
        h = relu(conv1d_forward(h, params.conv[i]))
    if start <= a.dense_index:
        h = h.reshape(h.shape[0], -1)
        inputs.append(h)
        h = relu(dense_forward(h, params.dense_w, params.dense_b))
    inputs.append(h)
    pred = dense_forward(h, params.head_w, params.head_b)
    return pred, ForwardCache(start, inputs)


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_pred: np.ndarray,
    grad_hidden: np.ndarray | None = None,
    stop: int | None = None,
) -> dict[int, list[np.ndarray]]:
    """Parameter gradients for layers ``stop..head`` (``stop`` defaults to the cache start).

    ``grad_hidden`` is an extra gradient on the shared dense activations,
    e.g. from an alignment loss.
    """
    a = params.arch
    start = cache.start
    stop = start if stop is None else max(stop, start)
    inp = cache.inputs
    grads: dict[int, list[np.ndarray]] = {}

    head = a.head_index
    g, gw, gb = dense_backward(inp[head - start], params.head_w, grad_pred, need_input_grad=head > stop)
    grads[head] = [gw, gb]
    if head == stop:
        return grads
    if grad_hidden is not None:
        g = g + grad_hidden

    dense = a.dense_index
    g = relu_backward(inp[head - start], g)
    g, gw, gb = dense_backward(inp[dense - start], params.dense_w, g, need_input_grad=dense > stop)
    grads[dense] = [gw, gb]
    if dense == stop:
        return grads

    out = inp[dense - start]
    batch = out.shape[0]
    shape = (batch, a.conv_layers[-1][0], a.conv_widths[-1])
    g = g.reshape(shape)
    out = out.reshape(shape)
    for i in reversed(range(stop, a.n_conv)):
        g = relu_backward(out, g)
        g, gw, gb = conv1d_backward(inp[i - start], params.conv[i], g, need_input_grad=i > stop)
        grads[i] = [gw, gb]
        out = inp[i - start]
    return grads


def prefix_features(params: ModelParams, windows: np.ndarray, upto: int, chunk: int = 512) -> np.ndarray:
    """Input of layer ``upto`` for every window (conv outputs are flattened at the dense layer)."""
    a = params.arch
    windows = np.asarray(windows, dtype=np.float64)
    if upto == 0:
        return windows.copy()
    parts = []
    for s in range(0, len(windows), chunk):
        h = windows[s : s + chunk][:, None, :]
        for i in range(min(upto, a.n_conv)):
            h = relu(conv1d_forward(h, params.conv[i]))
        if upto >= a.dense_index:
            h = h.reshape(h.shape[0], -1)
        if upto >= a.head_index:
            h = relu(dense_forward(h, params.dense_w, params.dense_b))
        parts.append(h)
    if not parts:
        return np.empty((0,) + _layer_input_shape(a, upto))
    return np.concatenate(parts)


def _layer_input_shape(a: ArchSpec, index: int) -> tuple[int, ...]:
    if index == 0:
        return (a.window_size,)
    if index < a.n_conv:
        return (a.conv_layers[index - 1][0], a.conv_widths[index - 1])
    if index == a.dense_index:
        return (a.flatten_size,)
    return (a.dense_width,)


def live_channels(params: ModelParams) -> list[np.ndarray]:
    """Per conv layer, the output channels read by at least one nonzero downstream weight."""
    a = params.arch
    live = []
    for i in range(a.n_conv):
        if i + 1 < a.n_conv:
            used = np.any(params.conv[i + 1].weights != 0, axis=(0, 2))
        else:
            w = a.conv_widths[-1]
            used = np.any(params.dense_w.reshape(a.dense_width, a.filters[-1], w) != 0, axis=(0, 2))
        live.append(np.flatnonzero(used))
    return live


def _skip_dead_channels(params: ModelParams) -> ModelParams:
    """Equivalent model without channels whose outputs are multiplied only by zeros.

    Such a channel contributes exact zeros, so dropping it leaves the
    prediction unchanged and performs the same arithmetic as a model that
    never had it.
    """
    a = params.arch
    live = live_channels(params)
    if all(len(idx) == n for idx, n in zip(live, a.filters)) or any(len(idx) == 0 for idx in live):
        return params
    conv = []
    prev = np.arange(1)
    for bank, idx in zip(params.conv, live):
        conv.append(FilterBank(bank.weights[idx][:, prev, :].copy(), bank.bias[idx].copy()))
        prev = idx
    w = a.conv_widths[-1]
    cols = (prev[:, None] * w + np.arange(w)[None, :]).ravel()
    arch = a.with_filters(len(idx) for idx in live)
    return ModelParams(arch, conv, params.dense_w[:, cols].copy(), params.dense_b, params.head_w,
                       params.head_b, params.freeze_mask)


def forward(params: ModelParams, windows: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Midpoint predictions, shape ``(B, n_tasks)``."""
    windows = np.asarray(windows, dtype=np.float64)
    if windows.ndim != 2 or windows.shape[1] != params.arch.window_size:
        raise ValueError(
            f"expected windows of shape (B, {params.arch.window_size}), got {windows.shape}"
        )
    params = _skip_dead_channels(params)
    out = [forward_cached(params, windows[s : s + chunk])[0] for s in range(0, len(windows), chunk)]
    if not out:
        return np.empty((0, params.arch.n_tasks))
    return np.concatenate(out)


def hidden_features(params: ModelParams, windows: np.ndarray) -> np.ndarray:
    """Shared dense-layer activations, the point common to all task heads."""
    return prefix_features(params, windows, params.arch.head_index)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    seed: int = 0
    coral_lambda: float = 0.0
    task_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.coral_lambda < 0:
            raise ValueError("coral_lambda must be >= 0")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        if d["task_weights"] is not None:
            d["task_weights"] = list(d["task_weights"])
        return d


def multitask_mse(pred: np.ndarray, target: np.ndarray, weights=None) -> tuple[float, np.ndarray]:
    """Weighted sum over tasks of per-task MSE, with its gradient."""
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
    n_tasks = pred.shape[1]
    w = np.ones(n_tasks) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (n_tasks,):
        raise ValueError("one task weight per task required")
    diff = pred - target
    per_task = np.mean(diff * diff, axis=0)
    return float(per_task @ w), 2.0 * diff * w / len(pred)


def trainable_layers(params: ModelParams) -> list[int]:
    return [i for i, frozen in enumerate(params.freeze_mask) if not frozen]


class PrefixInputs:
    """Inputs of the first trainable layer, cached when they fit in memory."""

    def __init__(self, params: ModelParams, windows: np.ndarray, start: int):
        self.params = params
        self.windows = windows
        self.start = start
        self.cached = None
        if start > 0:
            size = int(np.prod(_layer_input_shape(params.arch, start))) * len(windows) * 8
            if size <= PREFIX_CACHE_LIMIT:
                self.cached = prefix_features(params, windows, start)

    def __len__(self) -> int:
        return len(self.windows)

    def __getitem__(self, idx) -> np.ndarray:
        if self.start == 0:
            return self.windows[idx]
        if self.cached is not None:
            return self.cached[idx]
        return prefix_features(self.params, self.windows[idx], self.start)


def train(params: ModelParams, data, cfg: TrainConfig) -> tuple[ModelParams, list[float]]:
    """Mini-batch Adam on the summed per-task MSE.

    ``data`` is a labeled :class:`nilmfed.data.WindowBatch`. Layers flagged in
    ``params.freeze_mask`` never change. Returns the trained copy and the
    per-epoch mean training loss.
    """
    if cfg.coral_lambda != 0:
        # alignment needs unlabeled target windows, which plain training never sees
        raise ValueError("coral_lambda > 0 requires target data; use nilmfed.adapt.personalize")
    targets = getattr(data, "targets", None)
    if targets is None:
        raise ValueError("training data must carry targets for every task")
    windows = np.asarray(data.windows, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    a = params.arch
    if targets.shape != (len(windows), a.n_tasks):
        raise ValueError(f"targets shape {targets.shape}, expected {(len(windows), a.n_tasks)}")
    if len(windows) == 0:
        raise ValueError("no training windows")

    p = params.copy()
    layers = trainable_layers(p)
    history: list[float] = []
    if cfg.epochs == 0:
        return p, history

    if not layers or cfg.learning_rate == 0.0:
        # nothing moves: every epoch sees the same loss
        pred = forward(p, windows)
        loss, _ = multitask_mse(pred, targets, cfg.task_weights)
        return p, [loss] * cfg.epochs

    start = layers[0]
    inputs = PrefixInputs(p, windows, start)
    live = [arr for i in layers for arr in p.layer_arrays(i)]
    opt = Adam(learning_rate=cfg.learning_rate)
    rng = substream(cfg.seed, "shuffle")
    n = len(windows)
    for epoch in range(cfg.epochs):
        snapshot = p.copy()
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            pred, cache = forward_cached(p, inputs[idx], start)
            loss, grad = multitask_mse(pred, targets[idx], cfg.task_weights)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}", snapshot, history)
            total += loss * len(idx)
            grads = backward(p, cache, grad, stop=start)
            try:
                opt.step(live, [g for i in layers for g in grads[i]])
            except DivergenceError as exc:
                raise TrainingDiverged(str(exc), snapshot, history) from exc
        history.append(total / n)
    return p, history


# ---------------------------------------------------------------------------
# accounting


def param_count(params: ModelParams) -> int:
    return int(sum(arr.size for arr in params.arrays()))


def arch_param_count(arch: ArchSpec) -> int:
    total = 0
    n_in = 1
    for n, k in arch.conv_layers:
        total += n * n_in * k + n
        n_in = n
    total += arch.flatten_size * arch.dense_width + arch.dense_width
    total += arch.n_tasks * (arch.dense_width + 1)
    return total


def conv_layer_ops(n_in: int, n_out: int, kernel: int, width_out: int) -> int:
    """Multiply-adds of one conv layer, ``n_out * n_in * k * w_out``."""
    return n_out * n_in * kernel * width_out


def layer_op_counts(arch: ArchSpec) -> list[int]:
    ops = []
    n_in = 1
    for (n, k), w in zip(arch.conv_layers, arch.conv_widths):
        ops.append(conv_layer_ops(n_in, n, k, w))
        n_in = n
    return ops


def op_count(arch: ArchSpec) -> int:
    """Convolutional operation count (dense layers: see :func:`dense_op_count`)."""
    if isinstance(arch, ModelParams):
        arch = arch.arch
    return sum(layer_op_counts(arch))


def dense_op_count(arch: ArchSpec) -> int:
    if isinstance(arch, ModelParams):
        arch = arch.arch
    return arch.flatten_size * arch.dense_width + arch.dense_width * arch.n_tasks


# ---------------------------------------------------------------------------
# serialization

_MAGIC = b"NILMPRM1"
FORMAT_VERSION = 1


def params_to_bytes(params: ModelParams) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "arch": params.arch.to_dict(),
        "freeze_mask": list(params.freeze_mask),
        "arrays": [
            {"name": name, "shape": list(arr.shape)}
            for name, arr in zip(params.array_names(), params.arrays())
        ],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in params.arrays())
    return _MAGIC + struct.pack("<I", len(head)) + head + body


def params_from_bytes(blob: bytes) -> ModelParams:
    if blob[: len(_MAGIC)] != _MAGIC:
        raise ValueError("not a parameter file")
    (n,) = struct.unpack_from("<I", blob, len(_MAGIC))
    offset = len(_MAGIC) + 4
    header = json.loads(blob[offset : offset + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported parameter format version {header.get('format_version')}")
    offset += n
    arch = ArchSpec.from_dict(header["arch"])
    arrays = []
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays.append(arr.astype(np.float64))
        offset += 8 * count
    if offset != len(blob):
        raise ValueError("trailing bytes in parameter file")
    template = init_params(arch, layers=())
    out = template.with_arrays(arrays)
    out.freeze_mask = tuple(header["freeze_mask"])
    return out


def save_params(params: ModelParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> ModelParams:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
