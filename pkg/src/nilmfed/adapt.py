"""Unsupervised edge personalization with CORAL, and the layer-transfer grid."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from ._rng import substream
from .data import MainsWindows, WindowBatch
from .metrics import evaluate_model
from .model import (
    ModelParams,
    PrefixInputs,
    TrainConfig,
    TrainingDiverged,
    backward,
    forward,
    forward_cached,
    multitask_mse,
    reinit_layers,
    train,
    trainable_layers,
)
from .tensor import Adam, DivergenceError


def covariance(features: np.ndarray) -> np.ndarray:
    """Sample covariance of an ``(n, d)`` batch with the unbiased ``1/(n-1)`` factor."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("features must be (n, d)")
    n = x.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least two samples")
    xc = x - x.mean(axis=0)
    c = xc.T @ xc / (n - 1)
    # symmetric by construction, but matmul rounding need not be
    return (c + c.T) / 2


def coral_loss(c_s: np.ndarray, c_t: np.ndarray, dim: int | None = None) -> float:
    """``||C_s - C_t||_F^2 / (4 d^2)`` for ``d x d`` covariances."""
    c_s = np.asarray(c_s, dtype=np.float64)
    c_t = np.asarray(c_t, dtype=np.float64)
    if c_s.shape != c_t.shape or c_s.ndim != 2 or c_s.shape[0] != c_s.shape[1]:
        raise ValueError(f"covariance shapes {c_s.shape} and {c_t.shape} are not equal square matrices")
    d = c_s.shape[0] if dim is None else dim
    diff = c_s - c_t
    return float(np.sum(diff * diff) / (4.0 * d * d))


def coral_loss_and_grad(source: np.ndarray, target: np.ndarray):
    """CORAL loss between two feature batches and its gradient w.r.t. each batch."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape[1] != target.shape[1]:
        raise ValueError("source and target feature dimensions differ")
    d = source.shape[1]
    c_s, c_t = covariance(source), covariance(target)
    diff = c_s - c_t
    loss = float(np.sum(diff * diff) / (4.0 * d * d))
    g_cov = diff / (2.0 * d * d)
    g_s = 2.0 * (source - source.mean(axis=0)) @ g_cov / (len(source) - 1)
    g_t = -2.0 * (target - target.mean(axis=0)) @ g_cov / (len(target) - 1)
    return loss, g_s, g_t


def edge_loss(regression_loss: float, coral: float, lam: float) -> float:
    return regression_loss + lam * coral


@dataclass
class CoralConfig:
    layer: str = "dense"  # "dense" (shared hidden activations) or "head" (task outputs)
    feature_dim: int | None = None
    lam: float = 1.0
    warmup: float = 0.1  # fraction of steps over which lambda ramps up linearly
    target_batch_size: int = 64
    source_cache: int = 1024

    def __post_init__(self):
        if self.layer not in ("dense", "head"):
            raise ValueError(f"unknown alignment layer {self.layer!r}")
        if self.feature_dim is not None and self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 <= self.warmup <= 1:
            raise ValueError("warmup must be a fraction in [0, 1]")
        if self.target_batch_size < 2:
            raise ValueError("target_batch_size must be >= 2 for a covariance")

    def to_dict(self) -> dict:
        return asdict(self)


def source_sample(source: WindowBatch, size: int, seed: int) -> WindowBatch:
    """Fixed random subset of labeled cloud windows shipped to clients."""
    if len(source) <= size:
        return source
    idx = np.sort(substream(seed, "source-cache").choice(len(source), size, replace=False))
    return source.subset(idx)


@dataclass
class PersonalizeHistory:
    regression: list[float]
    coral: list[float]
    edge: list[float]


def personalize_with_history(
    cloud_model: ModelParams,
    source: WindowBatch,
    target: MainsWindows,
    cfg: CoralConfig,
    train_cfg: TrainConfig,
) -> tuple[ModelParams, PersonalizeHistory]:
    if isinstance(target, WindowBatch) or not isinstance(target, MainsWindows):
        raise TypeError("target data must be unlabeled MainsWindows")
    if len(target) < 2:
        raise ValueError("need at least two target windows")
    if len(source) == 0:
        raise ValueError("no source windows")

    p = cloud_model.conv_frozen()
    history = PersonalizeHistory([], [], [])
    if train_cfg.epochs == 0:
        p.freeze_mask = cloud_model.freeze_mask
        return p, history

    layers = trainable_layers(p)
    start = layers[0]
    src_in = PrefixInputs(p, np.asarray(source.windows), start)
    tgt_in = PrefixInputs(p, np.asarray(target.windows), start)
    src_y = np.asarray(source.targets)
    dim = p.arch.dense_width if cfg.layer == "dense" else p.arch.n_tasks
    if cfg.feature_dim is not None and cfg.feature_dim != dim:
        raise ValueError(f"feature_dim {cfg.feature_dim} does not match layer width {dim}")

    live = [arr for i in layers for arr in p.layer_arrays(i)]
    opt = Adam(learning_rate=train_cfg.learning_rate)
    rng = substream(train_cfg.seed, "personalize")
    n_src, n_tgt = len(source), len(target)
    bs = train_cfg.batch_size
    steps_per_epoch = -(-n_src // bs)
    total_steps = steps_per_epoch * train_cfg.epochs
    warm = max(1.0, cfg.warmup * total_steps)
    tb = min(cfg.target_batch_size, n_tgt)
    step = 0
    for epoch in range(train_cfg.epochs):
        snapshot = p.copy()
        order = rng.permutation(n_src)
        sums = np.zeros(3)
        for s in range(0, n_src, bs):
            idx = order[s : s + bs]
            tidx = rng.choice(n_tgt, tb, replace=False)
            lam = cfg.lam * min(1.0, (step + 1) / warm) if cfg.warmup > 0 else cfg.lam
            step += 1

            pred_s, cache_s = forward_cached(p, src_in[idx], start)
            pred_t, cache_t = forward_cached(p, tgt_in[tidx], start)
            l_r, g_pred = multitask_mse(pred_s, src_y[idx], train_cfg.task_weights)

            gh_s = gh_t = None
            g_pred_t = np.zeros_like(pred_t)
            align = len(idx) >= 2 and lam > 0
            if align:
                if cfg.layer == "dense":
                    l_c, gs, gt = coral_loss_and_grad(cache_s.hidden, cache_t.hidden)
                    gh_s, gh_t = lam * gs, lam * gt
                else:
                    l_c, gs, gt = coral_loss_and_grad(pred_s, pred_t)
                    g_pred = g_pred + lam * gs
                    g_pred_t = lam * gt
            else:
                l_c = 0.0
            total = edge_loss(l_r, l_c, lam)
            if not np.isfinite(total):
                raise TrainingDiverged(f"non-finite edge loss in epoch {epoch}", snapshot, history.edge)
            sums += np.array([l_r, l_c, total]) * len(idx)

            grads = backward(p, cache_s, g_pred, gh_s, stop=start)
            if align:
                grads_t = backward(p, cache_t, g_pred_t, gh_t, stop=start)
                for i in grads:
                    grads[i] = [a + b for a, b in zip(grads[i], grads_t[i])]
            try:
                opt.step(live, [g for i in layers for g in grads[i]])
            except DivergenceError as exc:
                raise TrainingDiverged(str(exc), snapshot, history.edge) from exc
        r, c, e = sums / n_src
        history.regression.append(float(r))
        history.coral.append(float(c))
        history.edge.append(float(e))
    p.freeze_mask = cloud_model.freeze_mask
    return p, history


def personalize(
    cloud_model: ModelParams,
    source: WindowBatch,
    target: MainsWindows,
    cfg: CoralConfig,
    train_cfg: TrainConfig,
) -> ModelParams:
    """Fine-tune the dense layers on source regression plus CORAL alignment to target.

    Convolutional layers are frozen and come back bit-identical. ``target``
    carries mains windows only.
    """
    return personalize_with_history(cloud_model, source, target, cfg, train_cfg)[0]


def probe_coral(params: ModelParams, source: MainsWindows, target: MainsWindows) -> float:
    """CORAL distance of shared dense activations on two fixed batches."""
    from .model import hidden_features

    return coral_loss(covariance(hidden_features(params, source.windows)),
                      covariance(hidden_features(params, target.windows)))


# ---------------------------------------------------------------------------
# transferability grid

MODES = ("fixed", "fine-tuned")


@dataclass
class GridRow:
    layers: int
    mode: str
    mae: float
    sae: float | None
    f1: float
    final_train_loss: float


@dataclass
class TransferGridResult:
    rows: list[GridRow]

    def to_dict(self) -> dict:
        return {"version": 1, "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layers", "mode", "mae", "sae", "f1", "final_train_loss"])
        for r in self.rows:
            writer.writerow([r.layers, r.mode, repr(r.mae), "" if r.sae is None else repr(r.sae),
                             repr(r.f1), repr(r.final_train_loss)])
        return buf.getvalue()

    def row(self, layers: int, mode: str) -> GridRow:
        for r in self.rows:
            if r.layers == layers and r.mode == mode:
                return r
        raise KeyError((layers, mode))


def transfer_model(source_model: ModelParams, n_layers: int, mode: str, seed: int) -> ModelParams:
    """Layers ``< n_layers`` copied from the source, the rest re-initialised.

    In ``fixed`` mode the copied layers are frozen; in ``fine-tuned`` mode
    every layer trains.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    total = source_model.arch.n_layers
    if not 1 <= n_layers <= total:
        raise ValueError(f"n_layers must lie in 1..{total}")
    model = reinit_layers(source_model, range(n_layers, total), seed)
    mask = [i < n_layers for i in range(total)] if mode == "fixed" else [False] * total
    return model.with_freeze(mask)


def transfer_grid(
    source_model: ModelParams,
    target_train: WindowBatch,
    target_test: WindowBatch,
    train_cfg: TrainConfig,
    seed: int = 0,
) -> TransferGridResult:
    """Retrain every (transferred layers, mode) variant on target data and score it."""
    rows = []
    for n in range(1, source_model.arch.n_layers + 1):
        for mode in MODES:
            model = transfer_model(source_model, n, mode, seed)
            trained, _ = train(model, target_train, train_cfg)
            rep = evaluate_model(trained, target_test)
            loss = multitask_mse(forward(trained, target_train.windows), target_train.targets,
                                 train_cfg.task_weights)[0]
            rows.append(GridRow(n, mode, rep.mean_mae, rep.mean_sae, rep.mean_f1, loss))
    return TransferGridResult(rows)
