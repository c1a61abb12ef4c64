"""Structured L1 filter pruning of the convolutional trunk."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import evaluate_model
from .model import (
    ModelParams,
    TrainConfig,
    build_seq2point,
    dense_op_count,
    forward,
    layer_op_counts,
    op_count,
    param_count,
    train,
)
from .tensor import FilterBank


def score_filters(layer: FilterBank) -> np.ndarray:
    """L1 norm of each filter's weights (bias excluded)."""
    return np.abs(layer.weights).sum(axis=(1, 2))


def kept_count(n_filters: int, fraction: float) -> int:
    # round() ties to even
    return max(1, int(round((1.0 - fraction) * n_filters)))


def select_filters(scores: np.ndarray, keep: int) -> tuple[int, ...]:
    """Indices of the ``keep`` highest scores; ties keep the lower index."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    return tuple(sorted(int(i) for i in order[:keep]))


@dataclass(frozen=True)
class PruneMask:
    kept: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        for i, idx in enumerate(self.kept):
            if not idx:
                raise ValueError(f"layer {i}: at least one filter must be kept")
            if list(idx) != sorted(set(idx)):
                raise ValueError(f"layer {i}: kept indices must be sorted and unique")

    @classmethod
    def full(cls, params: ModelParams) -> PruneMask:
        return cls(tuple(tuple(range(n)) for n in params.arch.filters))

    def with_layer(self, layer: int, kept) -> PruneMask:
        kept_all = list(self.kept)
        kept_all[layer] = tuple(sorted(int(i) for i in kept))
        return PruneMask(tuple(kept_all))

    def to_dict(self) -> dict:
        return {"kept": [list(k) for k in self.kept]}


def apply_mask(params: ModelParams, mask: PruneMask) -> ModelParams:
    """Drop filters not in ``mask`` together with the matching input slices downstream."""
    a = params.arch
    if len(mask.kept) != a.n_conv:
        raise ValueError("mask must list kept filters for every conv layer")
    conv = []
    prev = [0]
    for i, (bank, keep) in enumerate(zip(params.conv, mask.kept)):
        if keep[-1] >= bank.out_channels:
            raise ValueError(f"layer {i}: kept index {keep[-1]} out of range")
        keep = list(keep)
        w = bank.weights[keep][:, prev, :]
        conv.append(FilterBank(w.copy(), bank.bias[keep].copy()))
        prev = keep
    width = a.conv_widths[-1] if a.n_conv else a.window_size
    cols = (np.asarray(prev)[:, None] * width + np.arange(width)[None, :]).ravel()
    arch = a.with_filters(len(k) for k in mask.kept)
    return ModelParams(
        arch,
        conv,
        params.dense_w[:, cols].copy(),
        params.dense_b.copy(),
        params.head_w.copy(),
        params.head_b.copy(),
        params.freeze_mask,
    )


def prune_model(params: ModelParams, fraction: float) -> tuple[ModelParams, PruneMask]:
    """Prune ``fraction`` of the filters in every conv layer by lowest L1 score."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"prune fraction must lie in [0, 1), got {fraction}")
    kept = []
    for bank in params.conv:
        keep = kept_count(bank.out_channels, fraction)
        kept.append(select_filters(score_filters(bank), keep))
    mask = PruneMask(tuple(kept))
    return apply_mask(params, mask), mask


@dataclass
class PruneReport:
    prune_fraction: float
    filters_before: list[int]
    filters_after: list[int]
    kept: list[list[int]]
    param_count_before: int
    param_count_after: int
    op_count_before: int
    op_count_after: int
    layer_ops_before: list[int]
    layer_ops_after: list[int]
    dense_ops_before: int
    dense_ops_after: int
    mae_unpruned: list[float] = field(default_factory=list)
    mae_pruned: list[float] = field(default_factory=list)
    mae_retrained: list[float] = field(default_factory=list)
    mse_unpruned: float | None = None  # normalized units, on eval_data
    mse_retrained: float | None = None
    train_loss: list[float] = field(default_factory=list)
    retrain_loss: list[float] = field(default_factory=list)

    @property
    def fraction_pruned(self) -> list[float]:
        return [1.0 - a / b for a, b in zip(self.filters_after, self.filters_before)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fraction_pruned"] = self.fraction_pruned
        d["version"] = 1
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cost_report(before: ModelParams, after: ModelParams, mask: PruneMask, fraction: float) -> PruneReport:
    return PruneReport(
        prune_fraction=fraction,
        filters_before=list(before.arch.filters),
        filters_after=list(after.arch.filters),
        kept=[list(k) for k in mask.kept],
        param_count_before=param_count(before),
        param_count_after=param_count(after),
        op_count_before=op_count(before.arch),
        op_count_after=op_count(after.arch),
        layer_ops_before=layer_op_counts(before.arch),
        layer_ops_after=layer_op_counts(after.arch),
        dense_ops_before=dense_op_count(before.arch),
        dense_ops_after=dense_op_count(after.arch),
    )


def _mse(params: ModelParams, batch) -> float:
    return float(np.mean((forward(params, batch.windows) - batch.targets) ** 2))


def compress_pipeline(
    dataset,
    fraction: float,
    retrain_cfg: TrainConfig,
    train_cfg: TrainConfig | None = None,
    initial: ModelParams | None = None,
    eval_data=None,
) -> tuple[ModelParams, PruneReport]:
    """Train, score, prune, retrain.

    Step one is skipped when ``initial`` is given without ``train_cfg`` (the
    model is taken as already converged). MAE figures are computed on
    ``eval_data`` when provided.
    """
    train_loss: list[float] = []
    if initial is None:
        if train_cfg is None:
            raise ValueError("need either an initial model or a train_cfg")
        initial = build_seq2point(dataset.window_size, dataset.n_tasks, seed=train_cfg.seed)
    model = initial
    if train_cfg is not None:
        model, train_loss = train(initial, dataset, train_cfg)

    pruned, mask = prune_model(model, fraction)
    retrained, retrain_loss = train(pruned, dataset, retrain_cfg)

    report = cost_report(model, retrained, mask, fraction)
    report.train_loss = train_loss
    report.retrain_loss = retrain_loss
    if eval_data is not None:
        report.mae_unpruned = [m.mae for m in evaluate_model(model, eval_data).appliances]
        report.mae_pruned = [m.mae for m in evaluate_model(pruned, eval_data).appliances]
        report.mae_retrained = [m.mae for m in evaluate_model(retrained, eval_data).appliances]
        report.mse_unpruned = _mse(model, eval_data)
        report.mse_retrained = _mse(retrained, eval_data)
    return retrained, report
