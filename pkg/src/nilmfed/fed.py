"""In-process federation: cloud bootstrap, client personalization, FedAvg rounds.

Parameters travel between server and clients as plaintext copies; nothing
else crosses the boundary. The server never holds client power data.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import jsonschema
import numpy as np

from ._rng import derive_seed
from .adapt import CoralConfig, personalize_with_history, source_sample
from .compress import PruneReport, compress_pipeline
from .data import (
    MainsWindows,
    Normalizer,
    PowerSeries,
    SynthSpec,
    WindowBatch,
    make_windows,
    synth_household,
    window_mains,
)
from .metrics import evaluate
from .model import ModelParams, TrainConfig, forward

POLICIES = ("uniform", "weighted")
SCOPES = ("all", "trunk")


class ArchitectureMismatch(ValueError):
    pass


class EmptyClientError(ValueError):
    pass


class RoundAborted(RuntimeError):
    pass


def fedavg(
    client_params: list[ModelParams],
    weights=None,
    scope: str = "all",
    base: ModelParams | None = None,
) -> ModelParams:
    """Elementwise (weighted) mean of client parameters.

    The mean is taken as ``p0 + sum_k a_k (p_k - p0)`` so that averaging
    identical models returns them bit for bit. With ``scope="trunk"`` only the
    conv and shared dense layers are averaged and the heads come from ``base``
    (or the first client).
    """
    if not client_params:
        raise ValueError("fedavg needs at least one model")
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    first = client_params[0]
    for i, p in enumerate(client_params[1:], start=1):
        if p.arch != first.arch:
            raise ArchitectureMismatch(f"model {i} has architecture {p.arch}, expected {first.arch}")
    k = len(client_params)
    if weights is None:
        coef = np.full(k, 1.0 / k)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (k,) or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValueError("weights must be K nonnegative finite numbers, not all zero")
        coef = w / w.sum()

    ref = first.arrays()
    out = []
    for j, p0 in enumerate(ref):
        acc = p0.copy()
        for c, p in zip(coef[1:], client_params[1:]):
            acc += c * (p.arrays()[j] - p0)
        # the first model enters with coefficient coef[0] through p0 + sum_k c_k (p_k - p0)
        out.append(acc)
    result = first.with_arrays(out)
    if scope == "trunk":
        head_src = base if base is not None else first
        if head_src.arch != first.arch:
            raise ArchitectureMismatch("base model architecture differs from clients")
        result.head_w = head_src.head_w.copy()
        result.head_b = head_src.head_b.copy()
    return result


def param_digest(params: ModelParams) -> str:
    return hashlib.sha256(params.to_bytes()).hexdigest()


@dataclass
class FedConfig:
    rounds: int = 3
    prune_fraction: float = 0.6
    policy: str = "uniform"
    scope: str = "all"
    workers: int = 1
    local: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=5, learning_rate=1e-4))
    coral: CoralConfig = field(default_factory=CoralConfig)

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}")
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


@dataclass
class ServerState:
    global_params: ModelParams
    normalizer: Normalizer
    source_cache: WindowBatch
    round: int = 0
    clients: dict[str, dict] = field(default_factory=dict)
    policy: str = "uniform"
    scope: str = "all"
    bootstrap_report: dict | None = None

    def register(self, client_id: str, manifest: dict | None = None) -> None:
        entry = dict(manifest or {})
        for key, value in entry.items():
            if isinstance(value, (np.ndarray, PowerSeries)):
                raise TypeError(f"client manifest field {key!r} holds data; only metadata is allowed")
        self.clients[client_id] = entry


@dataclass
class ClientState:
    client_id: str
    mains: PowerSeries
    appliances: list[PowerSeries] | None = None  # simulation ground truth, never read by training
    params: ModelParams | None = None
    last_metrics: dict = field(default_factory=dict)

    def local_normalizer(self, normalizer: Normalizer) -> Normalizer:
        """The cloud normalizer rebased onto this client's own mains statistics."""
        if len(self.mains) == 0:
            raise EmptyClientError(f"client {self.client_id} has no readings")
        return normalizer.for_mains(self.mains)

    def local_windows(self, window_size: int, normalizer: Normalizer) -> MainsWindows:
        if len(self.mains) < window_size:
            raise EmptyClientError(f"client {self.client_id} has no complete window")
        return window_mains(self.mains, window_size, self.local_normalizer(normalizer).mains)


def bootstrap(
    cloud_dataset: WindowBatch,
    prune_fraction: float = 0.6,
    train_cfg: TrainConfig | None = None,
    retrain_cfg: TrainConfig | None = None,
    source_cache_size: int = 1024,
    seed: int = 0,
    policy: str = "uniform",
    scope: str = "all",
    eval_data: WindowBatch | None = None,
) -> ServerState:
    """Train the multi-task cloud model, compress it and install it as the global model."""
    train_cfg = train_cfg or TrainConfig(seed=seed)
    retrain_cfg = retrain_cfg or replace(train_cfg, seed=train_cfg.seed + 1)
    params, report = compress_pipeline(
        cloud_dataset, prune_fraction, retrain_cfg, train_cfg=train_cfg, eval_data=eval_data
    )
    cache = source_sample(cloud_dataset, source_cache_size, seed)
    return ServerState(
        global_params=params,
        normalizer=cloud_dataset.normalizer,
        source_cache=cache,
        policy=policy,
        scope=scope,
        bootstrap_report=report.to_dict(),
    )


def client_update(
    client: ClientState,
    global_params: ModelParams,
    cfg: FedConfig,
    normalizer: Normalizer,
    source: WindowBatch,
    round_index: int = 0,
) -> ModelParams:
    """Personalize the global model on the client's unlabeled mains (conv layers frozen).

    Each client and round draws its own minibatch order from the local seed.
    """
    local = client.local_windows(global_params.arch.window_size, normalizer)
    if len(local) < 2:
        raise EmptyClientError(f"client {client.client_id} has fewer than two windows")
    local_cfg = replace(cfg.local, seed=derive_seed(cfg.local.seed, "client", client.client_id, round_index))
    params, hist = personalize_with_history(global_params, source, local, cfg.coral, local_cfg)
    client.params = params
    client.last_metrics = {
        "n_windows": len(local),
        "regression_loss": hist.regression,
        "coral_loss": hist.coral,
        "edge_loss": hist.edge,
    }
    return params


@dataclass
class ClientEntry:
    client_id: str
    n_windows: int
    update_norm: float
    regression_loss: list[float]
    coral_loss: list[float]
    wall_time: float


@dataclass
class RoundReport:
    round: int
    clients: list[ClientEntry]
    failed: list[dict]
    param_digest: str
    policy: str
    scope: str
    probe: dict | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


ROUND_REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["round", "clients", "failed", "param_digest", "policy", "scope", "probe"],
    "additionalProperties": False,
    "properties": {
        "round": {"type": "integer", "minimum": 0},
        "clients": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["client_id", "n_windows", "update_norm", "regression_loss", "coral_loss", "wall_time"],
                "additionalProperties": False,
                "properties": {
                    "client_id": {"type": "string"},
                    "n_windows": {"type": "integer", "minimum": 1},
                    "update_norm": {"type": "number", "minimum": 0},
                    "regression_loss": {"type": "array", "items": {"type": "number"}},
                    "coral_loss": {"type": "array", "items": {"type": "number"}},
                    "wall_time": {"type": "number", "minimum": 0},
                },
            },
        },
        "failed": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["client_id", "error"],
                "properties": {"client_id": {"type": "string"}, "error": {"type": "string"}},
            },
        },
        "param_digest": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "policy": {"enum": list(POLICIES)},
        "scope": {"enum": list(SCOPES)},
        "probe": {
            "type": ["object", "null"],
            "required": ["mean_mae", "mae", "sae", "f1"],
            "properties": {
                "mean_mae": {"type": "number", "minimum": 0},
                "mae": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "sae": {"type": "array", "items": {"type": ["number", "null"]}},
                "f1": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
            },
        },
    },
}


def validate_report(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` unless ``doc`` is a well-formed round report."""
    jsonschema.validate(doc, ROUND_REPORT_SCHEMA)


def probe_metrics(params: ModelParams, probe) -> dict:
    """Metrics on a probe batch, or pooled over a list of per-client batches."""
    parts = [probe] if isinstance(probe, WindowBatch) else list(probe)
    pred = np.concatenate([np.clip(b.normalizer.targets_to_watts(forward(params, b.windows)), 0.0, None)
                           for b in parts])
    truth = np.concatenate([b.targets_watts() for b in parts])
    rep = evaluate(pred, truth)
    return {
        "mean_mae": rep.mean_mae,
        "mae": [a.mae for a in rep.appliances],
        "sae": [a.sae for a in rep.appliances],
        "f1": [a.f1 for a in rep.appliances],
    }


def _update_norm(a: ModelParams, b: ModelParams) -> float:
    return float(np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(a.arrays(), b.arrays()))))


def run_round(
    server: ServerState,
    clients: list[ClientState],
    cfg: FedConfig,
    probe=None,
) -> tuple[ServerState, RoundReport]:
    """One synchronous round: distribute, personalize on every client, aggregate.

    Returns a new server state; the input state is left untouched. Raises
    :class:`RoundAborted` when no client produced a usable update.
    """
    global_params = server.global_params

    def work(client: ClientState):
        t0 = time.perf_counter()
        params = client_update(client, global_params.copy(), cfg, server.normalizer, server.source_cache,
                               server.round + 1)
        return params, time.perf_counter() - t0

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            futures = [pool.submit(work, c) for c in clients]
            outcomes = []
            for f in futures:
                try:
                    outcomes.append(f.result())
                except Exception as exc:  # noqa: BLE001 - a failing client is skipped
                    outcomes.append(exc)
    else:
        outcomes = []
        for c in clients:
            try:
                outcomes.append(work(c))
            except Exception as exc:  # noqa: BLE001
                outcomes.append(exc)

    updates, entries, failed, sizes = [], [], [], []
    for client, outcome in zip(clients, outcomes):
        if isinstance(outcome, Exception):
            failed.append({"client_id": client.client_id, "error": f"{type(outcome).__name__}: {outcome}"})
            continue
        params, wall = outcome
        if params.arch != global_params.arch:
            failed.append({"client_id": client.client_id, "error": "ArchitectureMismatch"})
            continue
        updates.append(params)
        n = client.last_metrics["n_windows"]
        sizes.append(n)
        entries.append(
            ClientEntry(
                client.client_id,
                n,
                _update_norm(params, global_params),
                client.last_metrics["regression_loss"],
                client.last_metrics["coral_loss"],
                wall,
            )
        )
    if not updates:
        raise RoundAborted(f"round {server.round + 1}: no client produced an update ({failed})")

    weights = sizes if server.policy == "weighted" else None
    new_global = fedavg(updates, weights, scope=server.scope, base=global_params)
    new_global.freeze_mask = global_params.freeze_mask
    new_state = replace(server, global_params=new_global, round=server.round + 1, clients=dict(server.clients))
    report = RoundReport(
        round=new_state.round,
        clients=entries,
        failed=failed,
        param_digest=param_digest(new_global),
        policy=server.policy,
        scope=server.scope,
        probe=probe_metrics(new_global, probe) if probe is not None else None,
    )
    return new_state, report


# ---------------------------------------------------------------------------
# synthetic federations


@dataclass
class SyntheticClient:
    state: ClientState
    probe_mains: PowerSeries
    probe_appliances: list[PowerSeries]
    power_scale: float
    time_scale: float


def synthetic_clients(
    base: SynthSpec,
    n_clients: int,
    seed: int,
    power_scales=None,
    time_scales=None,
    probe_fraction: float = 0.25,
) -> list[SyntheticClient]:
    """Households drawn from shifted versions of ``base``; each keeps a labeled tail as probe data."""
    power_scales = power_scales or [1.0 + 0.25 * i for i in range(n_clients)]
    time_scales = time_scales or [1.0 + 0.15 * i for i in range(n_clients)]
    out = []
    for i in range(n_clients):
        spec = base.shifted(power_scales[i], time_scales[i])
        house = synth_household(spec, derive_seed(seed, "client-household", i))
        cut = int(round(len(house.mains) * (1.0 - probe_fraction)))
        state = ClientState(
            f"client{i}",
            house.mains.slice(0, cut),
            [a.slice(0, cut) for a in house.appliances],
        )
        out.append(
            SyntheticClient(
                state,
                house.mains.slice(cut),
                [a.slice(cut) for a in house.appliances],
                power_scales[i],
                time_scales[i],
            )
        )
    return out


def probe_batch(clients: list[SyntheticClient], window_size: int, normalizer: Normalizer) -> list[WindowBatch]:
    """Labeled probe windows per client, normalized the way that client sees its mains."""
    return [
        make_windows(c.probe_mains, c.probe_appliances, window_size, c.state.local_normalizer(normalizer))
        for c in clients
    ]
