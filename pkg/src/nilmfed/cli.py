"""Command-line runner: ``nilmfed <subcommand> --config run.json --seed N --out DIR``.

Every run writes ``manifest.json`` into its output directory holding the
fully resolved configuration. Passing that manifest back as ``--config``
repeats the run and reproduces its parameter files bit for bit.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from ._rng import derive_seed
from .adapt import CoralConfig, personalize_with_history, source_sample, transfer_grid
from .compress import compress_pipeline
from .data import (
    Normalizer,
    SynthSpec,
    default_synth_spec,
    make_windows,
    read_household,
    synth_household,
    write_household,
)
from .fed import (
    ClientState,
    FedConfig,
    bootstrap,
    probe_batch,
    probe_metrics,
    run_round,
    synthetic_clients,
)
from .metrics import evaluate_model
from .model import (
    TrainConfig,
    build_seq2point,
    load_params,
    op_count,
    param_count,
    save_params,
    train,
)

CONFIG_VERSION = 1
MANIFEST_VERSION = 1
WINDOW_SIZES = (99, 499)
COMMANDS = ("synth", "train-cloud", "compress", "adapt", "grid", "fed", "eval")

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": None,
    "window": 99,
    "stride": 2,  # keep every n-th training window
    "model": None,  # parameter file consumed by compress/adapt/grid/eval
    "data": {"cloud": None, "heldout": None, "target": None, "clients": None},
    "synth": {"spec": None, "length": 12_000, "target_power_scale": 1.5, "target_time_scale": 1.3},
    "train": {"epochs": 4, "batch_size": 64, "learning_rate": 5e-4, "task_weights": None},
    "retrain": {"epochs": 4, "batch_size": 64, "learning_rate": 5e-4},
    "prune_fraction": 0.6,
    "coral": {"layer": "dense", "lam": 3000.0, "warmup": 0.1, "target_batch_size": 64, "source_cache": 1024},
    "adapt": {"epochs": 10, "batch_size": 64, "learning_rate": 1e-4, "eval_fraction": 0.25},
    "grid": {"epochs": 10, "batch_size": 64, "learning_rate": 5e-4, "train_fraction": 0.8},
    "eval": {"split": "heldout"},
    "fed": {
        "clients": 3,
        "rounds": 3,
        "policy": "uniform",
        "scope": "all",
        "workers": 1,
        "client_length": 6000,
        "power_scales": None,
        "time_scales": None,
        "probe_fraction": 0.25,
    },
}
# fields whose value is free-form (validated by the consumer, not by shape)
OPAQUE = {"seed", "model", "data.cloud", "data.heldout", "data.target", "data.clients", "synth.spec",
          "train.task_weights", "fed.power_scales", "fed.time_scales"}
PATH_FIELDS = ("model", "data.cloud", "data.heldout", "data.target")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _merge(defaults: dict, given: dict, prefix: str = "") -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"field '{prefix.rstrip('.') or '<root>'}' must be an object")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        name = prefix + key
        if key not in defaults:
            raise ConfigError(f"unknown field '{name}'")
        default = defaults[key]
        if name in OPAQUE:
            out[key] = value
        elif isinstance(default, dict):
            out[key] = _merge(default, value, name + ".")
        elif isinstance(default, bool) or isinstance(value, bool):
            if type(value) is not type(default):
                raise ConfigError(f"field '{name}' must be {type(default).__name__}")
            out[key] = value
        elif isinstance(default, (int, float)):
            if not isinstance(value, (int, float)) or (isinstance(default, int) and not isinstance(value, int)):
                raise ConfigError(f"field '{name}' must be {type(default).__name__}")
            out[key] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigError(f"field '{name}' must be a string")
            out[key] = value
        else:
            out[key] = value
    return out


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _set(cfg: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    node = cfg
    for part in head:
        node = node[part]
    node[last] = value


def resolve_config(doc: dict, seed: int | None = None, base_dir: Path | None = None) -> dict:
    """Validate a config document and fill defaults; relative paths resolve against ``base_dir``."""
    if "manifest_version" in doc:
        doc = doc.get("config", {})
    version = doc.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"field 'version': unsupported config version {version}")
    cfg = _merge(DEFAULTS, doc)
    if seed is not None:
        cfg["seed"] = seed
    s = cfg["seed"]
    if s is None:
        raise ConfigError("field 'seed' is required (set it in the config or pass --seed)")
    if isinstance(s, bool) or not isinstance(s, int) or not 0 <= s < 2**64:
        raise ConfigError("field 'seed' must be an integer in [0, 2^64)")
    if cfg["window"] not in WINDOW_SIZES:
        raise ConfigError(f"field 'window' must be one of {WINDOW_SIZES}, got {cfg['window']}")
    if cfg["stride"] < 1:
        raise ConfigError("field 'stride' must be >= 1")
    if not 0 <= cfg["prune_fraction"] < 1:
        raise ConfigError("field 'prune_fraction' must lie in [0, 1)")
    if cfg["eval"]["split"] not in ("heldout", "target"):
        raise ConfigError("field 'eval.split' must be 'heldout' or 'target'")
    for name in ("adapt.eval_fraction", "grid.train_fraction", "fed.probe_fraction"):
        if not 0 < _get(cfg, name) < 1:
            raise ConfigError(f"field '{name}' must lie strictly between 0 and 1")
    for name in PATH_FIELDS:
        value = _get(cfg, name)
        if value is not None:
            if not isinstance(value, str):
                raise ConfigError(f"field '{name}' must be a path string")
            _set(cfg, name, str((base_dir or Path.cwd()) / value) if not Path(value).is_absolute() else value)
    clients = cfg["data"]["clients"]
    if clients is not None:
        if not isinstance(clients, dict) or not clients:
            raise ConfigError("field 'data.clients' must map client ids to household manifests")
        cfg["data"]["clients"] = {
            str(k): str((base_dir or Path.cwd()) / v) if not Path(v).is_absolute() else v
            for k, v in sorted(clients.items())
        }
    if cfg["synth"]["spec"] is not None:
        try:
            SynthSpec.from_dict(cfg["synth"]["spec"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"field 'synth.spec': {exc}") from None
    # build every typed section once so invalid values fail before any work starts
    _train_cfg(cfg, "train")
    _train_cfg(cfg, "retrain")
    _train_cfg(cfg, "adapt")
    _train_cfg(cfg, "grid")
    _coral_cfg(cfg)
    _fed_cfg(cfg)
    return cfg


def _train_cfg(cfg: dict, section: str) -> TrainConfig:
    sec = cfg[section]
    try:
        return TrainConfig(
            epochs=sec["epochs"],
            batch_size=sec["batch_size"],
            learning_rate=sec["learning_rate"],
            seed=derive_seed(cfg["seed"], section),
            task_weights=sec.get("task_weights"),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field '{section}': {exc}") from None


def _coral_cfg(cfg: dict) -> CoralConfig:
    c = cfg["coral"]
    try:
        return CoralConfig(layer=c["layer"], lam=c["lam"], warmup=c["warmup"], target_batch_size=c["target_batch_size"],
                           source_cache=c["source_cache"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"field 'coral': {exc}") from None


def _fed_cfg(cfg: dict) -> FedConfig:
    f = cfg["fed"]
    if f["clients"] < 1:
        raise ConfigError("field 'fed.clients' must be >= 1")
    for name in ("power_scales", "time_scales"):
        v = f[name]
        if v is not None and (not isinstance(v, list) or len(v) != f["clients"]):
            raise ConfigError(f"field 'fed.{name}' must list one value per client")
    try:
        return FedConfig(
            rounds=f["rounds"],
            prune_fraction=cfg["prune_fraction"],
            policy=f["policy"],
            scope=f["scope"],
            workers=f["workers"],
            local=_train_cfg(cfg, "adapt"),
            coral=_coral_cfg(cfg),
        )
    except ValueError as exc:
        raise ConfigError(f"field 'fed': {exc}") from None


def load_config(path: str | None, seed: int | None) -> dict:
    if path is None:
        return resolve_config({}, seed)
    p = Path(path)
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return resolve_config(doc, seed, p.resolve().parent)


# ---------------------------------------------------------------------------
# shared plumbing


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _synth_spec(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    if s["spec"] is not None:
        return SynthSpec.from_dict(s["spec"])
    return default_synth_spec(s["length"])


def _synth_house(cfg: dict, role: str):
    spec = _synth_spec(cfg)
    if role == "target":
        spec = spec.shifted(cfg["synth"]["target_power_scale"], cfg["synth"]["target_time_scale"])
    return spec, synth_household(spec, derive_seed(cfg["seed"], "household", role))


def household(cfg: dict, role: str):
    """``(mains, appliances, names)`` from the configured manifest, or synthesized from the seed."""
    path = cfg["data"][role]
    if path is not None:
        return read_household(path)
    _, house = _synth_house(cfg, role)
    return house.mains, house.appliances, house.names


def save_model(out: Path, params, normalizer: Normalizer, names, name: str = "model") -> None:
    save_params(params, out / f"{name}.bin")
    meta = {"version": 1, "normalizer": normalizer.to_dict(), "names": list(names)}
    (out / f"{name}.json").write_text(_dump(meta))


def load_model(path: str):
    p = Path(path)
    meta_path = p.with_suffix(".json")
    if not meta_path.exists():
        raise ConfigError(f"model metadata {meta_path} not found next to {p}")
    meta = json.loads(meta_path.read_text())
    return load_params(p), Normalizer.from_dict(meta["normalizer"]), meta["names"]


def _require_model(cfg: dict):
    if cfg["model"] is None:
        raise ConfigError("field 'model' is required for this command")
    params, norm, names = load_model(cfg["model"])
    if params.arch.window_size != cfg["window"]:
        raise ConfigError(f"field 'window' is {cfg['window']} but the model expects {params.arch.window_size}")
    return params, norm, names


def _split_point(n: int, fraction: float) -> int:
    return max(1, min(n - 1, int(round(n * fraction))))


def write_manifest(out: Path, command: str, cfg: dict) -> None:
    outputs = {}
    for f in sorted(out.rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            outputs[str(f.relative_to(out))] = hashlib.sha256(f.read_bytes()).hexdigest()
    doc = {
        "manifest_version": MANIFEST_VERSION,
        "package_version": __version__,
        "command": command,
        "seed": cfg["seed"],
        "config": cfg,
        "outputs": outputs,
    }
    (out / "manifest.json").write_text(_dump(doc))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict, out: Path) -> None:
    for role in ("cloud", "heldout", "target"):
        spec, house = _synth_house(cfg, role)
        write_household(house, out / role, spec, derive_seed(cfg["seed"], "household", role))
    print(f"wrote cloud, heldout and target households under {out}")


def _cloud_windows(cfg: dict, normalizer: Normalizer | None = None):
    mains, apps, names = household(cfg, "cloud")
    return make_windows(mains, apps, cfg["window"], normalizer), names


def _heldout_windows(cfg: dict, normalizer: Normalizer):
    mains, apps, _ = household(cfg, "heldout")
    return make_windows(mains, apps, cfg["window"], normalizer)


def cmd_train_cloud(cfg: dict, out: Path) -> None:
    batch, names = _cloud_windows(cfg)
    tcfg = _train_cfg(cfg, "train")
    params = build_seq2point(cfg["window"], batch.n_tasks, seed=derive_seed(cfg["seed"], "init"))
    params, history = train(params, batch.subset(slice(None, None, cfg["stride"])), tcfg)
    rep = evaluate_model(params, _heldout_windows(cfg, batch.normalizer), names)
    save_model(out, params, batch.normalizer, names)
    report = {
        "version": 1,
        "loss": history,
        "param_count": param_count(params),
        "op_count": op_count(params.arch),
        "heldout": rep.to_dict(),
    }
    (out / "train_report.json").write_text(_dump(report))
    print(rep.to_table())


def cmd_compress(cfg: dict, out: Path) -> None:
    if cfg["model"] is not None:
        initial, norm, names = _require_model(cfg)
        batch, _ = _cloud_windows(cfg, norm)
        train_cfg = None
    else:
        batch, names = _cloud_windows(cfg)
        norm = batch.normalizer
        initial = build_seq2point(cfg["window"], batch.n_tasks, seed=derive_seed(cfg["seed"], "init"))
        train_cfg = _train_cfg(cfg, "train")
    params, report = compress_pipeline(
        batch.subset(slice(None, None, cfg["stride"])),
        cfg["prune_fraction"],
        _train_cfg(cfg, "retrain"),
        train_cfg=train_cfg,
        initial=initial,
        eval_data=_heldout_windows(cfg, norm),
    )
    save_model(out, params, norm, names)
    (out / "prune_report.json").write_text(report.to_json() + "\n")
    print(f"filters {report.filters_before} -> {report.filters_after}; "
          f"params {report.param_count_before} -> {report.param_count_after}")


def _target_split(cfg: dict, norm: Normalizer, first_fraction: float):
    """Target windows split in time; the normalizer is rebased on the target's own mains."""
    mains, apps, _ = household(cfg, "target")
    batch = make_windows(mains, apps, cfg["window"], norm.for_mains(mains))
    cut = _split_point(len(batch), first_fraction)
    return batch.subset(slice(0, cut)), batch.subset(slice(cut, None))


def cmd_adapt(cfg: dict, out: Path) -> None:
    params, norm, names = _require_model(cfg)
    cloud, _ = _cloud_windows(cfg, norm)
    source = source_sample(cloud, cfg["coral"]["source_cache"], derive_seed(cfg["seed"], "source"))
    local, held = _target_split(cfg, norm, 1.0 - cfg["adapt"]["eval_fraction"])
    before = evaluate_model(params, held, names)
    adapted, hist = personalize_with_history(params, source, local.unlabeled(), _coral_cfg(cfg),
                                             _train_cfg(cfg, "adapt"))
    after = evaluate_model(adapted, held, names)
    save_model(out, adapted, held.normalizer, names)
    report = {
        "version": 1,
        "before": before.to_dict(),
        "after": after.to_dict(),
        "mae_reduction": 1.0 - after.mean_mae / before.mean_mae if before.mean_mae > 0 else 0.0,
        "history": {"regression": hist.regression, "coral": hist.coral, "edge": hist.edge},
    }
    (out / "adapt_report.json").write_text(_dump(report))
    print(f"target MAE {before.mean_mae:.3f} -> {after.mean_mae:.3f} W")


def cmd_grid(cfg: dict, out: Path) -> None:
    params, norm, _ = _require_model(cfg)
    tr, te = _target_split(cfg, norm, cfg["grid"]["train_fraction"])
    result = transfer_grid(params, tr.subset(slice(None, None, cfg["stride"])), te, _train_cfg(cfg, "grid"),
                           seed=derive_seed(cfg["seed"], "grid"))
    (out / "grid.csv").write_text(result.to_csv())
    (out / "grid.json").write_text(result.to_json() + "\n")
    print(result.to_csv(), end="")


def _fed_clients(cfg: dict, normalizer: Normalizer):
    f = cfg["fed"]
    if cfg["data"]["clients"] is None:
        spec = _synth_spec(cfg)
        spec = SynthSpec.from_dict({**spec.to_dict(), "length": f["client_length"]})
        synth = synthetic_clients(spec, f["clients"], derive_seed(cfg["seed"], "clients"), f["power_scales"],
                                  f["time_scales"], f["probe_fraction"])
        clients = [c.state for c in synth]
        meta = [{"source": "synthetic", "power_scale": c.power_scale, "time_scale": c.time_scale} for c in synth]
        return clients, probe_batch(synth, cfg["window"], normalizer), meta
    clients, probes, meta = [], [], []
    for cid, path in cfg["data"]["clients"].items():
        mains, apps, _ = read_household(path)
        cut = _split_point(len(mains), 1.0 - f["probe_fraction"])
        state = ClientState(cid, mains.slice(0, cut), [a.slice(0, cut) for a in apps])
        clients.append(state)
        probes.append(make_windows(mains.slice(cut), [a.slice(cut) for a in apps], cfg["window"],
                                   state.local_normalizer(normalizer)))
        meta.append({"source": path})
    return clients, probes, meta


def cmd_fed(cfg: dict, out: Path) -> None:
    fcfg = _fed_cfg(cfg)
    batch, names = _cloud_windows(cfg)
    server = bootstrap(
        batch.subset(slice(None, None, cfg["stride"])),
        cfg["prune_fraction"],
        _train_cfg(cfg, "train"),
        _train_cfg(cfg, "retrain"),
        source_cache_size=cfg["coral"]["source_cache"],
        seed=derive_seed(cfg["seed"], "source"),
        policy=fcfg.policy,
        scope=fcfg.scope,
        eval_data=_heldout_windows(cfg, batch.normalizer),
    )
    clients, probe, meta = _fed_clients(cfg, batch.normalizer)
    for c, m in zip(clients, meta):
        server.register(c.client_id, m)
    boot = {"version": 1, "prune_report": server.bootstrap_report, "probe": probe_metrics(server.global_params, probe),
            "clients": server.clients}
    (out / "bootstrap_report.json").write_text(_dump(boot))
    save_model(out, server.global_params, batch.normalizer, names, "global_round0")
    log = out / "rounds.jsonl"
    log.write_text("")
    print(f"round 0 probe MAE {boot['probe']['mean_mae']:.3f} W")
    for _ in range(fcfg.rounds):
        server, report = run_round(server, clients, fcfg, probe)
        save_params(server.global_params, out / f"global_round{server.round}.bin")
        with log.open("a") as fh:
            fh.write(report.to_json() + "\n")
        print(f"round {server.round} probe MAE {report.probe['mean_mae']:.3f} W, failed {len(report.failed)}")
    save_model(out, server.global_params, batch.normalizer, names)


def cmd_eval(cfg: dict, out: Path) -> None:
    params, norm, names = _require_model(cfg)
    if cfg["eval"]["split"] == "heldout":
        batch = _heldout_windows(cfg, norm)
    else:
        mains, apps, _ = household(cfg, "target")
        batch = make_windows(mains, apps, cfg["window"], norm.for_mains(mains))
    rep = evaluate_model(params, batch, names)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    print(rep.to_table())


HANDLERS = {
    "synth": cmd_synth,
    "train-cloud": cmd_train_cloud,
    "compress": cmd_compress,
    "adapt": cmd_adapt,
    "grid": cmd_grid,
    "fed": cmd_fed,
    "eval": cmd_eval,
}


HELP = {
    "synth": "write seeded cloud, held-out and target households",
    "train-cloud": "train the multi-task cloud model",
    "compress": "prune filters and retrain",
    "adapt": "personalize a model on one target household",
    "grid": "layer-transfer grid, fixed vs fine-tuned",
    "fed": "bootstrap plus federated rounds",
    "eval": "score a model on held-out or target data",
}


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON run config, or a manifest.json from an earlier run",
                        **(default or {"default": None}))
    parser.add_argument("--seed", type=int, help="run seed (u64); overrides the config",
                        **(default or {"default": None}))
    parser.add_argument("--out", help="output directory (default: ./out)", **(default or {"default": "out"}))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nilmfed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nilmfed {__version__}")
    _add_common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_common(sub.add_parser(name, help=HELP[name]), suppress=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"nilmfed: config error: {exc}", file=sys.stderr)
        return 2
    write_manifest(out, args.command, cfg)
    return 0


if __name__ == "__main__":
    sys.exit(main())
