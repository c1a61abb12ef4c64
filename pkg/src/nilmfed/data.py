"""Power series ingest, preprocessing, windowing and synthetic households."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._rng import substream

DEFAULT_PERIOD = 60.0
DEFAULT_MAX_GAP = 3
NORM_EPS = 1e-6
# synthetic components live on a 1/1024 W grid so their float64 sums are exact
SYNTH_QUANTUM = 1.0 / 1024
MANIFEST_VERSION = 1


@dataclass
class PowerSeries:
    start_time: float
    period: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.values.ndim != 1:
            raise ValueError("values must be one-dimensional")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_time + self.period * np.arange(len(self.values))

    def slice(self, start: int, stop: int | None = None) -> PowerSeries:
        stop = len(self) if stop is None else stop
        return PowerSeries(self.start_time + start * self.period, self.period, self.values[start:stop])


# ---------------------------------------------------------------------------
# CSV ingest


def _read_rows(path) -> tuple[np.ndarray, np.ndarray]:
    times, watts = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["timestamp", "watts"]:
            raise ValueError(f"{path}: expected header 'timestamp,watts', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                t, w = (float(cell) for cell in row)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: unparseable row {row!r}") from None
            if not (np.isfinite(t) and np.isfinite(w)):
                raise ValueError(f"{path}:{lineno}: non-finite value in row {row!r}")
            times.append(t)
            watts.append(w)
    return np.asarray(times), np.asarray(watts)


def load_series(path, period: float | None = None, max_gap: int = DEFAULT_MAX_GAP) -> list[PowerSeries]:
    """Read a ``timestamp,watts`` CSV into uniformly sampled segments.

    Runs of up to ``max_gap`` missing samples are forward-filled; a longer gap
    starts a new segment. Negative readings are clipped to zero. ``period``
    defaults to the smallest spacing in the file.
    """
    times, watts = _read_rows(path)
    if len(times) == 0:
        raise ValueError(f"{path}: no readings")
    steps = np.diff(times)
    if np.any(steps <= 0):
        bad = int(np.argmax(steps <= 0)) + 2
        raise ValueError(f"{path}: timestamps not strictly increasing near data row {bad}")
    if period is None:
        period = float(steps.min()) if len(steps) else DEFAULT_PERIOD
    watts = np.clip(watts, 0.0, None)
    return _split_segments(times, watts, period, max_gap)


def _split_segments(times, watts, period, max_gap) -> list[PowerSeries]:
    segments = []
    start = float(times[0])
    values = [watts[0]]
    for prev_t, t, w in zip(times[:-1], times[1:], watts[1:]):
        missing = int(round((t - prev_t) / period)) - 1
        if missing > max_gap:
            segments.append(PowerSeries(start, period, np.asarray(values)))
            start = float(t)
            values = [w]
            continue
        values.extend([values[-1]] * max(missing, 0))
        values.append(w)
    segments.append(PowerSeries(start, period, np.asarray(values)))
    return segments


def save_series(series: PowerSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "watts"])
        for t, w in zip(series.timestamps, series.values):
            writer.writerow([repr(float(t)), repr(float(w))])


# ---------------------------------------------------------------------------
# preprocessing


def resample(series: PowerSeries, target_period: float = DEFAULT_PERIOD) -> PowerSeries:
    """Mean-aggregate into ``target_period`` bins anchored at the series start."""
    if target_period < series.period:
        raise ValueError("resample only aggregates; target_period must be >= the source period")
    offsets = np.arange(len(series)) * series.period
    bins = np.floor(offsets / target_period + 1e-9).astype(np.int64)
    n_bins = int(bins[-1]) + 1 if len(bins) else 0
    sums = np.bincount(bins, weights=series.values, minlength=n_bins)
    counts = np.bincount(bins, minlength=n_bins)
    values = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    # empty bins can only appear when target_period is not a multiple; carry forward
    for i in np.flatnonzero(counts == 0):
        values[i] = values[i - 1] if i > 0 else 0.0
    return PowerSeries(series.start_time, float(target_period), values)


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    @classmethod
    def of(cls, values) -> NormStats:
        values = np.asarray(values, dtype=np.float64)
        return cls(float(values.mean()), float(values.std()))

    @property
    def scale(self) -> float:
        return max(self.std, NORM_EPS)


def normalize(series, stats: NormStats | None = None):
    """Standardize values; returns ``(normalized, stats)``.

    Accepts a :class:`PowerSeries` (returns one) or an array.
    """
    values = series.values if isinstance(series, PowerSeries) else np.asarray(series, dtype=np.float64)
    stats = NormStats.of(values) if stats is None else stats
    out = (values - stats.mean) / stats.scale
    if isinstance(series, PowerSeries):
        out = replace(series, values=out)
    return out, stats


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * stats.scale + stats.mean


@dataclass(frozen=True)
class Normalizer:
    """Mains and per-task target statistics shipped together with a model."""

    mains: NormStats
    targets: tuple[NormStats, ...]

    @classmethod
    def fit(cls, mains: PowerSeries, appliances) -> Normalizer:
        return cls(NormStats.of(mains.values), tuple(NormStats.of(a.values) for a in appliances))

    def rebased(self, mains: NormStats) -> Normalizer:
        """Normalizer for a household whose mains follow ``mains`` instead.

        Target statistics scale with the ratio of mains spreads, so a model
        trained on the original household sees inputs and emits outputs on
        the same relative scale. Needs no appliance labels.
        """
        r = mains.std / self.mains.std
        return Normalizer(mains, tuple(NormStats(s.mean * r, s.std * r) for s in self.targets))

    def for_mains(self, mains: PowerSeries) -> Normalizer:
        return self.rebased(NormStats.of(mains.values))

    def targets_to_watts(self, pred: np.ndarray) -> np.ndarray:
        pred = np.asarray(pred, dtype=np.float64)
        return np.stack([denormalize(pred[:, j], s) for j, s in enumerate(self.targets)], axis=1)

    def to_dict(self) -> dict:
        return {"mains": asdict(self.mains), "targets": [asdict(s) for s in self.targets]}

    @classmethod
    def from_dict(cls, d: dict) -> Normalizer:
        return cls(NormStats(**d["mains"]), tuple(NormStats(**s) for s in d["targets"]))


# ---------------------------------------------------------------------------
# windowing


@dataclass
class MainsWindows:
    """Unlabeled normalized mains windows (what an edge client can see)."""

    windows: np.ndarray
    mains_stats: NormStats

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_size(self) -> int:
        return self.windows.shape[1]


@dataclass
class WindowBatch:
    """Normalized mains windows with normalized midpoint targets ``(B, n_tasks)``."""

    windows: np.ndarray
    targets: np.ndarray
    normalizer: Normalizer

    def __post_init__(self):
        if self.targets.ndim != 2 or len(self.targets) != len(self.windows):
            raise ValueError("one target row per window required")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_size(self) -> int:
        return self.windows.shape[1]

    @property
    def n_tasks(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> WindowBatch:
        return WindowBatch(self.windows[idx], self.targets[idx], self.normalizer)

    def unlabeled(self) -> MainsWindows:
        return MainsWindows(self.windows, self.normalizer.mains)

    def targets_watts(self) -> np.ndarray:
        return self.normalizer.targets_to_watts(self.targets)


def midpoint_offset(window_size: int) -> int:
    return window_size // 2


def _check_aligned(mains: PowerSeries, others) -> None:
    for i, s in enumerate(others):
        if len(s) != len(mains) or s.period != mains.period or s.start_time != mains.start_time:
            raise ValueError(f"appliance series {i} is not aligned with the mains series")


def window_mains(mains: PowerSeries, window_size: int, stats: NormStats | None = None) -> MainsWindows:
    if len(mains) < window_size:
        raise ValueError(f"series length {len(mains)} shorter than window {window_size}")
    norm, stats = normalize(mains.values, stats)
    return MainsWindows(np.ascontiguousarray(sliding_window_view(norm, window_size)), stats)


def make_windows(
    mains: PowerSeries, appliances, window_size: int, normalizer: Normalizer | None = None
) -> WindowBatch:
    """All ``T - w + 1`` windows; the target of window ``t`` is appliance value ``t + w // 2``."""
    appliances = list(appliances)
    _check_aligned(mains, appliances)
    if normalizer is None:
        normalizer = Normalizer.fit(mains, appliances)
    if len(normalizer.targets) != len(appliances):
        raise ValueError("normalizer has a different number of targets than appliances")
    unl = window_mains(mains, window_size, normalizer.mains)
    off = midpoint_offset(window_size)
    n = len(unl)
    targets = np.stack(
        [normalize(a.values[off : off + n], s)[0] for a, s in zip(appliances, normalizer.targets)],
        axis=1,
    ) if appliances else np.empty((n, 0))
    return WindowBatch(unl.windows, targets, normalizer)


def midpoint_truth(appliances, window_size: int) -> np.ndarray:
    """Appliance watts at each window midpoint, shape ``(T - w + 1, n_tasks)``."""
    off = midpoint_offset(window_size)
    n = len(appliances[0]) - window_size + 1
    return np.stack([a.values[off : off + n] for a in appliances], axis=1)


# ---------------------------------------------------------------------------
# synthetic households


@dataclass
class AppliancePattern:
    name: str
    period: float  # samples between cycle starts
    duty_cycle: float
    power: float  # watts when ON
    jitter: float = 0.2  # phase jitter as a fraction of the period

    def __post_init__(self):
        if self.period <= 0 or not 0 < self.duty_cycle <= 1:
            raise ValueError(f"{self.name}: need period > 0 and 0 < duty_cycle <= 1")
        if self.power < 0 or self.jitter < 0:
            raise ValueError(f"{self.name}: magnitudes must be >= 0")


@dataclass
class SynthSpec:
    appliances: list[AppliancePattern]
    length: int = 10_000
    residual: float = 50.0
    noise_std: float = 2.0
    sample_period: float = DEFAULT_PERIOD
    start_time: float = 0.0

    def __post_init__(self):
        self.appliances = [
            a if isinstance(a, AppliancePattern) else AppliancePattern(**a) for a in self.appliances
        ]
        if not self.appliances:
            raise ValueError("at least one appliance required")
        if self.residual < 0 or self.noise_std < 0:
            raise ValueError("residual and noise_std must be >= 0")
        if self.length < 1:
            raise ValueError("length must be >= 1")

    def shifted(self, power_scale: float = 1.0, time_scale: float = 1.0) -> SynthSpec:
        """Same appliances with power levels scaled and cycles dilated in time."""
        apps = [
            replace(a, power=a.power * power_scale, period=a.period * time_scale)
            for a in self.appliances
        ]
        return replace(self, appliances=apps, residual=self.residual * power_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = MANIFEST_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        d = dict(d)
        version = d.pop("version", MANIFEST_VERSION)
        if version != MANIFEST_VERSION:
            raise ValueError(f"unsupported synthetic spec version {version}")
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown synthetic spec field(s): {sorted(unknown)}")
        return cls(**d)


def default_synth_spec(length: int = 10_000) -> SynthSpec:
    """Two-appliance household: a fridge-like cycler and a longer kettle/washer load."""
    return SynthSpec(
        appliances=[
            AppliancePattern("fridge", period=90, duty_cycle=0.4, power=120.0, jitter=0.15),
            AppliancePattern("washer", period=400, duty_cycle=0.15, power=600.0, jitter=0.3),
        ],
        length=length,
        residual=60.0,
        noise_std=3.0,
    )


def _quantize(x):
    return np.round(np.asarray(x, dtype=np.float64) / SYNTH_QUANTUM) * SYNTH_QUANTUM


def square_wave(pattern: AppliancePattern, length: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros(length)
    on_len = max(1, int(round(pattern.duty_cycle * pattern.period)))
    t = rng.uniform(0.0, pattern.period)
    while t < length:
        start = int(round(t + rng.uniform(-pattern.jitter, pattern.jitter) * pattern.period))
        lo, hi = max(start, 0), min(start + on_len, length)
        if hi > lo:
            out[lo:hi] = _quantize(pattern.power)
        t += pattern.period
    return out


@dataclass
class SyntheticHousehold:
    mains: PowerSeries
    appliances: list[PowerSeries]
    residual: PowerSeries
    names: list[str] = field(default_factory=list)


def synth_household(spec: SynthSpec, seed: int) -> SyntheticHousehold:
    """Mains as the sum of appliance square waves, an unmetered residual and Gaussian noise."""
    T = spec.length
    apps = [square_wave(a, T, substream(seed, "appliance", i)) for i, a in enumerate(spec.appliances)]
    rng_u = substream(seed, "residual")
    phase = rng_u.uniform(0, 2 * np.pi)
    day = 86_400.0 / spec.sample_period
    u = _quantize(spec.residual * (0.75 + 0.25 * np.sin(2 * np.pi * np.arange(T) / day + phase)))
    noise = substream(seed, "noise").normal(0.0, spec.noise_std, size=T) if spec.noise_std > 0 else np.zeros(T)
    mains = np.sum(apps, axis=0) + u + noise

    def mk(v):
        return PowerSeries(spec.start_time, spec.sample_period, v)

    return SyntheticHousehold(mk(mains), [mk(a) for a in apps], mk(u), [a.name for a in spec.appliances])


# ---------------------------------------------------------------------------
# manifests


def write_household(house: SyntheticHousehold, out_dir, spec: SynthSpec | None = None, seed=None) -> Path:
    """Write CSVs plus a JSON manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_series(house.mains, out / "mains.csv")
    save_series(house.residual, out / "residual.csv")
    entries = []
    for name, s in zip(house.names, house.appliances):
        save_series(s, out / f"{name}.csv")
        entries.append({"name": name, "path": f"{name}.csv"})
    manifest = {
        "version": MANIFEST_VERSION,
        "mains": "mains.csv",
        "appliances": entries,
        "residual": "residual.csv",
    }
    if spec is not None:
        manifest["synth_spec"] = spec.to_dict()
        manifest["seed"] = seed
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_household(manifest_path) -> tuple[PowerSeries, list[PowerSeries], list[str]]:
    """Load mains and appliance series listed in a household manifest (first segment each)."""
    manifest_path = Path(manifest_path)
    m = json.loads(manifest_path.read_text())
    if m.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{manifest_path}: unsupported manifest version {m.get('version')}")
    base = manifest_path.parent
    mains = load_series(base / m["mains"])[0]
    names = [e["name"] for e in m["appliances"]]
    apps = [load_series(base / e["path"], period=mains.period)[0] for e in m["appliances"]]
    n = min([len(mains)] + [len(a) for a in apps])
    return mains.slice(0, n), [a.slice(0, n) for a in apps], names
