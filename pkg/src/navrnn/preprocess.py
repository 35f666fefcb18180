"""Preprocessing: raw flight logs to training-ready windowed datasets.

Sensor streams are averaged between consecutive estimator outputs to unify
all rates to the 5 Hz label rate; barometric altitude is differenced and
temperature passed through; labels are per-step increments of the estimator
state. Ground time is trimmed with a velocity-hysteresis detector, corrupt
logs are rejected, and fixed-length windows with z-scored features feed the
network. Raw measurements are never filtered.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, EmptyBinError, NoTakeoffError
from .flightlog import EkfState, FlightLog, validate_log
from .synth import DatasetManifest, LogEntry

FEATURE_NAMES = ("gx", "gy", "gz", "ax", "ay", "az", "temp_c", "dalt_m", "mx", "my", "mz")
LABEL_NAMES = ("dpn", "dpe", "dpd", "dvn", "dve", "dvd")
N_FEATURES = len(FEATURE_NAMES)
N_LABELS = len(LABEL_NAMES)

WINDOWS_MAGIC = b"NAVW"
WINDOWS_VERSION = 1


@dataclass
class UnifiedSeries:
    """5 Hz aligned feature/label table for one flight.

    Row k holds the sensor averages over the k-th inter-estimator interval
    and is stamped with the interval's end time; label k is the estimator
    state increment over the interval that follows row k. A series with n
    rows therefore carries n-1 labels.
    """

    t_us: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    init_state: EkfState
    state_pos: np.ndarray
    state_vel: np.ndarray
    baro_carried: int = 0
    mag_carried: int = 0
    log_id: str = ""

    def __len__(self) -> int:
        return len(self.t_us)


def unify_rates(log: FlightLog) -> UnifiedSeries:
    """Average every sensor stream between consecutive estimator outputs.

    Each interval (t_{k}, t_{k+1}] between estimator samples becomes one
    feature row. An interval with no inertial samples is a hard error;
    empty barometer/magnetometer intervals reuse the previous interval's
    mean and are counted in the carried-bin fields.
    """
    t_edges = log.ekf.t_us
    n = len(t_edges) - 1
    if n < 1:
        raise DataError("need at least two estimator samples")

    def bin_means(t_us, values, name, allow_empty):
        idx = np.searchsorted(t_edges, t_us, side="left") - 1
        valid = (idx >= 0) & (idx < n)
        idx = idx[valid]
        vals = np.atleast_2d(values[valid].T).T
        counts = np.bincount(idx, minlength=n)
        means = np.empty((n, vals.shape[1]))
        for c in range(vals.shape[1]):
            sums = np.bincount(idx, weights=vals[:, c], minlength=n)
            with np.errstate(invalid="ignore"):
                means[:, c] = sums / counts
        carried = 0
        empty = counts == 0
        if np.any(empty):
            if not allow_empty:
                raise EmptyBinError(f"{name}: {int(empty.sum())} estimator interval(s) without samples")
            carried = int(empty.sum())
            # seed the first interval from the nearest sample at or before it
            if empty[0]:
                before = t_us <= t_edges[0]
                seed = values[before][-1] if np.any(before) else values[0]
                means[0] = np.atleast_1d(seed)
            for k in range(1, n):
                if empty[k]:
                    means[k] = means[k - 1]
        return means, carried

    imu_means, _ = bin_means(
        log.imu.t_us, np.hstack([log.imu.gyro, log.imu.accel]), "imu", allow_empty=False
    )
    baro_means, baro_carried = bin_means(
        log.baro.t_us, np.column_stack([log.baro.temp_c, log.baro.alt_m]), "baro", allow_empty=True
    )
    mag_means, mag_carried = bin_means(log.mag.t_us, log.mag.mag, "mag", allow_empty=True)

    dalt = np.zeros(n)
    dalt[1:] = np.diff(baro_means[:, 1])
    features = np.column_stack([imu_means, baro_means[:, 0], dalt, mag_means])

    state_pos = log.ekf.pos_ned[1:]
    state_vel = log.ekf.vel_ned[1:]
    labels = np.hstack([np.diff(state_pos, axis=0), np.diff(state_vel, axis=0)])
    init = EkfState(
        t_us=int(t_edges[1]),
        quat=log.ekf.quat[1].copy(),
        vel_ned=log.ekf.vel_ned[1].copy(),
        pos_ned=log.ekf.pos_ned[1].copy(),
    )
    return UnifiedSeries(
        t_us=t_edges[1:].copy(),
        features=features,
        labels=labels,
        init_state=init,
        state_pos=state_pos,
        state_vel=state_vel,
        baro_carried=baro_carried,
        mag_carried=mag_carried,
        log_id=log.log_id,
    )


def bin_mean(values: np.ndarray) -> np.ndarray:
    """Column means of one bin, with unify_rates' exact accumulation order.

    bincount sums sequentially in sample order while np.sum uses pairwise
    blocks, so streaming code must use this helper to stay bit-compatible
    with the batch pipeline.
    """
    values = np.asarray(values, dtype=np.float64)
    idx = np.zeros(len(values), dtype=np.intp)
    out = np.empty(values.shape[1])
    for c in range(values.shape[1]):
        out[c] = np.bincount(idx, weights=values[:, c], minlength=1)[0]
    return out / len(values)


def difference(series: np.ndarray) -> np.ndarray:
    """out[i] = series[i+1] - series[i]; length shrinks by one."""
    series = np.asarray(series)
    if len(series) < 2:
        raise DataError("difference needs at least two points")
    return np.diff(series, axis=0)


def trim_ground_time(log: FlightLog, vel_thresh_mps: float = 0.5, hold_s: float = 1.0) -> FlightLog:
    """Crop a log to [takeoff, landing].

    Takeoff is the first estimator sample whose velocity norm stays above
    vel_thresh_mps for hold_s; landing is the end of the last such stretch.
    Raises NoTakeoffError when no sustained motion exists.
    """
    if len(log.ekf) == 0:
        raise DataError("ekf stream is empty")
    speed = np.linalg.norm(log.ekf.vel_ned, axis=1)
    moving = speed > vel_thresh_mps
    dt_med = float(np.median(np.diff(log.ekf.t_us))) * 1e-6 if len(log.ekf) > 1 else 0.2
    hold_n = max(1, int(round(hold_s / max(dt_med, 1e-6))))

    sustained_starts = []
    sustained_ends = []
    i = 0
    n = len(moving)
    while i < n:
        if moving[i]:
            j = i
            while j < n and moving[j]:
                j += 1
            if j - i >= hold_n:
                sustained_starts.append(i)
                sustained_ends.append(j - 1)
            i = j
        else:
            i += 1
    if not sustained_starts:
        raise NoTakeoffError(f"{log.log_id}: no sustained motion above {vel_thresh_mps} m/s")
    t_takeoff = int(log.ekf.t_us[sustained_starts[0]])
    t_landing = int(log.ekf.t_us[sustained_ends[-1]])
    return log.crop(t_takeoff, t_landing)


@dataclass
class CleanupVerdict:
    log_id: str
    accepted: bool
    reasons: list[str] = field(default_factory=list)
    post_trim_duration_s: float | None = None
    trimmed: FlightLog | None = None

    def to_dict(self) -> dict:
        return {
            "log_id": self.log_id,
            "accepted": self.accepted,
            "reasons": list(self.reasons),
            "post_trim_duration_s": self.post_trim_duration_s,
        }


def detect_corrupted(
    log: FlightLog,
    max_gap_s: float = 1.0,
    min_duration_s: float = 60.0,
    vel_thresh_mps: float = 0.5,
    hold_s: float = 1.0,
) -> CleanupVerdict:
    """Decide whether a log is usable; never raises.

    Rejection reasons: validation defects (gaps, NaNs, bad quaternions),
    no takeoff, or a post-trim duration below min_duration_s. The trimmed
    log is attached when the verdict is positive.
    """
    verdict = CleanupVerdict(log_id=log.log_id, accepted=False)
    report = validate_log(log, max_gap_s=max_gap_s)
    if not report.ok:
        verdict.reasons.append("validation_defects")
        return verdict
    try:
        trimmed = trim_ground_time(log, vel_thresh_mps=vel_thresh_mps, hold_s=hold_s)
    except NoTakeoffError:
        verdict.reasons.append("no_takeoff")
        return verdict
    verdict.post_trim_duration_s = trimmed.duration_s
    if trimmed.duration_s < min_duration_s:
        verdict.reasons.append("too_short")
        return verdict
    verdict.accepted = True
    verdict.trimmed = trimmed
    return verdict


def compute_signal_weights(all_labels: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Loss weight per label signal: reciprocal of its mean absolute value."""
    all_labels = np.asarray(all_labels, dtype=float)
    if all_labels.ndim != 2 or len(all_labels) == 0:
        raise DataError("labels must be a non-empty 2-D array")
    return 1.0 / np.maximum(np.mean(np.abs(all_labels), axis=0), eps)


@dataclass
class Normalization:
    """Per-feature z-score statistics, frozen from the training corpus.

    Stored and applied in float32 so every consumer (batch pipeline, file
    round trip, streaming inference) performs identical arithmetic.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float32).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float32).reshape(-1)
        if np.any(self.std <= 0):
            raise ConfigError("normalization std must be positive")

    @classmethod
    def fit(cls, features: np.ndarray) -> "Normalization":
        mean = np.mean(features, axis=0)
        std = np.maximum(np.std(features, axis=0), 1e-6)
        return cls(mean=mean, std=std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        rows = np.asarray(features, dtype=np.float32)
        return (rows - self.mean) / self.std


def fit_normalization(series_list: list[UnifiedSeries]) -> Normalization:
    return Normalization.fit(np.vstack([s.features for s in series_list]))


@dataclass
class WindowedDataset:
    """Fixed-length feature windows with the increment label at each window end."""

    windows: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    window_size: int
    stride: int
    normalization: Normalization
    source_logs: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.windows = np.asarray(self.windows, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.float32)
        self.weights = np.asarray(self.weights, dtype=np.float32).reshape(-1)
        if np.any(self.weights <= 0):
            raise ConfigError("signal weights must be positive")

    def __len__(self) -> int:
        return len(self.windows)


def window_count(n_labels: int, window: int, stride: int) -> int:
    return (n_labels - window) // stride + 1


def make_windows(
    series: UnifiedSeries,
    window: int = 200,
    stride: int = 1,
    normalization: Normalization | None = None,
    weights: np.ndarray | None = None,
) -> WindowedDataset:
    """Slice one unified series into overlapping windows.

    Window j covers feature rows [j*stride, j*stride + window); its label is
    the increment at the window's final step. Normalization defaults to
    statistics of this series alone; pass the training-corpus statistics for
    anything that will be evaluated.
    """
    if window < 1 or stride < 1:
        raise ConfigError("window and stride must be >= 1")
    n_labels = len(series.labels)
    if n_labels < window:
        raise DataError(f"series too short: {n_labels} labels < window {window}")
    norm = normalization or Normalization.fit(series.features)
    rows = norm.apply(series.features)
    m = window_count(n_labels, window, stride)
    windows = np.empty((m, window, rows.shape[1]), dtype=np.float32)
    labels = np.empty((m, series.labels.shape[1]), dtype=np.float32)
    for j in range(m):
        start = j * stride
        windows[j] = rows[start : start + window]
        labels[j] = series.labels[start + window - 1]
    w = weights if weights is not None else compute_signal_weights(series.labels)
    return WindowedDataset(
        windows=windows,
        labels=labels,
        weights=w,
        window_size=window,
        stride=stride,
        normalization=norm,
        source_logs=[series.log_id],
    )


def build_dataset(
    series_list: list[UnifiedSeries],
    window: int = 200,
    stride: int = 1,
    normalization: Normalization | None = None,
    weights: np.ndarray | None = None,
) -> WindowedDataset:
    """Window a corpus of flights; windows never straddle flights.

    Normalization statistics and signal weights are computed from the given
    corpus when not provided, so compute them on the training corpus and
    pass them in for the validation corpus.
    """
    if not series_list:
        raise DataError("empty series list")
    norm = normalization or fit_normalization(series_list)
    w = weights if weights is not None else compute_signal_weights(np.vstack([s.labels for s in series_list]))
    parts = [make_windows(s, window=window, stride=stride, normalization=norm, weights=w) for s in series_list]
    return WindowedDataset(
        windows=np.concatenate([p.windows for p in parts], axis=0),
        labels=np.concatenate([p.labels for p in parts], axis=0),
        weights=w,
        window_size=window,
        stride=stride,
        normalization=norm,
        source_logs=[s.log_id for s in series_list],
    )


def split_dataset(
    manifest: DatasetManifest, val_fraction: float, seed: int
) -> tuple[list[LogEntry], list[LogEntry]]:
    """Whole-flight train/validation split, deterministic for a given seed."""
    if not (0.0 < val_fraction < 1.0):
        raise ConfigError("val_fraction must be in (0, 1)")
    entries = list(manifest.logs)
    if len(entries) < 2:
        raise DataError("need at least two logs to split")
    order = np.random.default_rng(seed).permutation(len(entries))
    n_val = int(round(len(entries) * val_fraction))
    n_val = min(max(n_val, 1), len(entries) - 1)
    val = [entries[i] for i in order[:n_val]]
    train = [entries[i] for i in order[n_val:]]
    return train, val


# ---------------------------------------------------------------------------
# windows container


def save_windows(dataset: WindowedDataset, path: str | Path, provenance: dict | None = None) -> None:
    """Write windows.bin (binary) and a windows.json provenance sidecar."""
    path = Path(path)
    m, w, f = dataset.windows.shape
    lab = dataset.labels.shape[1]
    with open(path, "wb") as fh:
        fh.write(WINDOWS_MAGIC)
        fh.write(struct.pack("<5I", WINDOWS_VERSION, m, w, f, lab))
        fh.write(np.ascontiguousarray(dataset.windows, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.weights, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.normalization.mean, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.normalization.std, dtype="<f4").tobytes())
    sidecar = {
        "source_logs": dataset.source_logs,
        "window": dataset.window_size,
        "stride": dataset.stride,
        "count": m,
    }
    if provenance:
        sidecar.update(provenance)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_windows(path: str | Path) -> WindowedDataset:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing windows file: {path}")
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WINDOWS_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}")
        header = fh.read(20)
        if len(header) != 20:
            raise DataError(f"{path}: truncated header")
        version, m, w, f, lab = struct.unpack("<5I", header)
        if version != WINDOWS_VERSION:
            raise DataError(f"{path}: unsupported version {version}")
        payload = fh.read()
    expected = 4 * (m * w * f + m * lab + lab + 2 * f)
    if len(payload) != expected:
        raise DataError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f4")
    o1 = m * w * f
    o2 = o1 + m * lab
    o3 = o2 + lab
    o4 = o3 + f
    sidecar_path = path.with_suffix(".json")
    meta = {}
    if sidecar_path.is_file():
        with open(sidecar_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    return WindowedDataset(
        windows=arr[:o1].reshape(m, w, f).copy(),
        labels=arr[o1:o2].reshape(m, lab).copy(),
        weights=arr[o2:o3].copy(),
        window_size=w,
        stride=int(meta.get("stride", 1)),
        normalization=Normalization(mean=arr[o3:o4].copy(), std=arr[o4:].copy()),
        source_logs=list(meta.get("source_logs", [])),
    )
