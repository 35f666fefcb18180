"""Flight-log data model and its on-disk container.

A flight log holds the four multi-rate streams a low-cost autopilot records:
inertial samples (gyro + accelerometer), barometer, magnetometer, and the
estimator's state output (quaternion attitude, NED velocity and position).
Timestamps are integer microseconds from log start. On disk a log is a
directory of four CSV files plus a JSON manifest; floats are written with
17 significant digits so the decimal round trip is bit exact.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError

SCHEMA_VERSION = 1

VEHICLE_TYPES = (
    "quadrotor",
    "fixed_wing",
    "vtol",
    "octorotor",
    "hexarotor",
    "ground_vehicle",
    "unknown",
)
SOURCES = ("recorded", "synthetic")

QUAT_NORM_TOL = 1e-3

_CSV_HEADERS = {
    "imu": "t_us,gx,gy,gz,ax,ay,az",
    "baro": "t_us,temp_c,alt_m",
    "mag": "t_us,mx,my,mz",
    "ekf": "t_us,q1,q2,q3,q4,vn,ve,vd,pn,pe,pd",
}


def _as_time(t) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(t), dtype=np.int64)


def _as_f64(a, cols: int | None = None) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a), dtype=np.float64)
    if cols is not None and (out.ndim != 2 or out.shape[1] != cols):
        raise ValidationError(f"expected array with {cols} columns, got shape {out.shape}")
    return out


@dataclass
class ImuStream:
    """Gyro (rad/s) and accelerometer (m/s^2, specific force) in body frame."""

    t_us: np.ndarray
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        self.t_us = _as_time(self.t_us)
        self.gyro = _as_f64(self.gyro, 3)
        self.accel = _as_f64(self.accel, 3)
        if not (len(self.t_us) == len(self.gyro) == len(self.accel)):
            raise ValidationError("imu stream arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.t_us)


@dataclass
class BaroStream:
    """Barometer temperature (degC) and pressure altitude (m)."""

    t_us: np.ndarray
    temp_c: np.ndarray
    alt_m: np.ndarray

    def __post_init__(self):
        self.t_us = _as_time(self.t_us)
        self.temp_c = _as_f64(self.temp_c)
        self.alt_m = _as_f64(self.alt_m)
        if not (len(self.t_us) == len(self.temp_c) == len(self.alt_m)):
            raise ValidationError("baro stream arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.t_us)


@dataclass
class MagStream:
    """Magnetic field components (gauss) in body frame."""

    t_us: np.ndarray
    mag: np.ndarray

    def __post_init__(self):
        self.t_us = _as_time(self.t_us)
        self.mag = _as_f64(self.mag, 3)
        if len(self.t_us) != len(self.mag):
            raise ValidationError("mag stream arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.t_us)


@dataclass
class EkfStream:
    """Estimator output: unit quaternion, NED velocity (m/s), NED position (m)."""

    t_us: np.ndarray
    quat: np.ndarray
    vel_ned: np.ndarray
    pos_ned: np.ndarray

    def __post_init__(self):
        self.t_us = _as_time(self.t_us)
        self.quat = _as_f64(self.quat, 4)
        self.vel_ned = _as_f64(self.vel_ned, 3)
        self.pos_ned = _as_f64(self.pos_ned, 3)
        if not (len(self.t_us) == len(self.quat) == len(self.vel_ned) == len(self.pos_ned)):
            raise ValidationError("ekf stream arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.t_us)


@dataclass
class EkfState:
    """A single estimator sample; used as an integration start point."""

    t_us: int
    quat: np.ndarray
    vel_ned: np.ndarray
    pos_ned: np.ndarray


@dataclass
class FlightLog:
    """One flight's raw sensor streams plus the estimator's state stream."""

    log_id: str
    vehicle_type: str
    source: str
    imu: ImuStream
    baro: BaroStream
    mag: MagStream
    ekf: EkfStream
    home_lat_deg: float | None = None

    def __post_init__(self):
        if self.vehicle_type not in VEHICLE_TYPES:
            raise ValidationError(f"unknown vehicle_type {self.vehicle_type!r}")
        if self.source not in SOURCES:
            raise ValidationError(f"unknown source {self.source!r}")

    @property
    def duration_s(self) -> float:
        """Span of the EKF stream in seconds (0 for an empty stream)."""
        if len(self.ekf) == 0:
            return 0.0
        return float(self.ekf.t_us[-1] - self.ekf.t_us[0]) * 1e-6

    def streams(self):
        return (("imu", self.imu), ("baro", self.baro), ("mag", self.mag), ("ekf", self.ekf))

    def check(self) -> None:
        """Raise ValidationError on any invariant violation.

        Checks: non-empty streams, strictly increasing timestamps, finite
        values, unit quaternion norms, and overlapping stream time ranges.
        """
        for name, stream in self.streams():
            if len(stream) == 0:
                raise ValidationError(f"{name} stream is empty")
            if len(stream) > 1 and not np.all(np.diff(stream.t_us) > 0):
                raise ValidationError(f"{name} timestamps are not strictly increasing")
            for arr in _value_arrays(stream):
                if not np.all(np.isfinite(arr)):
                    raise ValidationError(f"{name} stream contains non-finite values")
        norms = np.linalg.norm(self.ekf.quat, axis=1)
        if np.any(np.abs(norms - 1.0) > QUAT_NORM_TOL):
            raise ValidationError("ekf quaternions are not unit norm")
        starts = [s.t_us[0] for _, s in self.streams()]
        ends = [s.t_us[-1] for _, s in self.streams()]
        if max(starts) > min(ends):
            raise ValidationError("stream time ranges do not overlap")

    def crop(self, t_start_us: int, t_end_us: int) -> "FlightLog":
        """Restrict every stream to [t_start_us, t_end_us], inclusive."""

        def sel(stream):
            return (stream.t_us >= t_start_us) & (stream.t_us <= t_end_us)

        m_imu, m_baro, m_mag, m_ekf = (sel(s) for _, s in self.streams())
        return replace(
            self,
            imu=ImuStream(self.imu.t_us[m_imu], self.imu.gyro[m_imu], self.imu.accel[m_imu]),
            baro=BaroStream(self.baro.t_us[m_baro], self.baro.temp_c[m_baro], self.baro.alt_m[m_baro]),
            mag=MagStream(self.mag.t_us[m_mag], self.mag.mag[m_mag]),
            ekf=EkfStream(
                self.ekf.t_us[m_ekf],
                self.ekf.quat[m_ekf],
                self.ekf.vel_ned[m_ekf],
                self.ekf.pos_ned[m_ekf],
            ),
        )


def _value_arrays(stream) -> tuple[np.ndarray, ...]:
    if isinstance(stream, ImuStream):
        return (stream.gyro, stream.accel)
    if isinstance(stream, BaroStream):
        return (stream.temp_c, stream.alt_m)
    if isinstance(stream, MagStream):
        return (stream.mag,)
    return (stream.quat, stream.vel_ned, stream.pos_ned)


# ---------------------------------------------------------------------------
# container IO


def _fmt(x: float) -> str:
    # 17 significant digits guarantee exact decimal round trip of float64
    return format(float(x), ".17g")


def _write_csv(path: Path, header: str, t_us: np.ndarray, columns: list[np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(len(t_us)):
            row = [str(int(t_us[i]))] + [_fmt(c[i]) for c in columns]
            fh.write(",".join(row) + "\n")


def _read_csv(path: Path, expected_header: str) -> tuple[np.ndarray, np.ndarray]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    ncols = expected_header.count(",") + 1
    times: list[int] = []
    rows: list[list[float]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or ",".join(header) != expected_header:
            raise DataError(f"{path}: bad header, expected {expected_header!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != ncols:
                raise DataError(f"{path}:{lineno}: expected {ncols} fields, got {len(row)}")
            try:
                times.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: malformed value ({exc})") from exc
    t = np.asarray(times, dtype=np.int64)
    vals = np.asarray(rows, dtype=np.float64).reshape(len(times), ncols - 1)
    return t, vals


def write_flight_log(log: FlightLog, path: str | Path) -> None:
    """Write a validated log as manifest.json + four CSV files under path."""
    log.check()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "log_id": log.log_id,
        "vehicle_type": log.vehicle_type,
        "source": log.source,
        "home_lat_deg": log.home_lat_deg,
    }
    with open(root / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_csv(root / "imu.csv", _CSV_HEADERS["imu"], log.imu.t_us, [log.imu.gyro[:, i] for i in range(3)] + [log.imu.accel[:, i] for i in range(3)])
    _write_csv(root / "baro.csv", _CSV_HEADERS["baro"], log.baro.t_us, [log.baro.temp_c, log.baro.alt_m])
    _write_csv(root / "mag.csv", _CSV_HEADERS["mag"], log.mag.t_us, [log.mag.mag[:, i] for i in range(3)])
    _write_csv(
        root / "ekf.csv",
        _CSV_HEADERS["ekf"],
        log.ekf.t_us,
        [log.ekf.quat[:, i] for i in range(4)]
        + [log.ekf.vel_ned[:, i] for i in range(3)]
        + [log.ekf.pos_ned[:, i] for i in range(3)],
    )


def read_flight_log(path: str | Path) -> FlightLog:
    """Read a log directory; all invariants are re-checked on load."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise DataError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")

    t_imu, v_imu = _read_csv(root / "imu.csv", _CSV_HEADERS["imu"])
    t_baro, v_baro = _read_csv(root / "baro.csv", _CSV_HEADERS["baro"])
    t_mag, v_mag = _read_csv(root / "mag.csv", _CSV_HEADERS["mag"])
    t_ekf, v_ekf = _read_csv(root / "ekf.csv", _CSV_HEADERS["ekf"])

    try:
        log = FlightLog(
            log_id=str(manifest.get("log_id", root.name)),
            vehicle_type=str(manifest.get("vehicle_type", "unknown")),
            source=str(manifest.get("source", "recorded")),
            imu=ImuStream(t_imu, v_imu[:, 0:3], v_imu[:, 3:6]),
            baro=BaroStream(t_baro, v_baro[:, 0], v_baro[:, 1]),
            mag=MagStream(t_mag, v_mag[:, 0:3]),
            ekf=EkfStream(t_ekf, v_ekf[:, 0:4], v_ekf[:, 4:7], v_ekf[:, 7:10]),
            home_lat_deg=manifest.get("home_lat_deg"),
        )
    except IndexError as exc:
        raise DataError(f"{root}: truncated stream data ({exc})") from exc
    log.check()
    return log


# ---------------------------------------------------------------------------
# validation report


@dataclass
class GapDefect:
    stream: str
    t_start_us: int
    gap_s: float


@dataclass
class ValidationReport:
    """Defect summary produced by validate_log; ok is False on any defect."""

    ok: bool
    duration_s: float
    gaps: list[GapDefect] = field(default_factory=list)
    nan_counts: dict[str, int] = field(default_factory=dict)
    quat_norm_violations: int = 0
    nonmonotonic_streams: list[str] = field(default_factory=list)
    empty_streams: list[str] = field(default_factory=list)

    @property
    def nan_count(self) -> int:
        return sum(self.nan_counts.values())

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "duration_s": self.duration_s,
            "gaps": [{"stream": g.stream, "t_start_us": g.t_start_us, "gap_s": g.gap_s} for g in self.gaps],
            "nan_counts": dict(self.nan_counts),
            "quat_norm_violations": self.quat_norm_violations,
            "nonmonotonic_streams": list(self.nonmonotonic_streams),
            "empty_streams": list(self.empty_streams),
        }


def validate_log(log: FlightLog, max_gap_s: float = 1.0) -> ValidationReport:
    """Inspect a log for defects without raising.

    Reported defects: per-stream gaps longer than max_gap_s, counts of
    non-finite sample rows, quaternion norm violations, non-monotonic or
    empty streams. The report is a pure function of the input.
    """
    report = ValidationReport(ok=True, duration_s=log.duration_s)
    for name, stream in log.streams():
        if len(stream) == 0:
            report.empty_streams.append(name)
            continue
        dt = np.diff(stream.t_us)
        if np.any(dt <= 0):
            report.nonmonotonic_streams.append(name)
        big = np.nonzero(dt > max_gap_s * 1e6)[0]
        for i in big:
            report.gaps.append(GapDefect(name, int(stream.t_us[i]), float(dt[i]) * 1e-6))
        bad = np.zeros(len(stream), dtype=bool)
        for arr in _value_arrays(stream):
            finite = np.isfinite(arr)
            bad |= ~(finite if finite.ndim == 1 else finite.all(axis=1))
        n_bad = int(bad.sum())
        if n_bad:
            report.nan_counts[name] = n_bad
    if len(log.ekf) > 0:
        norms = np.linalg.norm(log.ekf.quat, axis=1)
        with np.errstate(invalid="ignore"):
            viol = np.abs(norms - 1.0) > QUAT_NORM_TOL
        viol |= ~np.isfinite(norms)
        report.quat_norm_violations = int(np.sum(viol))
    report.ok = not (
        report.gaps
        or report.nan_counts
        or report.quat_norm_violations
        or report.nonmonotonic_streams
        or report.empty_streams
    )
    return report
