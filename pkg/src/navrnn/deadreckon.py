"""Strapdown inertial dead reckoning.

Propagates attitude, velocity, and position from gyro and accelerometer
samples alone: debiased delta angles (optionally corrected for the earth's
rotation rate at the home latitude) update the quaternion through the exact
exponential map; debiased delta velocities are rotated into NED, gravity is
added, and position integrates the trapezoidal mean of old and new velocity.
Without aiding this diverges quickly on low-cost sensors, which is exactly
what makes it the reference baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quat
from .errors import ConfigError, DataError
from .flightlog import EkfState, FlightLog

GRAVITY_MPS2 = 9.80665
EARTH_RATE_RADPS = 7.292115e-5


@dataclass
class DeadReckonConfig:
    gravity_mps2: float = GRAVITY_MPS2
    home_lat_deg: float = 0.0
    apply_earth_rate: bool = False
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.gyro_bias = np.asarray(self.gyro_bias, dtype=float).reshape(3)
        self.accel_bias = np.asarray(self.accel_bias, dtype=float).reshape(3)
        if self.gravity_mps2 <= 0:
            raise ConfigError("gravity must be positive")
        if abs(self.home_lat_deg) > 90.0:
            raise ConfigError("latitude out of range")

    def earth_rate_ned(self) -> np.ndarray:
        lat = np.deg2rad(self.home_lat_deg)
        return EARTH_RATE_RADPS * np.array([np.cos(lat), 0.0, -np.sin(lat)])


@dataclass
class NavState:
    """Navigation state: unit quaternion, NED velocity (m/s), NED position (m)."""

    quat: np.ndarray
    vel_ned: np.ndarray
    pos_ned: np.ndarray
    t_us: int = 0

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=float).reshape(4)
        self.vel_ned = np.asarray(self.vel_ned, dtype=float).reshape(3)
        self.pos_ned = np.asarray(self.pos_ned, dtype=float).reshape(3)

    @classmethod
    def from_ekf(cls, s: EkfState) -> "NavState":
        return cls(quat=s.quat.copy(), vel_ned=s.vel_ned.copy(), pos_ned=s.pos_ned.copy(), t_us=int(s.t_us))


def propagate_attitude(state: NavState, gyro: np.ndarray, dt: float, cfg: DeadReckonConfig) -> NavState:
    """Advance attitude by one gyro sample over dt seconds.

    The debiased delta angle (minus the earth rate projected into the body
    frame when enabled) is applied through the exact quaternion exponential;
    the result is renormalized every step.
    """
    if dt <= 0:
        raise DataError("dt must be positive")
    dtheta = (np.asarray(gyro, dtype=float) - cfg.gyro_bias) * dt
    if cfg.apply_earth_rate:
        dtheta = dtheta - quat.rotate_inverse(state.quat, cfg.earth_rate_ned()) * dt
    q_new = quat.normalize(quat.multiply(state.quat, quat.from_rotvec(dtheta)))
    return NavState(q_new, state.vel_ned, state.pos_ned, state.t_us)


def propagate_velocity_position(state: NavState, accel: np.ndarray, dt: float, cfg: DeadReckonConfig) -> NavState:
    """Advance velocity and position by one accelerometer sample over dt.

    Uses the state's current attitude to rotate the debiased delta velocity
    into NED, adds gravity, then integrates position with the trapezoidal
    mean of old and new velocity.
    """
    if dt <= 0:
        raise DataError("dt must be positive")
    dv_body = (np.asarray(accel, dtype=float) - cfg.accel_bias) * dt
    dv_ned = quat.rotate(state.quat, dv_body)
    dv_ned[2] += cfg.gravity_mps2 * dt
    vel_new = state.vel_ned + dv_ned
    pos_new = state.pos_ned + 0.5 * (state.vel_ned + vel_new) * dt
    return NavState(state.quat, vel_new, pos_new, state.t_us)


@dataclass
class Trajectory:
    """Dense state history at sensor rate, with helpers for resampling."""

    t_us: np.ndarray
    quat: np.ndarray
    vel_ned: np.ndarray
    pos_ned: np.ndarray

    def __len__(self) -> int:
        return len(self.t_us)

    def sample_at(self, t_query_us: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Linear interpolation of vel/pos (nlerp for quat) at given times."""
        t_query_us = np.asarray(t_query_us, dtype=np.int64)
        t = self.t_us.astype(np.float64)
        tq = np.clip(t_query_us.astype(np.float64), t[0], t[-1])
        idx = np.clip(np.searchsorted(t, tq, side="right") - 1, 0, len(t) - 2)
        denom = t[idx + 1] - t[idx]
        alpha = np.where(denom > 0, (tq - t[idx]) / np.where(denom > 0, denom, 1.0), 0.0)
        vel = self.vel_ned[idx] + alpha[:, None] * (self.vel_ned[idx + 1] - self.vel_ned[idx])
        pos = self.pos_ned[idx] + alpha[:, None] * (self.pos_ned[idx + 1] - self.pos_ned[idx])
        q = quat.nlerp(self.quat[idx], self.quat[idx + 1], alpha)
        return q, vel, pos

    def write_csv(self, path) -> None:
        header = "t_us,q1,q2,q3,q4,vn,ve,vd,pn,pe,pd"
        cols = np.hstack([self.quat, self.vel_ned, self.pos_ned])
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(header + "\n")
            for i in range(len(self.t_us)):
                vals = ",".join(format(v, ".17g") for v in cols[i])
                fh.write(f"{int(self.t_us[i])},{vals}\n")


def dead_reckon(log: FlightLog, cfg: DeadReckonConfig | None = None, init: NavState | None = None) -> Trajectory:
    """Propagate the full IMU stream from an initial state.

    The initial state defaults to the log's first EKF sample. Each IMU
    sample at time t is treated as the measured rate over the interval
    ending at t: attitude advances first, then velocity/position using the
    updated attitude. Samples at or before the initial time are skipped.
    """
    cfg = cfg or DeadReckonConfig()
    if len(log.imu) == 0:
        raise DataError("imu stream is empty")
    if np.any(np.diff(log.imu.t_us) <= 0):
        raise DataError("imu timestamps are not strictly increasing")
    if init is None:
        if len(log.ekf) == 0:
            raise DataError("no ekf sample to initialize from")
        e = log.ekf
        init = NavState(e.quat[0].copy(), e.vel_ned[0].copy(), e.pos_ned[0].copy(), int(e.t_us[0]))

    mask = log.imu.t_us > init.t_us
    t_arr = log.imu.t_us[mask]
    gyro = log.imu.gyro[mask]
    accel = log.imu.accel[mask]

    n = len(t_arr)
    out_t = np.empty(n + 1, dtype=np.int64)
    out_q = np.empty((n + 1, 4))
    out_v = np.empty((n + 1, 3))
    out_p = np.empty((n + 1, 3))
    out_t[0] = init.t_us
    out_q[0] = init.quat
    out_v[0] = init.vel_ned
    out_p[0] = init.pos_ned

    state = init
    t_prev = init.t_us
    for i in range(n):
        dt = float(t_arr[i] - t_prev) * 1e-6
        state = propagate_attitude(state, gyro[i], dt, cfg)
        state = propagate_velocity_position(state, accel[i], dt, cfg)
        state.t_us = int(t_arr[i])
        t_prev = t_arr[i]
        out_t[i + 1] = t_arr[i]
        out_q[i + 1] = state.quat
        out_v[i + 1] = state.vel_ned
        out_p[i + 1] = state.pos_ned

    return Trajectory(out_t, out_q, out_v, out_p)
