"""Real-time inference harness.

One producer thread per sensor replays samples into bounded queues; a
single consumer owns the rolling feature window, closes an averaging bin
every period, and predicts the upcoming state increment. Queues drop their
oldest entry on overflow so producers never block; dropped counts are
surfaced in every prediction. Two pacing modes exist: wall-clock replay
(replay_speed > 0) for latency realism, and a virtual clock (replay_speed
0) that runs as fast as possible while keeping producers at most two
periods ahead of the consumer, which makes the run deterministic and, with
zero jitter, bit-identical to the offline batch pipeline.
"""

from __future__ import annotations

import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .flightlog import FlightLog
from .preprocess import Normalization, bin_mean, unify_rates
from .rnn import Checkpoint, forward
from .evaluate import predict_increments

_DONE = object()


@dataclass
class StreamConfig:
    period_ms: int = 200
    jitter_ms: float = 0.0
    queue_capacity: int = 1024
    replay_speed: float = 0.0  # 0 = as fast as possible (virtual clock)
    seed: int = 0

    def __post_init__(self):
        if self.period_ms <= 0:
            raise ConfigError("period_ms must be positive")
        if self.queue_capacity < 1:
            raise ConfigError("queue_capacity must be >= 1")
        if self.jitter_ms < 0 or self.replay_speed < 0:
            raise ConfigError("jitter_ms and replay_speed must be >= 0")


@dataclass
class OnlinePrediction:
    t_us: int
    increment: np.ndarray
    latency_ms: float
    dropped_samples: int
    carried_imu: bool = False


class SensorQueue:
    """Bounded queue with drop-oldest overflow; the producer never blocks."""

    def __init__(self, capacity: int):
        self._q: queue.Queue = queue.Queue(maxsize=capacity)
        self._pushback = None  # consumer-side one-slot peek buffer
        self.dropped = 0

    def put(self, item) -> None:
        while True:
            try:
                self._q.put_nowait(item)
                return
            except queue.Full:
                try:
                    self._q.get_nowait()
                    self.dropped += 1
                except queue.Empty:
                    pass

    def get(self, timeout: float | None = None):
        if self._pushback is not None:
            item = self._pushback
            self._pushback = None
            return item
        return self._q.get(timeout=timeout)

    def get_nowait(self):
        if self._pushback is not None:
            item = self._pushback
            self._pushback = None
            return item
        return self._q.get_nowait()

    def push_back(self, item) -> None:
        self._pushback = item


class VirtualClock:
    """Pacing for full-speed replay: producers stay <= horizon ahead."""

    def __init__(self, start_us: int, horizon_us: int):
        self._cond = threading.Condition()
        self._now = int(start_us)
        self._horizon = int(horizon_us)
        self._released = False

    def wait_until_allowed(self, t_us: int) -> None:
        with self._cond:
            while not self._released and t_us > self._now + self._horizon:
                self._cond.wait(timeout=1.0)

    def advance(self, t_us: int) -> None:
        with self._cond:
            if t_us > self._now:
                self._now = int(t_us)
            self._cond.notify_all()

    def release(self) -> None:
        with self._cond:
            self._released = True
            self._cond.notify_all()


def make_queues(cfg: StreamConfig) -> dict[str, SensorQueue]:
    return {name: SensorQueue(cfg.queue_capacity) for name in ("imu", "baro", "mag")}


def _producer(t_arr, values, q: SensorQueue, clock: VirtualClock | None, speed: float, t0_us: int):
    wall_start = time.perf_counter()
    for i in range(len(t_arr)):
        t = int(t_arr[i])
        if clock is not None:
            clock.wait_until_allowed(t)
        elif speed > 0:
            deadline = wall_start + (t - t0_us) * 1e-6 / speed
            delay = deadline - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        q.put((t, values[i]))
    q.put(_DONE)


def replay(
    log: FlightLog, cfg: StreamConfig, queues: dict[str, SensorQueue], clock: VirtualClock | None = None
) -> list[threading.Thread]:
    """Start one producer thread per sensor stream; returns started threads."""
    t0 = int(min(log.imu.t_us[0], log.baro.t_us[0], log.mag.t_us[0]))
    streams = {
        "imu": (log.imu.t_us, np.hstack([log.imu.gyro, log.imu.accel])),
        "baro": (log.baro.t_us, np.column_stack([log.baro.temp_c, log.baro.alt_m])),
        "mag": (log.mag.t_us, log.mag.mag),
    }
    threads = []
    for name, (t_arr, values) in streams.items():
        th = threading.Thread(
            target=_producer,
            args=(t_arr, values, queues[name], clock, cfg.replay_speed, t0),
            name=f"replay-{name}",
            daemon=True,
        )
        th.start()
        threads.append(th)
    return threads


_SENSOR_DIMS = {"imu": 6, "baro": 2, "mag": 3}


class _BinCollector:
    """Drains one sensor queue up to a bin edge, tracking seeds and EOS."""

    def __init__(self, name: str, q: SensorQueue):
        self.name = name
        self.q = q
        self.finished = False
        self.last_mean: np.ndarray | None = None

    def collect(self, edge_prev: int, edge: int, blocking: bool, timeout: float) -> list[np.ndarray]:
        items: list[np.ndarray] = []
        while not self.finished:
            try:
                item = self.q.get(timeout=timeout) if blocking else self.q.get_nowait()
            except queue.Empty:
                if blocking:
                    raise DataError(f"{self.name} producer stalled (no data for {timeout:.0f}s)")
                return items
            if item is _DONE:
                self.finished = True
                return items
            t, values = item
            if t <= edge_prev:
                # pre-bin sample: remember as the seed for an empty first bin
                self.last_mean = np.asarray(values, dtype=np.float64).copy()
                continue
            if t <= edge:
                items.append(values)
                continue
            self.q.push_back(item)
            return items
        return items

    def mean(self, items: list[np.ndarray], dim: int) -> tuple[np.ndarray, bool]:
        if items:
            m = bin_mean(np.asarray(items, dtype=np.float64).reshape(len(items), dim))
            self.last_mean = m
            return m, False
        if self.last_mean is not None:
            return self.last_mean, True
        return np.zeros(dim), True


def online_infer(
    ckpt: Checkpoint,
    queues: dict[str, SensorQueue],
    cfg: StreamConfig,
    clock: VirtualClock | None = None,
    anchor_us: int | None = None,
):
    """Yield one OnlinePrediction per elapsed period once the window is full.

    Causal feature assembly mirrors the offline pipeline: each period closes
    an averaging bin; barometer/magnetometer bins without samples reuse the
    previous mean; an inertial bin without samples repeats the last one and
    flags the prediction. The consumer alone touches the window buffer.
    anchor_us fixes the bin grid origin; matching it to the log's first
    estimator timestamp makes the bins identical to the offline pipeline's.
    """
    meta = ckpt.meta
    window = int(meta.get("window", 0))
    if window < 1:
        raise ConfigError("checkpoint meta lacks a window size")
    meta_period = meta.get("period_ms")
    if meta_period is not None and int(meta_period) != cfg.period_ms:
        raise ConfigError(f"checkpoint was trained at {meta_period} ms bins, stream runs {cfg.period_ms} ms")
    norm = Normalization(mean=meta["feature_mean"], std=meta["feature_std"])
    rng = np.random.default_rng(cfg.seed)
    period_us = cfg.period_ms * 1000
    wall_mode = clock is None and cfg.replay_speed > 0
    timeout = 30.0

    collectors = {name: _BinCollector(name, q) for name, q in queues.items()}

    # anchor the bin grid at the earliest timestamp across sensors
    anchor = None if anchor_us is None else int(anchor_us)
    if anchor is None:
        for c in collectors.values():
            try:
                item = c.q.get(timeout=timeout)
            except queue.Empty:
                raise DataError(f"{c.name} produced no data")
            if item is _DONE:
                c.finished = True
                continue
            c.q.push_back(item)
            t = int(item[0])
            anchor = t if anchor is None else min(anchor, t)
    if anchor is None:
        return

    rows: list[np.ndarray] = []
    prev_alt_mean: float | None = None
    wall_start = time.perf_counter()
    edge_prev = anchor
    k = 0
    try:
        while True:
            k += 1
            jitter_us = int(round(rng.uniform(-cfg.jitter_ms, cfg.jitter_ms) * 1000.0)) if cfg.jitter_ms > 0 else 0
            edge = anchor + k * period_us + jitter_us
            if clock is not None:
                clock.advance(edge)
            if wall_mode:
                deadline = wall_start + (edge - anchor) * 1e-6 / cfg.replay_speed
                delay = deadline - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            bins = {
                name: c.collect(edge_prev, edge, blocking=not wall_mode, timeout=timeout)
                for name, c in collectors.items()
            }
            if all(c.finished for c in collectors.values()) and not any(bins.values()):
                return
            t_compute = time.perf_counter()
            imu_mean, imu_carried = collectors["imu"].mean(bins["imu"], 6)
            baro_mean, _ = collectors["baro"].mean(bins["baro"], 2)
            mag_mean, _ = collectors["mag"].mean(bins["mag"], 3)
            dalt = 0.0 if prev_alt_mean is None else baro_mean[1] - prev_alt_mean
            prev_alt_mean = baro_mean[1]
            feature_row = np.concatenate([imu_mean, [baro_mean[0], dalt], mag_mean])
            rows.append(norm.apply(feature_row[None, :])[0])
            if len(rows) > window:
                rows.pop(0)
            edge_prev = edge
            if len(rows) < window:
                continue
            x = np.stack(rows)
            y, _ = forward(ckpt.params, x, want_tape=False)
            latency_ms = (time.perf_counter() - t_compute) * 1e3
            yield OnlinePrediction(
                t_us=int(edge),
                increment=y,
                latency_ms=latency_ms,
                dropped_samples=sum(q.dropped for q in queues.values()),
                carried_imu=imu_carried,
            )
    finally:
        if clock is not None:
            clock.release()


def run_stream(
    log: FlightLog, ckpt: Checkpoint, cfg: StreamConfig, anchor_us: int | None = None
) -> list[OnlinePrediction]:
    """Replay a log through the online path and collect every prediction.

    The bin grid defaults to the log's first estimator timestamp so the
    online bins line up with offline preprocessing.
    """
    if anchor_us is None and len(log.ekf) > 0:
        anchor_us = int(log.ekf.t_us[0])
    queues = make_queues(cfg)
    clock = None
    if cfg.replay_speed == 0:
        t0 = int(min(log.imu.t_us[0], log.baro.t_us[0], log.mag.t_us[0]))
        if anchor_us is not None:
            t0 = min(t0, anchor_us)
        clock = VirtualClock(start_us=t0, horizon_us=2 * cfg.period_ms * 1000)
    threads = replay(log, cfg, queues, clock=clock)
    try:
        predictions = list(online_infer(ckpt, queues, cfg, clock=clock, anchor_us=anchor_us))
    finally:
        if clock is not None:
            clock.release()
    for th in threads:
        th.join(timeout=30.0)
        if th.is_alive():
            raise DataError(f"{th.name} failed to finish")
    return predictions


def compare_online_offline(log: FlightLog, ckpt: Checkpoint, cfg: StreamConfig) -> dict:
    """Run the streaming and batch paths on the same log and diff them.

    The offline reference predicts window by window (batch size 1) so both
    sides execute identical arithmetic; with zero jitter the deviations are
    exactly zero.
    """
    series = unify_rates(log)
    offline = predict_increments(ckpt, series, batch_size=1)
    online = run_stream(log, ckpt, cfg)
    online_arr = np.array([p.increment for p in online], dtype=np.float64)
    offline_arr = offline.astype(np.float64)
    n = min(len(online_arr), len(offline_arr))
    if n == 0:
        raise DataError("no overlapping predictions to compare")
    dev = np.abs(online_arr[:n] - offline_arr[:n])
    return {
        "n_compared": int(n),
        "n_online": int(len(online_arr)),
        "n_offline": int(len(offline_arr)),
        "max_abs_dev": [float(v) for v in dev.max(axis=0)],
        "mean_abs_dev": [float(v) for v in dev.mean(axis=0)],
        "bitwise_equal": bool(np.array_equal(online_arr[:n], offline_arr[:n])),
        "dropped_samples": int(online[-1].dropped_samples) if online else 0,
    }
