import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from navrnn.errors import ConfigError, DataError, EmptyBinError, NoTakeoffError
from navrnn.flightlog import BaroStream, EkfStream, FlightLog, ImuStream, MagStream
from navrnn.preprocess import (
    Normalization,
    bin_mean,
    build_dataset,
    compute_signal_weights,
    detect_corrupted,
    difference,
    load_windows,
    make_windows,
    save_windows,
    split_dataset,
    trim_ground_time,
    unify_rates,
    window_count,
)
from navrnn.synth import DatasetManifest, LogEntry, SynthConfig, generate_flight


def _log_from_arrays(t_imu, gyro, accel, t_baro, temp, alt, t_mag, mag, t_ekf, pos, vel):
    n_ekf = len(t_ekf)
    quat = np.zeros((n_ekf, 4))
    quat[:, 0] = 1.0
    return FlightLog(
        log_id="manual",
        vehicle_type="quadrotor",
        source="synthetic",
        imu=ImuStream(t_imu, gyro, accel),
        baro=BaroStream(t_baro, temp, alt),
        mag=MagStream(t_mag, mag),
        ekf=EkfStream(t_ekf, quat, vel, pos),
    )


def _constant_log(c=3.25, n_ekf=6):
    t_ekf = np.arange(n_ekf, dtype=np.int64) * 200000
    t_fast = np.arange(1, n_ekf * 20, dtype=np.int64) * 10000
    n = len(t_fast)
    return _log_from_arrays(
        t_fast,
        np.full((n, 3), c),
        np.full((n, 3), c),
        t_fast,
        np.full(n, c),
        np.full(n, c),
        t_fast,
        np.full((n, 3), c),
        t_ekf,
        np.zeros((n_ekf, 3)),
        np.zeros((n_ekf, 3)),
    )


class TestUnifyRates:
    def test_row_count_at_standard_rates(self):
        log = generate_flight(SynthConfig(duration_s=60.0, profile="circle", seed=0))
        series = unify_rates(log)
        assert len(series) == len(log.ekf) - 1 == 300
        assert len(series.labels) == 299

    def test_constant_streams(self):
        c = 3.25
        series = unify_rates(_constant_log(c))
        np.testing.assert_array_equal(series.features[:, 0:6], c)
        np.testing.assert_array_equal(series.features[:, 6], c)  # temperature raw
        np.testing.assert_array_equal(series.features[:, 7], 0.0)  # altitude differenced
        np.testing.assert_array_equal(series.features[:, 8:], c)

    def test_bin_average_hand_oracle(self):
        t_ekf = np.array([0, 200000, 400000], dtype=np.int64)
        t_imu = np.array([50000, 100000, 150000, 250000], dtype=np.int64)
        gyro = np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0], [7.0, 0, 0]])
        accel = np.zeros((4, 3))
        t_slow = np.array([100000, 300000], dtype=np.int64)
        series = unify_rates(
            _log_from_arrays(
                t_imu, gyro, accel,
                t_slow, np.array([20.0, 21.0]), np.array([5.0, 8.0]),
                t_slow, np.array([[0.2, 0, 0.4], [0.3, 0, 0.4]]),
                t_ekf, np.zeros((3, 3)), np.zeros((3, 3)),
            )
        )
        assert series.features[0, 0] == pytest.approx(2.0)  # mean of {1,2,3}
        assert series.features[1, 0] == pytest.approx(7.0)
        assert series.features[0, 7] == 0.0
        assert series.features[1, 7] == pytest.approx(8.0 - 5.0)

    def test_brute_force_oracle(self, noisy_logs):
        log = noisy_logs[0]
        series = unify_rates(log)
        t_edges = log.ekf.t_us
        k = 7
        mask = (log.imu.t_us > t_edges[k]) & (log.imu.t_us <= t_edges[k + 1])
        expected = sum(log.imu.gyro[mask, 1]) / mask.sum()  # plain sequential sum
        assert series.features[k, 1] == pytest.approx(expected, rel=1e-12)

    def test_conserves_sample_mass(self, noisy_logs):
        log = noisy_logs[1]
        t_edges = log.ekf.t_us
        inside = np.sum((log.mag.t_us > t_edges[0]) & (log.mag.t_us <= t_edges[-1]))
        series = unify_rates(log)
        # every inside sample lands in exactly one bin: recount via searchsorted
        idx = np.searchsorted(t_edges, log.mag.t_us, side="left") - 1
        counted = np.sum((idx >= 0) & (idx < len(series)))
        assert counted == inside

    def test_empty_imu_bin_is_fatal(self):
        t_ekf = np.array([0, 200000, 400000], dtype=np.int64)
        t_imu = np.array([50000], dtype=np.int64)  # nothing in the second bin
        with pytest.raises(EmptyBinError):
            unify_rates(
                _log_from_arrays(
                    t_imu, np.zeros((1, 3)), np.zeros((1, 3)),
                    t_imu, np.zeros(1), np.zeros(1),
                    t_imu, np.zeros((1, 3)),
                    t_ekf, np.zeros((3, 3)), np.zeros((3, 3)),
                )
            )

    def test_empty_baro_bin_carried_forward(self):
        t_ekf = np.array([0, 200000, 400000, 600000], dtype=np.int64)
        t_imu = np.arange(1, 60, dtype=np.int64) * 10000
        n = len(t_imu)
        t_baro = np.array([150000, 550000], dtype=np.int64)  # middle bin empty
        series = unify_rates(
            _log_from_arrays(
                t_imu, np.zeros((n, 3)), np.zeros((n, 3)),
                t_baro, np.array([20.0, 22.0]), np.array([5.0, 9.0]),
                t_imu, np.zeros((n, 3)),
                t_ekf, np.zeros((4, 3)), np.zeros((4, 3)),
            )
        )
        assert series.baro_carried == 1
        assert series.features[1, 6] == series.features[0, 6] == 20.0
        assert series.features[1, 7] == 0.0  # carried mean differences to zero
        assert series.features[2, 7] == pytest.approx(9.0 - 5.0)

    def test_labels_are_state_increments(self, noisy_logs):
        log = noisy_logs[0]
        series = unify_rates(log)
        expected = np.hstack([np.diff(log.ekf.pos_ned[1:], axis=0), np.diff(log.ekf.vel_ned[1:], axis=0)])
        np.testing.assert_array_equal(series.labels, expected)
        assert series.init_state.t_us == log.ekf.t_us[1]


class TestDifference:
    def test_constant_sequence(self):
        assert np.all(difference(np.ones((10, 3))) == 0.0)

    def test_hand_oracle(self):
        np.testing.assert_array_equal(difference(np.array([1.0, 4.0, 9.0])), [3.0, 5.0])

    def test_length_shrinks_by_one(self, rng):
        x = rng.standard_normal((17, 6))
        assert difference(x).shape == (16, 6)

    def test_too_short(self):
        with pytest.raises(DataError):
            difference(np.array([1.0]))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(min_value=2, max_value=40), st.integers(min_value=0, max_value=2**31))
    def test_cumsum_inverse(self, n, seed):
        x = np.random.default_rng(seed).standard_normal((n, 4))
        rebuilt = np.vstack([x[0], x[0] + np.cumsum(difference(x), axis=0)])
        np.testing.assert_allclose(rebuilt, x, atol=1e-12)


class TestTrim:
    def test_trim_matches_generator_truth(self):
        cfg = SynthConfig(duration_s=60.0, profile="circle", seed=2, ground_time_s=30.0, ground_drift_mps=0.1)
        log = generate_flight(cfg)
        trimmed = trim_ground_time(log)
        assert abs(trimmed.ekf.t_us[0] * 1e-6 - 30.0) < 2.0
        assert abs(trimmed.ekf.t_us[-1] * 1e-6 - 90.0) < 2.0

    def test_all_airborne_unchanged(self):
        log = generate_flight(SynthConfig(duration_s=40.0, profile="circle", seed=1))
        # warp means the first/last samples are at rest; crop those edges off first
        core = log.crop(5_000_000, 35_000_000)
        trimmed = trim_ground_time(core, vel_thresh_mps=0.1)
        assert np.array_equal(trimmed.ekf.t_us, core.ekf.t_us)
        assert np.array_equal(trimmed.imu.t_us, core.imu.t_us)

    def test_long_ground_segment_removed(self):
        cfg = SynthConfig(duration_s=1200.0, profile="survey_lawnmower", seed=0, ground_time_s=300.0,
                          ground_drift_mps=0.08)
        log = generate_flight(cfg)
        trimmed = trim_ground_time(log)
        assert abs(trimmed.duration_s - 1200.0) < 30.0

    def test_no_takeoff(self):
        log = generate_flight(SynthConfig(duration_s=30.0, profile="hover", seed=0, ground_drift_mps=0.05))
        with pytest.raises(NoTakeoffError):
            trim_ground_time(log)


class TestCleanup:
    def test_clean_flight_accepted(self):
        log = generate_flight(SynthConfig(duration_s=90.0, profile="survey_lawnmower", seed=4))
        verdict = detect_corrupted(log)
        assert verdict.accepted
        assert verdict.trimmed is not None

    def test_never_leaves_ground_rejected(self):
        log = generate_flight(SynthConfig(duration_s=90.0, profile="hover", seed=4, ground_drift_mps=0.05))
        verdict = detect_corrupted(log)
        assert not verdict.accepted
        assert verdict.reasons == ["no_takeoff"]

    def test_too_short_rejected(self):
        log = generate_flight(SynthConfig(duration_s=30.0, profile="circle", seed=4))
        verdict = detect_corrupted(log, min_duration_s=60.0)
        assert not verdict.accepted
        assert verdict.reasons == ["too_short"]

    def test_validation_defect_rejected(self):
        log = generate_flight(SynthConfig(duration_s=90.0, profile="circle", seed=4))
        log.imu.accel[10, 0] = np.nan
        verdict = detect_corrupted(log)
        assert verdict.reasons == ["validation_defects"]

    def test_cleanup_shrinks_corpus(self):
        logs = [generate_flight(SynthConfig(duration_s=70.0, profile="circle", seed=i)) for i in range(2)]
        logs.append(generate_flight(SynthConfig(duration_s=70.0, profile="hover", seed=9, ground_drift_mps=0.05)))
        verdicts = [detect_corrupted(l) for l in logs]
        accepted = sum(v.accepted for v in verdicts)
        assert accepted <= len(logs)
        assert accepted == 2


class TestWeights:
    def test_hand_oracle(self):
        labels = np.array([[2.0, 0.5], [-2.0, -0.5]])
        np.testing.assert_allclose(compute_signal_weights(labels), [0.5, 2.0])

    def test_unit_means_give_unit_weights(self):
        labels = np.tile([1.0, -1.0, 1.0, -1.0, 1.0, -1.0], (8, 1))
        np.testing.assert_allclose(compute_signal_weights(labels), 1.0)

    def test_zero_signal_clamped(self):
        labels = np.zeros((5, 2))
        np.testing.assert_allclose(compute_signal_weights(labels), 1e6)

    def test_duplication_invariance(self, rng):
        labels = rng.standard_normal((40, 6))
        w1 = compute_signal_weights(labels)
        w2 = compute_signal_weights(np.vstack([labels, labels]))
        np.testing.assert_allclose(w1, w2)

    def test_scaling_law(self, rng):
        labels = rng.standard_normal((40, 6)) + 0.5
        w1 = compute_signal_weights(labels)
        scaled = labels.copy()
        scaled[:, 2] *= 4.0
        w2 = compute_signal_weights(scaled)
        assert w2[2] == pytest.approx(w1[2] / 4.0)


class TestWindows:
    def _series(self, n_labels=40, window=None):
        log = generate_flight(SynthConfig(duration_s=max(10.0, (n_labels + 2) * 0.2), profile="circle", seed=0))
        return unify_rates(log)

    def test_window_counts(self, noisy_logs):
        series = unify_rates(noisy_logs[0])
        n_labels = len(series.labels)
        ds = make_windows(series, window=50, stride=1)
        assert len(ds) == n_labels - 50 + 1
        ds3 = make_windows(series, window=50, stride=3)
        assert len(ds3) == (n_labels - 50) // 3 + 1

    def test_example_window_arithmetic(self):
        assert window_count(1000, 200, 1) == 801

    def test_boundary_single_window(self, noisy_logs):
        series = unify_rates(noisy_logs[0])
        n_labels = len(series.labels)
        ds = make_windows(series, window=n_labels, stride=1)
        assert len(ds) == 1
        np.testing.assert_array_equal(ds.labels[0], series.labels[-1].astype(np.float32))

    def test_adjacent_labels_consecutive(self, noisy_logs):
        series = unify_rates(noisy_logs[0])
        ds = make_windows(series, window=30, stride=1)
        np.testing.assert_array_equal(ds.labels[:10], series.labels[29:39].astype(np.float32))
        # stride-1 windows overlap by window-1 rows
        np.testing.assert_array_equal(ds.windows[1][:-1], ds.windows[0][1:])

    def test_too_short(self, noisy_logs):
        series = unify_rates(noisy_logs[0])
        with pytest.raises(DataError):
            make_windows(series, window=len(series.labels) + 1)

    def test_normalization_applied(self, noisy_logs):
        series = unify_rates(noisy_logs[0])
        ds = make_windows(series, window=20)
        flat = ds.windows.reshape(-1, 11)
        assert np.abs(flat.mean(axis=0)).max() < 0.5
        norm = ds.normalization
        expected = ((series.features[:20].astype(np.float32) - norm.mean) / norm.std).astype(np.float32)
        np.testing.assert_array_equal(ds.windows[0], expected)

    def test_windows_file_round_trip(self, tmp_path, noisy_logs):
        series = [unify_rates(l) for l in noisy_logs[:2]]
        ds = build_dataset(series, window=25, stride=2)
        save_windows(ds, tmp_path / "w.bin", provenance={"period_ms": 200})
        back = load_windows(tmp_path / "w.bin")
        assert np.array_equal(back.windows, ds.windows)
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.weights, ds.weights)
        assert np.array_equal(back.normalization.mean, ds.normalization.mean)
        assert back.window_size == 25 and back.stride == 2
        assert back.source_logs == ds.source_logs

    def test_windows_file_truncation(self, tmp_path, noisy_logs):
        series = [unify_rates(noisy_logs[0])]
        ds = build_dataset(series, window=25)
        save_windows(ds, tmp_path / "w.bin")
        data = (tmp_path / "w.bin").read_bytes()
        (tmp_path / "w.bin").write_bytes(data[:-13])
        with pytest.raises(DataError, match="payload"):
            load_windows(tmp_path / "w.bin")


class TestSplit:
    def _manifest(self, n):
        entries = [LogEntry(f"log{i:03d}", f"log{i:03d}", 60.0, "circle") for i in range(n)]
        return DatasetManifest(root=None, logs=entries)

    def test_paper_scale_split(self):
        train, val = split_dataset(self._manifest(548), val_fraction=0.151, seed=0)
        assert len(train) == 465 and len(val) == 83

    def test_deterministic(self):
        m = self._manifest(20)
        a = split_dataset(m, 0.25, seed=3)
        b = split_dataset(m, 0.25, seed=3)
        assert [e.log_id for e in a[0]] == [e.log_id for e in b[0]]
        assert [e.log_id for e in a[1]] == [e.log_id for e in b[1]]

    def test_partition_property(self):
        m = self._manifest(17)
        train, val = split_dataset(m, 0.3, seed=1)
        train_ids = {e.log_id for e in train}
        val_ids = {e.log_id for e in val}
        assert train_ids | val_ids == {e.log_id for e in m.logs}
        assert not (train_ids & val_ids)

    def test_bad_fraction(self):
        with pytest.raises(ConfigError):
            split_dataset(self._manifest(10), 1.5, seed=0)

    def test_whole_flight_granularity(self, noisy_logs):
        series = [unify_rates(l) for l in noisy_logs]
        train_ds = build_dataset(series[:2], window=20)
        val_ds = build_dataset(series[2:], window=20, normalization=train_ds.normalization, weights=train_ds.weights)
        assert not (set(train_ds.source_logs) & set(val_ds.source_logs))


def test_bin_mean_matches_unify_accumulation(rng):
    values = rng.standard_normal((23, 4))
    sums = np.array([np.bincount(np.zeros(23, dtype=np.intp), weights=values[:, c])[0] for c in range(4)])
    np.testing.assert_array_equal(bin_mean(values), sums / 23)


def test_normalization_guard():
    with pytest.raises(ConfigError):
        Normalization(mean=np.zeros(3), std=np.array([1.0, 0.0, 1.0]))
