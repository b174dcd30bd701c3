import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qdlink.cascade import (
    BINARY_DTYPE,
    NOISE_PULSE,
    Arm,
    DetectorConfig,
    Origin,
    PairEvents,
    Records,
    SourceConfig,
    block_pulses,
    detect,
    detect_stream,
    generate_pairs,
    photons_from_pairs,
    read_events_binary,
    read_events_text,
    write_events_binary,
    write_events_text,
)
from qdlink.qmath import CascadeParams


def source(p=1.0, seed=0):
    return SourceConfig(pair_probability=p, seed=seed)


class TestSourceConfig:
    def test_defaults_consistent(self):
        cfg = SourceConfig()
        assert cfg.t_rep_ps == pytest.approx(3278.688, abs=1e-3)

    def test_inconsistent_period(self):
        with pytest.raises(ValueError, match="inconsistent"):
            SourceConfig(excitation_rate=300.0)

    def test_matching_custom_rate(self):
        SourceConfig(excitation_rate=80.0, cascade=CascadeParams(t_rep=12.5))

    @pytest.mark.parametrize("kw", [{"pair_probability": 1.5}, {"excitation_rate": -1.0}, {"coherence": 2.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SourceConfig(**kw)


class TestGeneratePairs:
    def test_zero_probability(self):
        assert len(generate_pairs(source(0.0), 10_000)) == 0

    def test_every_pulse_at_unit_probability(self):
        pairs = generate_pairs(source(1.0), 5000)
        np.testing.assert_array_equal(pairs.pulse_index, np.arange(5000))

    def test_bad_pulse_count(self):
        with pytest.raises(ValueError):
            generate_pairs(source(), 0)

    def test_mean_delay(self):
        pairs = generate_pairs(source(1.0, seed=3), 1_000_000)
        n = len(pairs)
        assert abs(pairs.delay.mean() - 171.0) < 3 * 171.0 / np.sqrt(n)

    def test_delay_exponential_fit(self):
        d = generate_pairs(source(1.0, seed=4), 1_000_000).delay
        counts, edges = np.histogram(d, bins=60, range=(0, 600))
        centers = (edges[:-1] + edges[1:]) / 2
        slope, _ = np.polyfit(centers, np.log(counts), 1, w=np.sqrt(counts))
        assert -1 / slope == pytest.approx(171.0, rel=0.02)

    def test_ordering(self):
        cfg = source(0.3, seed=5)
        pairs = generate_pairs(cfg, 100_000)
        assert np.all(pairs.t_x >= pairs.t_xx)
        assert np.all(pairs.t_xx >= pairs.pulse_index * cfg.t_rep_ps)
        assert np.all(np.diff(pairs.pulse_index) > 0)

    def test_rate(self):
        pairs = generate_pairs(source(0.25, seed=6), 400_000)
        n = 400_000
        assert abs(len(pairs) - 0.25 * n) < 4 * np.sqrt(n * 0.25 * 0.75)

    def test_deterministic(self):
        a = generate_pairs(source(0.1, seed=9), 200_000)
        b = generate_pairs(source(0.1, seed=9), 200_000)
        for f in ("pulse_index", "t_xx", "t_x"):
            assert np.array_equal(getattr(a, f), getattr(b, f))

    def test_seed_matters(self):
        a = generate_pairs(source(0.1, seed=1), 100_000)
        b = generate_pairs(source(0.1, seed=2), 100_000)
        assert not np.array_equal(a.pulse_index, b.pulse_index)

    def test_streams_independent(self):
        a = generate_pairs(source(0.1), 100_000, stream=0)
        b = generate_pairs(source(0.1), 100_000, stream=1)
        assert not np.array_equal(a.pulse_index, b.pulse_index)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 3_000_000), min_size=1, max_size=4), st.sampled_from([1.0, 0.3, 0.01]))
    def test_partition_invariance(self, sizes, p):
        cfg = source(p, seed=17)
        total = sum(sizes)
        whole = generate_pairs(cfg, total)
        parts, start = [], 0
        for n in sizes:
            parts.append(generate_pairs(cfg, n, first_pulse=start))
            start += n
        joined = PairEvents.concatenate(parts)
        for f in ("pulse_index", "t_xx", "t_x"):
            assert np.array_equal(getattr(whole, f), getattr(joined, f))

    def test_iteration(self):
        pairs = generate_pairs(source(1.0), 3)
        events = list(pairs)
        assert [e.pulse_index for e in events] == [0, 1, 2]
        assert events[0].delay == pytest.approx(events[0].t_x - events[0].t_xx)

    def test_block_size(self):
        for p in (1.0, 0.5, 1e-3, 1e-6):
            b = block_pulses(p)
            assert b & (b - 1) == 0
        assert block_pulses(1.0) == 1 << 18


class TestDetect:
    def test_ideal_detector_is_identity(self):
        pairs = generate_pairs(source(0.5, seed=1), 20_000)
        xx, x = detect(pairs, DetectorConfig(), DetectorConfig(), 1e-6, np.random.default_rng(0))
        np.testing.assert_array_equal(xx.timestamp, pairs.t_xx)
        np.testing.assert_array_equal(x.timestamp, pairs.t_x)

    def test_efficiency(self):
        n = 1_000_000
        rec = Records.noise(Arm.X, np.arange(n, dtype=float), Origin.SIGNAL)
        out = detect_stream(rec, DetectorConfig(efficiency=0.85), 0, n, np.random.default_rng(2))
        assert abs(len(out) - 0.85 * n) < 3 * np.sqrt(n * 0.85 * 0.15)

    def test_irf(self):
        n = 200_000
        t = np.arange(n, dtype=float) * 1e4 + 1e3
        rec = Records(Arm.XX, t, np.arange(n), np.zeros(n, np.uint8))
        out = detect_stream(rec, DetectorConfig(irf_fwhm=58.0), 0, t[-1], np.random.default_rng(3))
        order = np.argsort(out.pulse_index)
        jitter = out.timestamp[order] - t
        assert jitter.std() == pytest.approx(24.63, rel=0.02)

    def test_dark_counts(self):
        rng = np.random.default_rng(4)
        out = detect_stream(Records.empty(Arm.X), DetectorConfig(dark_rate=1e6), 0, 1e12, rng)
        assert abs(len(out) - 1e6) < 5 * 1e3
        assert out.count(Origin.DARK) == len(out)
        assert np.all(out.pulse_index == NOISE_PULSE)
        assert np.all(np.diff(out.timestamp) >= 0)

    def test_detection_rate(self):
        cfg = source(1.0, seed=8)
        n = 500_000
        pairs = generate_pairs(cfg, n)
        duration = n * cfg.t_rep_ps * 1e-12
        xx, _ = detect(pairs, DetectorConfig(efficiency=0.85), DetectorConfig(), duration, np.random.default_rng(1))
        rate = len(xx) / duration
        expect = cfg.excitation_rate * 1e6 * 0.85
        assert abs(rate - expect) < 4 * np.sqrt(n * 0.85 * 0.15) / duration

    def test_no_negative_timestamps(self):
        rec = Records(Arm.XX, np.array([0.5, 1.0, 2.0]), np.arange(3), np.zeros(3, np.uint8))
        out = detect_stream(rec, DetectorConfig(irf_fwhm=100.0), 0, 10, np.random.default_rng(0))
        assert np.all(out.timestamp >= 0)

    @pytest.mark.parametrize("kw", [{"irf_fwhm": -1}, {"efficiency": 1.2}, {"dark_rate": -5}])
    def test_invalid_config(self, kw):
        with pytest.raises(ValueError):
            DetectorConfig(**kw)


class TestSerialization:
    def streams(self):
        pairs = generate_pairs(source(0.5, seed=2), 2000)
        xx, x = photons_from_pairs(pairs)
        dark = Records.noise(Arm.X, np.array([5.0, 77.125]), Origin.DARK)
        return xx, Records.concatenate(Arm.X, [x, dark]).sorted()

    def test_binary_layout(self):
        assert BINARY_DTYPE.itemsize == 18

    def test_binary_roundtrip(self, tmp_path):
        xx, x = self.streams()
        path = tmp_path / "ev.bin"
        write_events_binary(path, [xx, x])
        assert path.stat().st_size == 18 * (len(xx) + len(x))
        back = read_events_binary(path)
        for orig in (xx, x):
            got = back[orig.arm]
            np.testing.assert_allclose(got.timestamp, orig.timestamp, atol=1e-3)
            np.testing.assert_array_equal(got.pulse_index, orig.pulse_index)
            np.testing.assert_array_equal(got.origin, orig.origin)

    def test_binary_noise_marker(self, tmp_path):
        path = tmp_path / "ev.bin"
        write_events_binary(path, [Records.noise(Arm.XX, np.array([1.0]), Origin.CHANNEL_NOISE)])
        raw = np.frombuffer(path.read_bytes(), BINARY_DTYPE)
        assert raw["pulse_index"][0] == 2**64 - 1
        assert raw["timestamp_fs"][0] == 1000
        assert raw["origin"][0] == Origin.CHANNEL_NOISE

    def test_text_roundtrip(self, tmp_path):
        xx, x = self.streams()
        path = tmp_path / "ev.txt"
        write_events_text(path, [xx, x])
        first = path.read_text().splitlines()[:2]
        assert first[0].startswith("#")
        assert first[1].split()[0] in ("XX", "X")
        back = read_events_text(path)
        np.testing.assert_allclose(back[Arm.X].timestamp, x.timestamp, atol=1e-3)
        np.testing.assert_array_equal(back[Arm.X].origin, x.origin)
        np.testing.assert_array_equal(back[Arm.XX].pulse_index, xx.pulse_index)
