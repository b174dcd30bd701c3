"""Monte-Carlo photon-pair emission and detection for a pulsed cascade source.

Event streams are columnar: a :class:`PairEvents` or :class:`Records` object
holds one numpy array per field rather than one Python object per event.
Times are float64 picoseconds; pulse ``k`` fires at ``k * t_rep``.

Randomness is drawn from generators derived from a master seed and a key
tuple (see :func:`stream_rng`), so the same seed always reproduces the same
events no matter how a pulse range is split into chunks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .qmath import CascadeParams

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))  # 1/2.3548

# key prefixes for derived random streams
KEY_SOURCE = 0
KEY_STAGE = 1
KEY_DETECT = 2
KEY_ANALYZER = 3

NOISE_PULSE = -1
_U64_NOISE = np.uint64(2**64 - 1)


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``key`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


class Arm(IntEnum):
    XX = 0
    X = 1


class Origin(IntEnum):
    SIGNAL = 0
    DARK = 1
    CHANNEL_NOISE = 2


@dataclass(frozen=True)
class SourceConfig:
    """Pulsed two-photon-excitation source.

    ``coherence`` is the magnitude of the HH/VV coherence of an emitted pair
    relative to the ideal cascade state (1 = pure state).
    """

    excitation_rate: float = 305.0  # MHz
    pair_probability: float = 1.0
    cascade: CascadeParams = field(default_factory=CascadeParams)
    seed: int = 0
    coherence: float = 1.0

    def __post_init__(self):
        if not self.excitation_rate > 0:
            raise ValueError("excitation_rate must be positive")
        if not 0.0 <= self.pair_probability <= 1.0:
            raise ValueError("pair_probability must lie in [0, 1]")
        if not 0.0 <= self.coherence <= 1.0:
            raise ValueError("coherence must lie in [0, 1]")
        if abs(1000.0 / self.excitation_rate - self.cascade.t_rep) > 1e-6:
            raise ValueError(
                f"cascade.t_rep = {self.cascade.t_rep} ns is inconsistent with an excitation "
                f"rate of {self.excitation_rate} MHz (expected {1000.0 / self.excitation_rate:.9f} ns)"
            )

    @property
    def t_rep_ps(self) -> float:
        return self.cascade.t_rep_ps


class PairEvent(NamedTuple):
    pulse_index: int
    t_xx: float
    t_x: float
    delay: float


@dataclass(frozen=True)
class PairEvents:
    pulse_index: np.ndarray
    t_xx: np.ndarray
    t_x: np.ndarray

    @property
    def delay(self) -> np.ndarray:
        return self.t_x - self.t_xx

    def __len__(self) -> int:
        return len(self.pulse_index)

    def __iter__(self) -> Iterator[PairEvent]:
        for k, a, b in zip(self.pulse_index.tolist(), self.t_xx.tolist(), self.t_x.tolist()):
            yield PairEvent(k, a, b, b - a)

    def select(self, index) -> PairEvents:
        return PairEvents(self.pulse_index[index], self.t_xx[index], self.t_x[index])

    @classmethod
    def empty(cls) -> PairEvents:
        return cls(np.empty(0, np.int64), np.empty(0), np.empty(0))

    @classmethod
    def concatenate(cls, parts) -> PairEvents:
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.pulse_index for p in parts]),
            np.concatenate([p.t_xx for p in parts]),
            np.concatenate([p.t_x for p in parts]),
        )


@dataclass(frozen=True)
class DetectorConfig:
    irf_fwhm: float = 0.0  # ps
    efficiency: float = 1.0
    dark_rate: float = 0.0  # Hz

    def __post_init__(self):
        if self.irf_fwhm < 0:
            raise ValueError("irf_fwhm must be non-negative")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0:
            raise ValueError("dark_rate must be non-negative")

    @property
    def irf_sigma(self) -> float:
        return self.irf_fwhm * FWHM_TO_SIGMA


@dataclass(frozen=True)
class Records:
    """Photon or click records on one arm, columnar.

    ``pulse_index`` is -1 for records that do not belong to an emitted pair.
    """

    arm: Arm
    timestamp: np.ndarray
    pulse_index: np.ndarray
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.timestamp)

    def select(self, index) -> Records:
        return Records(self.arm, self.timestamp[index], self.pulse_index[index], self.origin[index])

    def sorted(self) -> Records:
        order = np.argsort(self.timestamp, kind="stable")
        return self.select(order)

    @classmethod
    def empty(cls, arm: Arm) -> Records:
        return cls(arm, np.empty(0), np.empty(0, np.int64), np.empty(0, np.uint8))

    @classmethod
    def noise(cls, arm: Arm, times: np.ndarray, origin: Origin) -> Records:
        n = len(times)
        return cls(arm, np.asarray(times, float), np.full(n, NOISE_PULSE, np.int64), np.full(n, int(origin), np.uint8))

    @classmethod
    def concatenate(cls, arm: Arm, parts) -> Records:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(arm)
        return cls(
            arm,
            np.concatenate([p.timestamp for p in parts]),
            np.concatenate([p.pulse_index for p in parts]),
            np.concatenate([p.origin for p in parts]),
        )

    def count(self, origin: Origin) -> int:
        return int(np.count_nonzero(self.origin == origin))


def block_pulses(pair_probability: float) -> int:
    """Pulses per generation block: a power of two holding ~2^18 expected pairs."""
    if pair_probability <= 0:
        return 1 << 30
    exponent = round(math.log2((1 << 18) / pair_probability))
    return 1 << min(max(exponent, 12), 40)


def _block_pairs(config: SourceConfig, block: int, size: int, stream: int) -> PairEvents:
    p = config.pair_probability
    if p == 0:
        return PairEvents.empty()
    rng = stream_rng(config.seed, KEY_SOURCE, stream, block)
    if p == 1:
        pos = np.arange(size, dtype=np.int64)
    else:
        # successive Bernoulli successes are geometric gaps apart
        mean = size * p
        chunks = []
        last = -1
        while last < size:
            gaps = rng.geometric(p, int(mean + 6 * math.sqrt(mean) + 16))
            pos = last + np.cumsum(gaps, dtype=np.int64)
            chunks.append(pos)
            last = int(pos[-1])
        pos = np.concatenate(chunks)
        pos = pos[pos < size]
    n = len(pos)
    pulse = pos + np.int64(block) * size
    t_pulse = pulse * config.t_rep_ps
    t_xx = t_pulse + rng.exponential(config.cascade.t1_xx, n)
    t_x = t_xx + rng.exponential(config.cascade.t1_x, n)
    return PairEvents(pulse, t_xx, t_x)


def iter_pair_blocks(config: SourceConfig, n_pulses: int, first_pulse: int = 0, stream: int = 0):
    """Yield ``(start, stop, pairs)`` for consecutive block-aligned pulse ranges."""
    if n_pulses <= 0:
        raise ValueError("n_pulses must be positive")
    size = block_pulses(config.pair_probability)
    end = first_pulse + n_pulses
    block = first_pulse // size
    while block * size < end:
        lo = max(first_pulse, block * size)
        hi = min(end, (block + 1) * size)
        pairs = _block_pairs(config, block, size, stream)
        keep = (pairs.pulse_index >= lo) & (pairs.pulse_index < hi)
        yield lo, hi, pairs.select(keep)
        block += 1


def generate_pairs(config: SourceConfig, n_pulses: int, first_pulse: int = 0, stream: int = 0) -> PairEvents:
    """Emit at most one pair per pulse with probability ``pair_probability``.

    The XX photon leaves after an exponential delay (T1_XX) from the pulse, the
    X photon after a further exponential delay (T1_X). ``stream`` selects an
    independent random stream under the same seed.
    """
    return PairEvents.concatenate(p for _, _, p in iter_pair_blocks(config, n_pulses, first_pulse, stream))


def photons_from_pairs(pairs: PairEvents) -> tuple[Records, Records]:
    n = len(pairs)
    origin = np.zeros(n, np.uint8)
    return (
        Records(Arm.XX, pairs.t_xx.copy(), pairs.pulse_index.copy(), origin),
        Records(Arm.X, pairs.t_x.copy(), pairs.pulse_index.copy(), origin.copy()),
    )


def poisson_times(rate_hz: float, t0_ps: float, t1_ps: float, rng: np.random.Generator) -> np.ndarray:
    """Arrival times of a homogeneous Poisson process on [t0, t1)."""
    if rate_hz <= 0 or t1_ps <= t0_ps:
        return np.empty(0)
    n = rng.poisson(rate_hz * (t1_ps - t0_ps) * 1e-12)
    return np.sort(rng.uniform(t0_ps, t1_ps, n))


def detect_stream(
    records: Records, det: DetectorConfig, t0_ps: float, t1_ps: float, rng: np.random.Generator
) -> Records:
    """Efficiency thinning, Gaussian timing jitter and dark counts on one arm.

    Clicks that land before t=0 after jitter are dropped. Output is time-sorted.
    """
    keep = rng.random(len(records)) < det.efficiency
    out = records.select(keep)
    if det.irf_fwhm > 0 and len(out):
        out = Records(out.arm, out.timestamp + rng.normal(0.0, det.irf_sigma, len(out)), out.pulse_index, out.origin)
    dark = Records.noise(records.arm, poisson_times(det.dark_rate, t0_ps, t1_ps, rng), Origin.DARK)
    out = Records.concatenate(records.arm, [out, dark]).sorted()
    if len(out) and out.timestamp[0] < 0:
        out = out.select(out.timestamp >= 0)
    return out


def detect(
    pairs: PairEvents,
    det_xx: DetectorConfig,
    det_x: DetectorConfig,
    duration: float,
    rng: np.random.Generator,
    start_ps: float = 0.0,
) -> tuple[Records, Records]:
    """Detect both photons of every pair; dark counts cover ``duration`` seconds."""
    xx, x = photons_from_pairs(pairs)
    t1 = start_ps + duration * 1e12
    return detect_stream(xx, det_xx, start_ps, t1, rng), detect_stream(x, det_x, start_ps, t1, rng)


# --- serialization -----------------------------------------------------------

BINARY_DTYPE = np.dtype([("arm", "<u1"), ("timestamp_fs", "<u8"), ("pulse_index", "<u8"), ("origin", "<u1")])
_ORIGIN_NAMES = {o: o.name.lower() for o in Origin}
_ORIGIN_BY_NAME = {v: k for k, v in _ORIGIN_NAMES.items()}


def _merged(streams) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    streams = list(streams)
    arm = np.concatenate([np.full(len(s), int(s.arm), np.uint8) for s in streams]) if streams else np.empty(0, np.uint8)
    ts = np.concatenate([s.timestamp for s in streams]) if streams else np.empty(0)
    pulse = np.concatenate([s.pulse_index for s in streams]) if streams else np.empty(0, np.int64)
    origin = np.concatenate([s.origin for s in streams]) if streams else np.empty(0, np.uint8)
    order = np.lexsort((arm, ts))
    return arm[order], ts[order], pulse[order], origin[order]


def _split(arm, ts, pulse, origin) -> dict[Arm, Records]:
    return {
        a: Records(a, ts[arm == a], pulse[arm == a].astype(np.int64), origin[arm == a].astype(np.uint8)) for a in Arm
    }


def write_events_binary(path, streams) -> None:
    """Little-endian packed records: u8 arm, u64 timestamp [fs], u64 pulse index, u8 origin.

    Non-pair records carry pulse index 2**64-1.
    """
    arm, ts, pulse, origin = _merged(streams)
    if np.any(ts < 0):
        raise ValueError("negative timestamps cannot be serialized")
    out = np.empty(len(ts), BINARY_DTYPE)
    out["arm"] = arm
    out["timestamp_fs"] = np.rint(ts * 1000.0).astype(np.uint64)
    out["pulse_index"] = np.where(pulse < 0, _U64_NOISE, pulse.astype(np.uint64))
    out["origin"] = origin
    Path(path).write_bytes(out.tobytes())


def read_events_binary(path) -> dict[Arm, Records]:
    raw = np.frombuffer(Path(path).read_bytes(), dtype=BINARY_DTYPE)
    pulse = np.where(raw["pulse_index"] == _U64_NOISE, NOISE_PULSE, raw["pulse_index"].astype(np.int64))
    return _split(raw["arm"], raw["timestamp_fs"].astype(np.float64) / 1000.0, pulse, raw["origin"])


def write_events_text(path, streams) -> None:
    """One record per line: arm, timestamp_ps, pulse_index, origin."""
    arm, ts, pulse, origin = _merged(streams)
    with open(path, "w") as fh:
        fh.write("# arm timestamp_ps pulse_index origin\n")
        for a, t, k, o in zip(arm.tolist(), ts.tolist(), pulse.tolist(), origin.tolist()):
            fh.write(f"{Arm(a).name} {t:.3f} {k} {_ORIGIN_NAMES[Origin(o)]}\n")


def read_events_text(path) -> dict[Arm, Records]:
    arm, ts, pulse, origin = [], [], [], []
    with open(path) as fh:
        for line in fh:
            if not line.strip() or line.startswith("#"):
                continue
            a, t, k, o = line.split()
            arm.append(Arm[a])
            ts.append(float(t))
            pulse.append(int(k))
            origin.append(_ORIGIN_BY_NAME[o])
    return _split(
        np.array(arm, np.uint8), np.array(ts, float), np.array(pulse, np.int64), np.array(origin, np.uint8)
    )
