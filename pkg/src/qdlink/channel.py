"""Photonic link stages acting on one arm's photon records.

Every stage is a stream transformer ``Records -> Records`` that owns the
generator it is handed. Polarization is only touched by :class:`DriftStage`,
which leaves the records alone and contributes a time-dependent unitary to
the arm's polarization frame (see :func:`arm_frame`).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Literal, Union

import numpy as np

from .cascade import Origin, Records, poisson_times
from .qmath import IDENTITY2, SIGMA_X, SIGMA_Y, SIGMA_Z

INHOMOGENEOUS_LINEWIDTH_GHZ = 5.6
HOMOGENEOUS_LINEWIDTH_GHZ = 1.3
VBG_BANDWIDTH_GHZ = 200.0


@dataclass(frozen=True)
class LossStage:
    loss_db: float
    label: str = "loss"

    def __post_init__(self):
        if not self.loss_db >= 0:
            raise ValueError("loss_db must be non-negative")

    @property
    def transmission(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)


@dataclass(frozen=True)
class QfcStage:
    """Polarization-preserving frequency converter.

    ``noise_rate`` (Hz) is the rate of background photons at the output
    wavelength; wavelengths are descriptive only.
    """

    efficiency: float
    noise_rate: float = 0.0
    direction: Literal["down", "up"] = "down"
    label: str = "qfc"
    input_nm: float | None = None
    output_nm: float | None = None
    pump_nm: float = 1607.0

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError("QFC efficiency must lie in (0, 1]")
        if self.noise_rate < 0:
            raise ValueError("noise_rate must be non-negative")
        if self.direction not in ("down", "up"):
            raise ValueError(f"direction must be 'down' or 'up', got {self.direction!r}")
        if self.input_nm is None:
            object.__setattr__(self, "input_nm", 780.0 if self.direction == "down" else 1515.0)
        if self.output_nm is None:
            object.__setattr__(self, "output_nm", 1515.0 if self.direction == "down" else 780.0)

    @property
    def transmission(self) -> float:
        return self.efficiency


@dataclass(frozen=True)
class DriftModel:
    correlation_time: float = 12.0  # hours
    step_angle_rms: float = 0.0  # rad per step
    seed: int = 0

    def __post_init__(self):
        if not self.correlation_time > 0:
            raise ValueError("correlation_time must be positive")
        if self.step_angle_rms < 0:
            raise ValueError("step_angle_rms must be non-negative")

    @property
    def step_seconds(self) -> float:
        return self.correlation_time * 3600.0 / 100.0


@dataclass(frozen=True)
class DriftStage:
    model: DriftModel
    label: str = "drift"

    @property
    def transmission(self) -> float:
        return 1.0


@dataclass(frozen=True)
class FilterStage:
    bandwidth_ghz: float
    inhomogeneous_ghz: float = INHOMOGENEOUS_LINEWIDTH_GHZ
    label: str = "filter"

    def __post_init__(self):
        if not self.bandwidth_ghz > 0:
            raise ValueError("bandwidth_ghz must be positive")
        if not self.inhomogeneous_ghz > 0:
            raise ValueError("inhomogeneous_ghz must be positive")

    @property
    def transmission(self) -> float:
        return min(1.0, self.bandwidth_ghz / self.inhomogeneous_ghz)

    @property
    def time_constant_ps(self) -> float:
        return 1000.0 / (2.0 * math.pi * self.bandwidth_ghz)


Stage = Union[LossStage, QfcStage, DriftStage, FilterStage]


def _thin(records: Records, p: float, rng: np.random.Generator) -> Records:
    if p >= 1.0:
        return records
    return records.select(rng.random(len(records)) < p)


def attenuate(records: Records, stage: LossStage, rng: np.random.Generator) -> Records:
    return _thin(records, stage.transmission, rng)


def apply_qfc(records: Records, stage: QfcStage, t0_ps: float, t1_ps: float, rng: np.random.Generator) -> Records:
    """Thin by conversion efficiency and add converter background on [t0, t1).

    Surviving records are returned untouched, so pair identity and hence the
    polarization state is carried through unchanged.
    """
    out = _thin(records, stage.efficiency, rng)
    noise = poisson_times(stage.noise_rate, t0_ps, t1_ps, rng)
    if len(noise) == 0:
        return out
    return Records.concatenate(records.arm, [out, Records.noise(records.arm, noise, Origin.CHANNEL_NOISE)]).sorted()


def filter_reshape(records: Records, stage: FilterStage, rng: np.random.Generator) -> Records:
    """Narrow-band filter: throughput loss plus a two-sided exponential time kernel."""
    out = _thin(records, stage.transmission, rng)
    if len(out) == 0:
        return out
    shifted = out.timestamp + rng.laplace(0.0, stage.time_constant_ps, len(out))
    return Records(out.arm, shifted, out.pulse_index, out.origin).sorted()


def apply_stage(stage: Stage, records: Records, t0_ps: float, t1_ps: float, rng: np.random.Generator) -> Records:
    if isinstance(stage, LossStage):
        return attenuate(records, stage, rng)
    if isinstance(stage, QfcStage):
        return apply_qfc(records, stage, t0_ps, t1_ps, rng)
    if isinstance(stage, FilterStage):
        return filter_reshape(records, stage, rng)
    if isinstance(stage, DriftStage):
        return records
    raise TypeError(f"unknown stage type {type(stage).__name__}")


# --- polarization drift ------------------------------------------------------

_PAULI = np.stack([SIGMA_X, SIGMA_Y, SIGMA_Z])


def _rotation(vec: np.ndarray) -> np.ndarray:
    """exp(-i (v . sigma) / 2) for an array of rotation vectors (n, 3)."""
    angle = np.linalg.norm(vec, axis=-1)
    axis = np.divide(vec, angle[:, None], out=np.zeros_like(vec), where=angle[:, None] > 0)
    gen = np.einsum("nk,kij->nij", axis, _PAULI)
    c = np.cos(angle / 2)[:, None, None]
    s = np.sin(angle / 2)[:, None, None]
    return c * IDENTITY2 - 1j * s * gen


@lru_cache(maxsize=64)
def _drift_table(seed: int, step_angle_rms: float, n_steps: int) -> np.ndarray:
    """Cumulative unitaries U_0..U_n with U_0 = identity."""
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7919,)))
    steps = rng.normal(0.0, step_angle_rms / math.sqrt(3.0), (n_steps, 3))
    table = np.empty((n_steps + 1, 2, 2), dtype=complex)
    table[0] = IDENTITY2
    rot = _rotation(steps)
    for k in range(n_steps):
        table[k + 1] = rot[k] @ table[k]
    return table


def _table_for(model: DriftModel, max_step: int) -> np.ndarray:
    # round table length up so neighbouring queries share a cached table;
    # random draws are sequential, so a longer table extends a shorter one
    n = 1 << max(10, int(max_step).bit_length())
    return _drift_table(model.seed, model.step_angle_rms, n)


def drift_unitaries(at_time, model: DriftModel) -> np.ndarray:
    """Drift unitaries for an array of times in seconds, shape (n, 2, 2)."""
    t = np.atleast_1d(np.asarray(at_time, dtype=float))
    if np.any(t < 0):
        raise ValueError("at_time must be non-negative")
    if model.step_angle_rms == 0:
        return np.broadcast_to(IDENTITY2, (len(t), 2, 2)).copy()
    steps = np.floor(t / model.step_seconds).astype(np.int64)
    table = _table_for(model, int(steps.max()) if len(steps) else 0)
    return table[steps]


def drift_unitary(at_time: float, model: DriftModel) -> np.ndarray:
    """Piecewise-constant random walk on SU(2); a new step every correlation_time/100."""
    return drift_unitaries([at_time], model)[0]


def arm_frame(stages, at_time_s) -> np.ndarray | None:
    """Product of all drift unitaries of an arm at the given times, or None if there are none."""
    frame = None
    for stage in stages:
        if isinstance(stage, DriftStage):
            u = drift_unitaries(at_time_s, stage.model)
            frame = u if frame is None else u @ frame
    return frame


def chain_transmission(stages) -> float:
    return float(np.prod([s.transmission for s in stages])) if stages else 1.0
