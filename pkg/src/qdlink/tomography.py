"""Polarization analysis, coincidence histograms and two-qubit state reconstruction."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .cascade import NOISE_PULSE, Origin, Records
from .qmath import (
    IDENTITY2,
    apply_local_unitary,
    bell_state,
    concurrence,
    fidelity_to_state,
    su2,
)

_S = 1 / math.sqrt(2)
_KETS = {
    "H": np.array([1, 0], dtype=complex),
    "V": np.array([0, 1], dtype=complex),
    "D": np.array([_S, _S], dtype=complex),
    "A": np.array([_S, -_S], dtype=complex),
    "R": np.array([_S, -1j * _S], dtype=complex),
    "L": np.array([_S, 1j * _S], dtype=complex),
}
LABELS = tuple(_KETS)


class TomographyError(RuntimeError):
    pass


class DegenerateCountsError(TomographyError):
    pass


class AlignmentError(TomographyError):
    pass


def projector_vector(label: str) -> np.ndarray:
    try:
        return _KETS[label].copy()
    except KeyError:
        raise ValueError(f"unknown polarization label {label!r}; expected one of {LABELS}") from None


def orthogonal(k: np.ndarray) -> np.ndarray:
    """The single-qubit state orthogonal to ``k`` (the other PBS port)."""
    return np.array([-np.conj(k[1]), np.conj(k[0])])


@dataclass(frozen=True)
class MeasurementSetting:
    projector_xx: str
    projector_x: str

    def __post_init__(self):
        for label in (self.projector_xx, self.projector_x):
            if label not in _KETS:
                raise ValueError(f"unknown polarization label {label!r}")

    @classmethod
    def parse(cls, text: str) -> MeasurementSetting:
        if len(text) != 2:
            raise ValueError(f"setting label must have two letters, got {text!r}")
        return cls(text[0], text[1])

    @property
    def label(self) -> str:
        return self.projector_xx + self.projector_x

    @property
    def ket(self) -> np.ndarray:
        return np.kron(_KETS[self.projector_xx], _KETS[self.projector_x])

    def __str__(self) -> str:
        return self.label


# James, Kwiat, Munro & White ordering
JAMES_16 = tuple(
    MeasurementSetting.parse(s)
    for s in ("HH", "HV", "VV", "VH", "RH", "RV", "DV", "DH", "DR", "DD", "RD", "HD", "VD", "VL", "HL", "RL")
)
FULL_36 = tuple(MeasurementSetting(a, b) for a in "HVDARL" for b in "HVDARL")
SETTING_SETS = {"james16": JAMES_16, "full36": FULL_36}


def setting_kets(settings: Sequence[MeasurementSetting]) -> np.ndarray:
    return np.array([s.ket for s in settings])


# --- analyzer ------------------------------------------------------------------

FrameFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class PairStates:
    """Polarization state of each emitted pair, keyed by pulse index.

    A pair is described by its cascade phase and the source coherence; the
    optional frame callables return, per pulse index, the (n, 2, 2) unitary
    the channel applied to that arm's photon.
    """

    pulse_index: np.ndarray
    phase: np.ndarray
    coherence: float = 1.0
    frame_xx: FrameFn | None = None
    frame_x: FrameFn | None = None

    def phases_for(self, pulses: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.pulse_index, pulses)
        if np.any(pos >= len(self.pulse_index)) or np.any(self.pulse_index[np.minimum(pos, len(self.pulse_index) - 1)] != pulses):
            raise KeyError("pulse index without a recorded pair")
        return self.phase[pos]


def joint_probabilities(a, b, phase, coherence, u_xx=None, u_x=None):
    """Joint pass probabilities of the two analyzers.

    Returns (p_both, p_xx_only, p_x_only) for kets ``a`` (XX arm) and ``b``
    (X arm) acting on pairs in the state
    1/2 (|HH><HH| + |VV><VV| + c e^{-i phase} |HH><VV| + h.c.)
    after the channel unitaries.
    """
    phase = np.asarray(phase, float)
    n = phase.shape[0]

    def rotated(k, u):
        if u is None:
            return np.broadcast_to(k, (n, 2))
        return np.einsum("nji,j->ni", u.conj(), k)  # U^dagger k

    def prob(ka, kb):
        ka, kb = rotated(ka, u_xx), rotated(kb, u_x)
        c_hh = np.conj(ka[:, 0] * kb[:, 0])
        c_vv = np.conj(ka[:, 1] * kb[:, 1])
        p = 0.5 * (np.abs(c_hh) ** 2 + np.abs(c_vv) ** 2) + coherence * np.real(np.exp(-1j * phase) * c_hh * np.conj(c_vv))
        return np.clip(p, 0.0, 1.0)

    a_perp, b_perp = orthogonal(a), orthogonal(b)
    return prob(a, b), prob(a, b_perp), prob(a_perp, b)


def analyze_polarization(
    records_xx: Records,
    records_x: Records,
    pair_states: PairStates,
    setting: MeasurementSetting,
    rng: np.random.Generator,
) -> tuple[Records, Records]:
    """Pass records through one waveplate/PBS analyzer per arm.

    Pairs with both photons present are sampled jointly from the Born rule;
    a signal photon whose partner is missing and converter-noise photons pass
    with probability 1/2; detector dark counts are not polarized and always pass.
    """
    a = _KETS[setting.projector_xx]
    b = _KETS[setting.projector_x]

    pass_xx = rng.random(len(records_xx)) < 0.5
    pass_x = rng.random(len(records_x)) < 0.5
    pass_xx |= records_xx.origin == Origin.DARK
    pass_x |= records_x.origin == Origin.DARK

    sig_xx = np.flatnonzero(records_xx.pulse_index != NOISE_PULSE)
    sig_x = np.flatnonzero(records_x.pulse_index != NOISE_PULSE)
    common, ixx, ix = np.intersect1d(
        records_xx.pulse_index[sig_xx], records_x.pulse_index[sig_x], assume_unique=True, return_indices=True
    )
    if len(common):
        phase = pair_states.phases_for(common)
        u_xx = pair_states.frame_xx(common) if pair_states.frame_xx else None
        u_x = pair_states.frame_x(common) if pair_states.frame_x else None
        p11, p10, p01 = joint_probabilities(a, b, phase, pair_states.coherence, u_xx, u_x)
        u = rng.random(len(common))
        both = u < p11
        only_xx = (u >= p11) & (u < p11 + p10)
        only_x = (u >= p11 + p10) & (u < p11 + p10 + p01)
        pass_xx[sig_xx[ixx]] = both | only_xx
        pass_x[sig_x[ix]] = both | only_x
    return records_xx.select(pass_xx), records_x.select(pass_x)


# --- coincidences -------------------------------------------------------------


def match_coincidences(t_xx: np.ndarray, t_x: np.ndarray, start: float, span: float):
    """Greedy time-ordered matching of XX starts to X stops.

    Each XX click, in time order, takes the earliest still-unmatched X click
    whose delay lies in [start, start + span). Solved as XX-proposing deferred
    acceptance where every X click prefers the earliest XX click; with this
    common ordering the stable matching is exactly the greedy one.
    Returns index arrays (i_xx, i_x).
    """
    t_xx = np.asarray(t_xx, float)
    t_x = np.asarray(t_x, float)
    n_xx, n_x = len(t_xx), len(t_x)
    if n_xx == 0 or n_x == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    ptr = np.searchsorted(t_x, t_xx + start, side="left")
    limit = t_xx + start + span
    holder = np.full(n_x, n_xx, dtype=np.int64)  # n_xx means free
    active = np.flatnonzero((ptr < n_x) & (t_x[np.minimum(ptr, n_x - 1)] < limit))
    while len(active):
        targets = ptr[active]
        best = np.full(n_x, n_xx, dtype=np.int64)
        np.minimum.at(best, targets, active)
        touched = np.unique(targets)
        winner = np.minimum(best[touched], holder[touched])
        bumped_holders = holder[touched][(holder[touched] < n_xx) & (holder[touched] != winner)]
        holder[touched] = winner
        lost = active[holder[targets] != active]
        rejected = np.concatenate([lost, bumped_holders])
        ptr[rejected] += 1
        ok = (ptr[rejected] < n_x) & (t_x[np.minimum(ptr[rejected], n_x - 1)] < limit[rejected])
        active = rejected[ok]
    matched_x = np.flatnonzero(holder < n_xx)
    i_xx = holder[matched_x]
    order = np.argsort(i_xx, kind="stable")
    return i_xx[order], matched_x[order]


def greedy_match_reference(t_xx, t_x, start, span):
    """Straightforward sequential greedy matching; kept as a test oracle."""
    used = np.zeros(len(t_x), bool)
    out_xx, out_x = [], []
    for i, t in enumerate(t_xx):
        lo, hi = t + start, t + start + span  # absolute bounds, as in the vectorized version
        for j in range(len(t_x)):
            if not used[j] and lo <= t_x[j] < hi:
                used[j] = True
                out_xx.append(i)
                out_x.append(j)
                break
    return np.array(out_xx, np.int64), np.array(out_x, np.int64)


def prune_unmatchable(records_x: Records, t_xx: np.ndarray, start: float, span: float, keep_before=None, keep_after=None) -> Records:
    """Drop X records that lie outside every XX coincidence window.

    Such records can never be matched, so removing them leaves the
    coincidence set unchanged. Records with timestamps below ``keep_before``
    or at/after ``keep_after`` are always kept (chunk boundaries).
    """
    t = records_x.timestamp
    j = np.searchsorted(t_xx, t - start, side="right") - 1
    keep = (j >= 0) & (t < t_xx[np.maximum(j, 0)] + start + span) if len(t_xx) else np.zeros(len(t), bool)
    if keep_before is not None:
        keep |= t < keep_before
    if keep_after is not None:
        keep |= t >= keep_after
    return records_x.select(keep)


@dataclass
class CoincidenceHistogram:
    setting: MeasurementSetting
    bin_width: float
    delay_start: float
    counts: np.ndarray
    total_singles_xx: int = 0
    total_singles_x: int = 0
    true_counts: np.ndarray | None = None  # diagnostic: same-pulse signal pairs

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def edges(self) -> np.ndarray:
        return self.delay_start + self.bin_width * np.arange(self.n_bins + 1)

    @property
    def centers(self) -> np.ndarray:
        return self.delay_start + self.bin_width * (np.arange(self.n_bins) + 0.5)


def n_bins_for(t_rep_ps: float, bin_width: float) -> int:
    return int(math.ceil(t_rep_ps / bin_width - 1e-9))


def coincidence_histogram(
    records_xx: Records,
    records_x: Records,
    setting: MeasurementSetting,
    t_rep_ps: float,
    bin_width: float = 8.0,
    delay_start: float = 0.0,
    singles: tuple[int, int] | None = None,
) -> CoincidenceHistogram:
    """Bin greedy XX-X coincidences with delay in [delay_start, delay_start + t_rep)."""
    i_xx, i_x = match_coincidences(records_xx.timestamp, records_x.timestamp, delay_start, t_rep_ps)
    delay = records_x.timestamp[i_x] - records_xx.timestamp[i_xx]
    n_bins = n_bins_for(t_rep_ps, bin_width)
    idx = np.floor((delay - delay_start) / bin_width).astype(np.int64)
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    same = (records_xx.pulse_index[i_xx] == records_x.pulse_index[i_x]) & (records_xx.pulse_index[i_xx] != NOISE_PULSE)
    true_counts = np.bincount(idx[same], minlength=n_bins).astype(np.int64)
    if singles is None:
        singles = (len(records_xx), len(records_x))
    return CoincidenceHistogram(setting, bin_width, delay_start, counts, int(singles[0]), int(singles[1]), true_counts)


def simulate_setting(
    records_xx: Records,
    records_x: Records,
    pair_states: PairStates,
    setting: MeasurementSetting,
    coincidence_window: float,
    rng: np.random.Generator,
    bin_width: float = 8.0,
    delay_start: float = 0.0,
) -> CoincidenceHistogram:
    """Analyze both (time-sorted) streams for one setting and histogram the coincidences."""
    xx, x = analyze_polarization(records_xx, records_x, pair_states, setting, rng)
    return coincidence_histogram(xx, x, setting, coincidence_window, bin_width, delay_start)


@dataclass
class HistogramSet:
    """Per-setting coincidence histograms sharing one delay binning."""

    histograms: list[CoincidenceHistogram]
    t_rep_ps: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.histograms:
            raise ValueError("empty histogram set")
        h0 = self.histograms[0]
        for h in self.histograms:
            if h.bin_width != h0.bin_width or h.delay_start != h0.delay_start or h.n_bins != h0.n_bins:
                raise ValueError("histograms do not share a binning")

    @property
    def settings(self) -> list[MeasurementSetting]:
        return [h.setting for h in self.histograms]

    @property
    def bin_width(self) -> float:
        return self.histograms[0].bin_width

    @property
    def delay_start(self) -> float:
        return self.histograms[0].delay_start

    @property
    def centers(self) -> np.ndarray:
        return self.histograms[0].centers

    def matrix(self) -> np.ndarray:
        """Counts as an array of shape (n_settings, n_bins)."""
        return np.array([h.counts for h in self.histograms])

    def window_mask(self, center: float, width: float) -> np.ndarray:
        c = self.centers
        return (c >= center - width / 2) & (c < center + width / 2)

    def window_counts(self, center: float, width: float) -> np.ndarray:
        mask = self.window_mask(center, width)
        if not mask.any():
            raise ValueError(f"window {center}+-{width / 2} ps contains no bins")
        return self.matrix()[:, mask].sum(axis=1)

    def rebinned(self, factor: int) -> HistogramSet:
        if factor < 1:
            raise ValueError("rebin factor must be >= 1")
        if factor == 1:
            return self
        out = []
        for h in self.histograms:
            n = int(math.ceil(h.n_bins / factor))
            pad = n * factor - h.n_bins

            def fold(arr):
                return np.concatenate([arr, np.zeros(pad, arr.dtype)]).reshape(n, factor).sum(axis=1)

            out.append(
                CoincidenceHistogram(
                    h.setting,
                    h.bin_width * factor,
                    h.delay_start,
                    fold(h.counts),
                    h.total_singles_xx,
                    h.total_singles_x,
                    None if h.true_counts is None else fold(h.true_counts),
                )
            )
        return HistogramSet(out, self.t_rep_ps, dict(self.metadata))

    def subtract_accidentals(self, before: float = -150.0) -> HistogramSet:
        """Subtract each setting's mean per-bin count over delays below ``before`` ps."""
        side = self.centers < before
        if not side.any():
            raise ValueError("no negative-delay sideband bins available")
        out = []
        for h in self.histograms:
            level = h.counts[side].mean()
            counts = np.clip(np.rint(h.counts - level), 0, None).astype(np.int64)
            out.append(CoincidenceHistogram(h.setting, h.bin_width, h.delay_start, counts, h.total_singles_xx, h.total_singles_x, h.true_counts))
        return HistogramSet(out, self.t_rep_ps, dict(self.metadata, accidentals_subtracted=True))

    def to_json(self) -> dict:
        return {
            "settings": [h.setting.label for h in self.histograms],
            "bin_width_ps": self.bin_width,
            "delay_start_ps": self.delay_start,
            "t_rep_ps": self.t_rep_ps,
            "bins": [h.counts.tolist() for h in self.histograms],
            "true_bins": [None if h.true_counts is None else h.true_counts.tolist() for h in self.histograms],
            "singles_xx": [h.total_singles_xx for h in self.histograms],
            "singles_x": [h.total_singles_x for h in self.histograms],
            "metadata": self.metadata,
        }

    @classmethod
    def from_json(cls, doc: dict) -> HistogramSet:
        hists = []
        true_bins = doc.get("true_bins") or [None] * len(doc["settings"])
        for label, bins, tb, sxx, sx in zip(doc["settings"], doc["bins"], true_bins, doc["singles_xx"], doc["singles_x"]):
            hists.append(
                CoincidenceHistogram(
                    MeasurementSetting.parse(label),
                    float(doc["bin_width_ps"]),
                    float(doc["delay_start_ps"]),
                    np.asarray(bins, np.int64),
                    int(sxx),
                    int(sx),
                    None if tb is None else np.asarray(tb, np.int64),
                )
            )
        return cls(hists, float(doc["t_rep_ps"]), doc.get("metadata", {}))

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> HistogramSet:
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def expected_histograms(
    rho_of_delay: Callable[[float], np.ndarray],
    envelope: Callable[[np.ndarray], np.ndarray],
    settings: Sequence[MeasurementSetting],
    t_rep_ps: float,
    bin_width: float = 8.0,
    delay_start: float = 0.0,
    noise_per_bin: float = 0.0,
    as_float: bool = True,
) -> HistogramSet:
    """Noise-free histograms from an analytic state and coincidence envelope.

    Bin ``k`` of setting ``s`` holds envelope(t_k) * <s|rho(t_k)|s> plus
    ``noise_per_bin`` * 1/4 unpolarized background, evaluated at the bin center.
    """
    n_bins = n_bins_for(t_rep_ps, bin_width)
    centers = delay_start + bin_width * (np.arange(n_bins) + 0.5)
    kets = setting_kets(settings)
    env = np.asarray(envelope(centers), float)
    probs = np.zeros((len(settings), n_bins))
    for k, t in enumerate(centers):
        if env[k] > 0:
            rho = rho_of_delay(t)
            probs[:, k] = np.real(np.einsum("si,ij,sj->s", kets.conj(), rho, kets))
    counts = probs * env + noise_per_bin / 4.0
    if not as_float:
        counts = np.rint(counts).astype(np.int64)
    hists = [CoincidenceHistogram(s, bin_width, delay_start, counts[i]) for i, s in enumerate(settings)]
    return HistogramSet(hists, t_rep_ps, {"source": "analytic"})


# --- reconstruction ---------------------------------------------------------------

_PAULIS = [IDENTITY2, np.array([[0, 1], [1, 0]], complex), np.array([[0, -1j], [1j, 0]]), np.array([[1, 0], [0, -1]], complex)]
_PAULI_BASIS = np.array([np.kron(a, b) for a in _PAULIS for b in _PAULIS])


def design_matrix(settings: Sequence[MeasurementSetting]) -> np.ndarray:
    kets = setting_kets(settings)
    return np.real(np.einsum("si,mij,sj->sm", kets.conj(), _PAULI_BASIS, kets))


def linear_inversion(counts, settings: Sequence[MeasurementSetting]) -> np.ndarray:
    """Least-squares Born-rule inversion; Hermitian and unit trace, not necessarily PSD."""
    counts = np.asarray(counts, float)
    a = design_matrix(settings)
    if np.linalg.matrix_rank(a) < 16:
        raise TomographyError("measurement settings are not tomographically complete")
    coef, *_ = np.linalg.lstsq(a, counts, rcond=None)
    m = np.einsum("m,mij->ij", coef, _PAULI_BASIS)
    tr = np.trace(m).real
    if tr <= 0:
        raise DegenerateCountsError("linear inversion produced a non-positive trace")
    m = m / tr
    return (m + m.conj().T) / 2


def psd_projection(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.conj().T) / 2)
    w = np.clip(w, 0, None)
    rho = (v * w) @ v.conj().T
    return rho / np.trace(rho).real


_TRIL = np.tril_indices(4, -1)
_DIAG = np.diag_indices(4)


def params_to_t(x: np.ndarray) -> np.ndarray:
    """16 reals -> lower-triangular T with real diagonal."""
    t = np.zeros((4, 4), dtype=complex)
    t[_DIAG] = x[:4]
    t[_TRIL] = x[4:10] + 1j * x[10:16]
    return t


def t_to_params(t: np.ndarray) -> np.ndarray:
    return np.concatenate([t[_DIAG].real, t[_TRIL].real, t[_TRIL].imag])


def t_from_rho(rho: np.ndarray) -> np.ndarray:
    """Lower-triangular T with T^dagger T = rho (rho positive definite)."""
    j = np.eye(4)[::-1]
    low = np.linalg.cholesky(j @ rho @ j)
    return j @ low.conj().T @ j


def rho_from_t(t: np.ndarray) -> np.ndarray:
    m = t.conj().T @ t
    return m / np.trace(m).real


@dataclass
class TomographyResult:
    rho: np.ndarray
    log_likelihood: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)
    total_counts: float = 0.0


def mle_reconstruct(
    counts,
    settings: Sequence[MeasurementSetting],
    max_iter: int = 100_000,
    gtol: float = 1e-8,
    xtol: float = 1e-10,
) -> TomographyResult:
    """Poisson maximum-likelihood state estimate over rho = T^dagger T / tr.

    The intensity is free (no singles normalization), so the expected count of
    setting i is <k_i|T^dagger T|k_i>. Counts may be non-integer (analytic input).
    """
    counts = np.asarray(counts, float)
    if counts.shape != (len(settings),):
        raise ValueError("need one count per setting")
    if np.any(counts < 0):
        raise ValueError("counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise DegenerateCountsError("all coincidence counts are zero")
    kets = setting_kets(settings)

    try:
        rho0 = psd_projection(linear_inversion(counts, settings))
    except DegenerateCountsError:
        rho0 = np.eye(4) / 4
    rho0 = (1 - 1e-3) * rho0 + 1e-3 * np.eye(4) / 4
    scale = total / np.real(np.einsum("si,ij,sj->", kets.conj(), rho0, kets))
    x0 = t_to_params(t_from_rho(rho0))
    positive = counts > 0
    const = np.sum(gammaln(counts + 1))

    # Poisson deviance sum(mu - n - n log(mu / n)) / N: same optimum as the
    # likelihood but close to zero there, which keeps the stopping test sharp
    saturated = np.sum(counts[positive] * np.log(counts[positive])) - total

    def objective(x):
        t = params_to_t(x)
        tk = kets @ t.T  # rows: T|k_i>
        mu = scale * np.sum(np.abs(tk) ** 2, axis=1)
        dev = np.sum(mu - counts) - np.sum(counts[positive] * np.log(mu[positive] / counts[positive] + 1e-300))
        w = scale * (np.where(positive, counts / np.maximum(mu, 1e-300), 0.0) - 1.0)
        grad_t = (tk * w[:, None]).T @ kets.conj()  # d loglik / d conj(T)
        g = 2 * np.concatenate([grad_t[_DIAG].real, grad_t[_TRIL].real, grad_t[_TRIL].imag])
        return dev / total, -g / total

    def loglik(f):
        return saturated - f * total - const

    history: list[float] = []
    steps: list[float] = []
    last = [x0.copy()]

    def callback(xk):
        history.append(loglik(objective(xk)[0]))
        steps.append(float(np.linalg.norm(xk - last[0])))
        last[0] = xk.copy()

    res = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        callback=callback,
        options={"maxiter": max_iter, "maxfun": 10 * max_iter, "gtol": gtol, "ftol": 0.0, "maxcor": 30},
    )
    f, g = objective(res.x)
    grad_ok = float(np.linalg.norm(g)) < gtol
    step_ok = bool(steps) and steps[-1] < xtol
    converged = bool(grad_ok or step_ok or (res.success and res.nit < max_iter))
    rho = rho_from_t(params_to_t(res.x))
    return TomographyResult(rho, float(loglik(f)), int(res.nit), converged, history, float(total))


# --- basis alignment ---------------------------------------------------------------


def _pattern_search(fun, x0, step=0.5, tol=1e-4, max_evals=20_000):
    """Compass search maximizing ``fun``; stops once the step falls below ``tol``."""
    x = np.array(x0, float)
    best = fun(x)
    evals = 1
    n = len(x)
    while step >= tol and evals < max_evals:
        improved = False
        for i in range(n):
            for sign in (1.0, -1.0):
                trial = x.copy()
                trial[i] += sign * step
                val = fun(trial)
                evals += 1
                if val > best + 1e-15:
                    x, best, improved = trial, val, True
                    break
        if not improved:
            step /= 2
    return x, best


def _canonical(u: np.ndarray) -> np.ndarray:
    """Remove the global phase: unit determinant and Re(trace) >= 0."""
    u = u / np.sqrt(np.linalg.det(u))
    if np.trace(u).real < 0:
        u = -u
    return u


def align_basis(
    histograms: HistogramSet,
    window_center: float = 0.0,
    window_width: float = 8.0,
    min_counts: int = 100,
    min_concurrence: float = 0.2,
    target: str = "phi_plus",
) -> tuple[np.ndarray, np.ndarray]:
    """Local unitaries that rotate the zero-delay state onto the analyzer frame.

    Concurrence is invariant under local unitaries, so the entanglement
    estimate that is maximized is the fidelity to ``target``. Returns
    (u_a, u_b), to be applied with :func:`apply_local_unitary`.
    """
    counts = histograms.window_counts(window_center, window_width)
    if counts.sum() < min_counts:
        raise AlignmentError(f"only {int(counts.sum())} coincidences in the alignment window (need >= {min_counts})")
    rho = mle_reconstruct(counts, histograms.settings).rho
    c0 = concurrence(rho)
    if c0 < min_concurrence:
        raise AlignmentError(f"zero-delay state not entangled enough to align (concurrence {c0:.3f} < {min_concurrence})")
    psi = bell_state(target)

    def score(angles_a, angles_b):
        r = apply_local_unitary(rho, su2(*angles_a), su2(*angles_b))
        return fidelity_to_state(r, psi)

    grid = [np.array(g) for g in np.stack(np.meshgrid(*[np.linspace(-np.pi / 2, np.pi / 2, 3)] * 3, indexing="ij"), -1).reshape(-1, 3)]
    zero = np.zeros(3)
    # one arm at a time from a 3x3x3 restart grid, then a joint polish
    best_a, val_a = max((_pattern_search(lambda x: score(x, zero), g) for g in [zero] + grid), key=lambda r: r[1])
    best_b, _ = max((_pattern_search(lambda x: score(best_a, x), g) for g in [zero] + grid), key=lambda r: r[1])
    joint, _ = _pattern_search(lambda x: score(x[:3], x[3:]), np.concatenate([best_a, best_b]), step=0.05)
    return _canonical(su2(*joint[:3])), _canonical(su2(*joint[3:]))
