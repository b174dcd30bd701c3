"""Time-resolved fidelity and concurrence, windowed states and the oscillation fit."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .qmath import HBAR_UEV_NS, H_UEV_NS, apply_local_unitary, bell_state, concurrence, fidelity_to_state
from .tomography import DegenerateCountsError, HistogramSet, TomographyResult, mle_reconstruct

PHI_PLUS = bell_state("phi_plus")
PHI_MINUS = bell_state("phi_minus")

DEFAULT_MIN_COUNTS = 20


def windowed_rho(histograms: HistogramSet, center: float = 0.0, width: float = 8.0) -> TomographyResult:
    """MLE state from per-setting counts summed over bins centred in [center - width/2, center + width/2)."""
    counts = histograms.window_counts(center, width)
    return mle_reconstruct(counts, histograms.settings)


def full_period_rho(histograms: HistogramSet) -> TomographyResult:
    """Integrate over one repetition period (every bin of the histogram)."""
    return mle_reconstruct(histograms.matrix().sum(axis=1), histograms.settings)


@dataclass
class EntanglementCurve:
    centers: np.ndarray
    f_phi_plus: np.ndarray
    f_phi_minus: np.ndarray
    concurrence: np.ndarray
    counts: np.ndarray
    valid: np.ndarray
    bin_width: float
    intensity: np.ndarray | None = None  # state-independent pair counts per bin

    def __post_init__(self):
        n = len(self.centers)
        if self.intensity is None:
            self.intensity = np.asarray(self.counts, float)
        for name in ("f_phi_plus", "f_phi_minus", "concurrence", "counts", "valid", "intensity"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"curve field {name} has the wrong length")

    def measure(self, name: str) -> np.ndarray:
        if name not in ("f_phi_plus", "f_phi_minus", "concurrence"):
            raise ValueError(f"unknown measure {name!r}")
        return getattr(self, name)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_center_ps", "f_phi_plus", "f_phi_minus", "concurrence", "counts", "valid", "intensity"])
            for k in range(len(self.centers)):
                ok = bool(self.valid[k])
                vals = [f"{v[k]:.9f}" if ok else "nan" for v in (self.f_phi_plus, self.f_phi_minus, self.concurrence)]
                w.writerow([f"{self.centers[k]:.3f}", *vals, f"{self.counts[k]:.6g}", int(ok), f"{self.intensity[k]:.6g}"])

    @classmethod
    def read_csv(cls, path, bin_width: float | None = None) -> EntanglementCurve:
        data = np.genfromtxt(path, delimiter=",", names=True)
        centers = np.atleast_1d(data["bin_center_ps"])
        if bin_width is None:
            bin_width = float(centers[1] - centers[0]) if len(centers) > 1 else 8.0
        return cls(
            centers,
            np.atleast_1d(data["f_phi_plus"]),
            np.atleast_1d(data["f_phi_minus"]),
            np.atleast_1d(data["concurrence"]),
            np.atleast_1d(data["counts"]),
            np.atleast_1d(data["valid"]).astype(bool),
            bin_width,
            np.atleast_1d(data["intensity"]),
        )


def pair_intensity(histograms: HistogramSet) -> np.ndarray:
    """Per-bin counts summed over the complete H/V basis, which do not depend on the state.

    Without all four H/V settings, the all-setting total scaled by 4 / n_settings.
    """
    m = histograms.matrix().astype(float)
    labels = [s.label for s in histograms.settings]
    hv = [labels.index(x) for x in ("HH", "HV", "VH", "VV") if x in labels]
    if len(hv) == 4:
        return m[hv].sum(axis=0)
    return m.sum(axis=0) * 4.0 / len(labels)


def curve(
    histograms: HistogramSet, bin_width: float | None = None, min_counts: float = DEFAULT_MIN_COUNTS, frame=None
) -> EntanglementCurve:
    """Per-bin MLE reconstruction and Bell fidelities / concurrence.

    ``bin_width`` must be an integer multiple of the histogram bin width.
    Bins holding fewer than ``min_counts`` coincidences (all settings) are
    marked invalid and their measures left as NaN. ``frame`` is an optional
    pair of local unitaries (from basis alignment) applied to every state.
    """
    if bin_width is not None:
        factor = bin_width / histograms.bin_width
        if abs(factor - round(factor)) > 1e-9 or round(factor) < 1:
            raise ValueError(f"bin width {bin_width} ps is not a multiple of {histograms.bin_width} ps")
        histograms = histograms.rebinned(int(round(factor)))
    m = histograms.matrix()
    totals = m.sum(axis=0)
    n_bins = m.shape[1]
    fp, fm, cc = (np.full(n_bins, np.nan) for _ in range(3))
    valid = totals >= min_counts
    for k in np.flatnonzero(valid):
        try:
            rho = mle_reconstruct(m[:, k], histograms.settings).rho
        except DegenerateCountsError:
            valid[k] = False
            continue
        if frame is not None:
            rho = apply_local_unitary(rho, *frame)
        fp[k] = fidelity_to_state(rho, PHI_PLUS)
        fm[k] = fidelity_to_state(rho, PHI_MINUS)
        cc[k] = concurrence(rho)
    return EntanglementCurve(histograms.centers, fp, fm, cc, totals, valid, histograms.bin_width, pair_intensity(histograms))


def decay_time_average(ec: EntanglementCurve, measure: str = "concurrence", window_width: float = 171.0, start: float = 0.0) -> float:
    """Coincidence-weighted mean of a per-bin measure over delays in [start, start + window_width].

    Bins straddling a window edge contribute in proportion to their overlap.
    """
    lo = ec.centers - ec.bin_width / 2
    overlap = np.clip(np.minimum(lo + ec.bin_width, start + window_width) - np.maximum(lo, start), 0, None) / ec.bin_width
    weight = ec.counts * overlap * ec.valid
    if not np.any(weight > 0):
        raise ValueError("no valid bins inside the averaging window")
    values = ec.measure(measure)
    use = weight > 0
    return float(np.sum(weight[use] * values[use]) / np.sum(weight[use]))


# --- oscillation fit ------------------------------------------------------------


def model_fidelity(t, s, n, fss, t1, v):
    """1/4 + p(t) (v cos(fss t / hbar) / 2 + 1/4), p = s e^{-t/t1} / (s e^{-t/t1} + n)."""
    t = np.asarray(t, float)
    sig = s * np.exp(-t / t1)
    p = np.ones_like(t) if n == 0 else sig / (sig + n)
    omega = fss / HBAR_UEV_NS / 1000.0
    return 0.25 + p * (v * np.cos(omega * t) / 2 + 0.25)


def model_counts(t, s, n, t1):
    return s * np.exp(-np.asarray(t, float) / t1) + n


@dataclass
class FitModel:
    s: float
    n: float
    fss: float  # micro-eV
    t1: float  # ps
    v: float
    errors: dict = field(default_factory=dict)
    converged: bool = True
    n_fixed: bool = True
    reduced_chi2: float = float("nan")
    n_points: int = 0
    message: str = ""
    at_bound: tuple = ()  # parameters that ended on a bound; their errors are not meaningful

    @property
    def period_ps(self) -> float:
        return 1000.0 * H_UEV_NS / self.fss

    def fidelity(self, t):
        return model_fidelity(t, self.s, self.n, self.fss, self.t1, self.v)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["period_ps"] = self.period_ps
        doc["at_bound"] = list(self.at_bound)
        return doc


def noise_floor(ec: EntanglementCurve, before: float = -200.0) -> float | None:
    """Mean pair intensity per bin at negative delays (below ``before`` ps), or None without such bins."""
    side = ec.centers < before
    if not side.any():
        return None
    return float(np.mean(ec.intensity[side]))


def fit_fidelity(
    ec: EntanglementCurve,
    counts=None,
    noise: float | None = None,
    fit_start: float = 0.0,
    fit_stop: float | None = None,
    guess: dict | None = None,
    max_nfev: int = 10_000,
    min_bins: int = 20,
) -> FitModel:
    """Joint weighted least-squares fit of F_phi+(t) and the coincidence envelope.

    Fidelity residuals are weighted by sqrt(counts); the envelope is fitted
    to the curve's pair intensity with Poisson weights. ``noise`` (counts per bin) defaults to the mean of the
    negative-delay bins and is held fixed; if there are none it is fitted.
    Uncertainties are 1-sigma from the Jacobian, scaled by the reduced chi^2.
    """
    counts = ec.counts if counts is None else np.asarray(counts, float)
    use = ec.valid & (ec.centers >= fit_start) & np.isfinite(ec.f_phi_plus)
    if fit_stop is not None:
        use &= ec.centers <= fit_stop
    if np.count_nonzero(use) < min_bins:
        raise ValueError(f"need at least {min_bins} valid bins to fit, have {int(np.count_nonzero(use))}")
    t = ec.centers[use]
    f = ec.f_phi_plus[use]
    c = ec.intensity[use]
    wf = np.sqrt(counts[use])
    if noise is None:
        noise = noise_floor(ec)
    n_fixed = noise is not None
    g = {"fss": 2.1, "t1": 171.0, "v": 0.9}
    g.update(guess or {})
    s0 = max(float(c[0]) - (noise or 0.0), 1.0) * math.exp(t[0] / g["t1"])

    names = ["s", "fss", "t1", "v"] + ([] if n_fixed else ["n"])

    def unpack(x):
        s, fss, t1, v = x[:4]
        n = noise if n_fixed else x[4]
        return s, n, fss, t1, v

    def residuals(x):
        s, n, fss, t1, v = unpack(x)
        rf = (f - model_fidelity(t, s, n, fss, t1, v)) * wf
        mc = model_counts(t, s, n, t1)
        rc = (c - mc) / np.sqrt(np.maximum(mc, 1.0))
        return np.concatenate([rf, rc])

    x0 = [s0, g["fss"], g["t1"], g["v"]] + ([] if n_fixed else [max(float(c[-1]), 0.0)])
    lower = [0.0, 1e-3, 1.0, 0.0] + ([] if n_fixed else [0.0])
    upper = [np.inf, np.inf, np.inf, 1.0] + ([] if n_fixed else [np.inf])
    x0 = np.clip(x0, lower, np.minimum(upper, 1e300))
    res = least_squares(residuals, x0, bounds=(lower, upper), x_scale="jac", max_nfev=max_nfev, xtol=1e-12, ftol=1e-12, gtol=1e-12)
    dof = max(len(res.fun) - len(res.x), 1)
    chi2 = float(np.sum(res.fun**2) / dof)
    try:
        cov = np.linalg.pinv(res.jac.T @ res.jac) * max(chi2, 1e-300)
        err = np.sqrt(np.clip(np.diag(cov), 0, None))
    except np.linalg.LinAlgError:
        err = np.full(len(res.x), np.nan)
    s, n, fss, t1, v = unpack(res.x)
    at_bound = tuple(k for k, x, lo, hi in zip(names, res.x, lower, upper) if np.isclose(x, lo, rtol=1e-6, atol=1e-9) or np.isclose(x, hi, rtol=1e-6))
    errors = {k: float(e) for k, e in zip(names, err)}
    if n_fixed:
        errors["n"] = 0.0
    return FitModel(
        float(s), float(n), float(fss), float(t1), float(v), errors,
        converged=bool(res.status > 0), n_fixed=n_fixed, reduced_chi2=chi2, n_points=int(len(t)), message=str(res.message),
        at_bound=at_bound,
    )


def write_fit_report(path, fit: FitModel, extra: dict | None = None) -> None:
    doc = {"fit": fit.to_json()}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")
