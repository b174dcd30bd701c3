"""End-to-end run: simulate -> tomograph -> analyze -> fit -> report.

Each step reads and writes plain files in a run directory, so the steps can
also be invoked one at a time from the command line.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .cascade import (
    KEY_ANALYZER,
    KEY_DETECT,
    KEY_STAGE,
    Arm,
    Records,
    detect_stream,
    iter_pair_blocks,
    block_pulses,
    photons_from_pairs,
    stream_rng,
    write_events_binary,
)
from .channel import DriftStage, apply_stage, arm_frame
from .measures import (
    EntanglementCurve,
    FitModel,
    curve,
    decay_time_average,
    fit_fidelity,
    noise_floor,
    write_fit_report,
)
from .qmath import BASIS_LABELS, apply_local_unitary, bell_fidelities, cascade_phase, concurrence, purity
from .scenario import Scenario, from_dict
from .tomography import (
    SETTING_SETS,
    AlignmentError,
    CoincidenceHistogram,
    HistogramSet,
    MeasurementSetting,
    PairStates,
    TomographyResult,
    align_basis,
    analyze_polarization,
    coincidence_histogram,
    mle_reconstruct,
)

log = logging.getLogger(__name__)

HISTOGRAMS = "histograms.json"
SCENARIO = "scenario.json"
ALIGNMENT = "alignment.json"
RHO_FILES = {"zero8ps": "rho_zero8ps.json", "full": "rho_full.json"}
CURVE = "curve.csv"
FIT = "fit.json"
SUMMARY = "summary.json"
MANIFEST = "manifest.json"
REPORT = "report.txt"


class RunError(RuntimeError):
    """A run directory is missing the inputs a step needs."""


class NumericError(RuntimeError):
    """Reconstruction, alignment or fitting failed."""


# --- simulation -----------------------------------------------------------------------


def _frame_fn(stages, setting_index: int, n_pulses: int, dwell_s: float):
    if not any(isinstance(s, DriftStage) for s in stages):
        return None

    def frame(pulses):
        # each setting is one acquisition of length dwell_s in lab time
        t = (setting_index + np.asarray(pulses, float) / n_pulses) * dwell_s
        return arm_frame(stages, t)

    return frame


@dataclass
class SettingData:
    histogram: CoincidenceHistogram
    photons_in: tuple[int, int]  # photons reaching each analyzer
    events: tuple[Records, Records] | None = None


def simulate_setting_events(scn: Scenario, index: int, setting: MeasurementSetting, keep_events: bool = False) -> SettingData:
    """Stream all pulses of one setting through the channel, analyzer and detectors."""
    src = scn.source
    seed = src.seed
    n = scn.pulses_per_setting
    t_rep = src.t_rep_ps
    size = block_pulses(src.pair_probability)
    dwell_s = scn.acquisition_h * 3600.0 / len(SETTING_SETS[scn.tomography.settings])
    frames = (_frame_fn(scn.xx.stages, index, n, dwell_s), _frame_fn(scn.x.stages, index, n, dwell_s))
    arms = (scn.xx, scn.x)
    out = {Arm.XX: [], Arm.X: []}
    photons_in = [0, 0]
    for lo, hi, pairs in iter_pair_blocks(src, n, 0, stream=index):
        block = lo // size
        t0, t1 = lo * t_rep, hi * t_rep
        recs = list(photons_from_pairs(pairs))
        for a, arm in enumerate(arms):
            for k, stage in enumerate(arm.stages):
                recs[a] = apply_stage(stage, recs[a], t0, t1, stream_rng(seed, KEY_STAGE, index, block, a, k))
            photons_in[a] += len(recs[a])
        states = PairStates(pairs.pulse_index, cascade_phase(pairs.delay, src.cascade), src.coherence, *frames)
        xx, x = analyze_polarization(recs[0], recs[1], states, setting, stream_rng(seed, KEY_ANALYZER, index, block))
        for a, r in enumerate((xx, x)):
            det = arms[a].detector
            out[Arm(a)].append(detect_stream(r, det, t0, t1, stream_rng(seed, KEY_DETECT, index, block, a)))
    xx = Records.concatenate(Arm.XX, out[Arm.XX]).sorted()
    x = Records.concatenate(Arm.X, out[Arm.X]).sorted()
    opts = scn.tomography
    hist = coincidence_histogram(xx, x, setting, t_rep, opts.bin_width_ps, opts.delay_start_ps)
    return SettingData(hist, (photons_in[0], photons_in[1]), (xx, x) if keep_events else None)


def _simulate_one(args):
    doc, index, label, keep = args
    scn = from_dict(doc)
    return simulate_setting_events(scn, index, MeasurementSetting.parse(label), keep)


def simulate(scn: Scenario, events_dir: Path | None = None, workers: int | None = None) -> tuple[HistogramSet, dict]:
    """Histograms for every tomography setting plus singles-rate diagnostics.

    Settings are independent acquisitions with their own random streams, so
    they may run in parallel without changing the result.
    """
    settings = SETTING_SETS[scn.tomography.settings]
    workers = workers or scn.tomography.workers
    jobs = [(scn.doc, i, s.label, events_dir is not None and i == 0) for i, s in enumerate(settings)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_simulate_one, jobs))
    else:
        results = [simulate_setting_events(scn, i, s, keep) for (_, i, _, keep), s in zip(jobs, settings)]
    duration_s = scn.pulses_per_setting * scn.source.t_rep_ps * 1e-12
    if events_dir is not None and results[0].events is not None:
        events_dir.mkdir(parents=True, exist_ok=True)
        write_events_binary(events_dir / f"setting_{settings[0].label}.bin", results[0].events)
    # detector rate without the analyzer: analyzer input times efficiency, plus dark counts
    rates = {}
    for a, (name, arm) in enumerate((("xx", scn.xx), ("x", scn.x))):
        n_in = np.mean([r.photons_in[a] for r in results])
        rates[name] = float(n_in * arm.detector.efficiency / duration_s + arm.detector.dark_rate)
    meta = {
        "scenario": scn.name,
        "seed": scn.seed,
        "config_digest": scn.digest(),
        "pulses_per_setting": scn.pulses_per_setting,
        "setting_set": scn.tomography.settings,
        "likelihood": "poisson",
        "coincidence_window": "greedy time-ordered, delay in [delay_start, delay_start + t_rep)",
        "acquisition_s_per_setting": duration_s,
    }
    hs = HistogramSet([r.histogram for r in results], scn.source.t_rep_ps, meta)
    return hs, {"detector_rate_hz": rates, "acquisition_s_per_setting": duration_s}


# --- tomography -------------------------------------------------------------------------


def rho_document(result: TomographyResult, window: dict, frame=None) -> dict:
    rho = result.rho
    if frame is not None:
        rho = apply_local_unitary(rho, *frame)
    fid = bell_fidelities(rho)
    return {
        "window": window,
        "basis": list(BASIS_LABELS),
        "re": np.round(rho.real, 12).tolist(),
        "im": np.round(rho.imag, 12).tolist(),
        "bell_fidelities": {k: round(v, 12) for k, v in fid.items()},
        "bell_sum": round(sum(fid.values()), 12),
        "concurrence": round(concurrence(rho), 12),
        "purity": round(purity(rho), 12),
        "inner_diagonal": round(float(rho[1, 1].real + rho[2, 2].real), 12),
        "log_likelihood": round(result.log_likelihood, 9),
        "iterations": result.iterations,
        "converged": result.converged,
        "counts": result.total_counts,
    }


def load_rho(doc: dict) -> np.ndarray:
    return np.asarray(doc["re"]) + 1j * np.asarray(doc["im"])


def _dump(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _load(path: Path, what: str):
    if not path.exists():
        raise RunError(f"{path.name} not found in {path.parent}: run the {what} step first")
    with open(path) as fh:
        return json.load(fh)


def load_histograms(run_dir: Path) -> HistogramSet:
    path = run_dir / HISTOGRAMS
    if not path.exists():
        raise RunError(f"{HISTOGRAMS} not found in {run_dir}: run the simulate step first")
    return HistogramSet.load(path)


def _prepared(hs: HistogramSet, scn: Scenario) -> HistogramSet:
    return hs.subtract_accidentals(scn.analysis.noise_before_ps) if scn.tomography.subtract_accidentals else hs


def load_frame(run_dir: Path):
    path = run_dir / ALIGNMENT
    if not path.exists():
        return None
    doc = _load(path, "tomograph")
    if not doc.get("applied"):
        return None
    return tuple(np.asarray(doc[k]["re"]) + 1j * np.asarray(doc[k]["im"]) for k in ("u_a", "u_b"))


def tomograph(run_dir: Path, scn: Scenario, windows=("zero8ps", "full")) -> dict:
    hs = _prepared(load_histograms(run_dir), scn)
    opts = scn.tomography
    frame = None
    align_doc: dict = {"applied": False}
    if opts.align:
        try:
            u_a, u_b = align_basis(hs, 0.0, opts.align_window_ps, opts.align_min_counts)
        except AlignmentError as exc:
            raise NumericError(f"basis alignment failed: {exc}") from exc
        frame = (u_a, u_b)
        align_doc = {
            "applied": True,
            "window_ps": opts.align_window_ps,
            "u_a": {"re": np.round(u_a.real, 12).tolist(), "im": np.round(u_a.imag, 12).tolist()},
            "u_b": {"re": np.round(u_b.real, 12).tolist(), "im": np.round(u_b.imag, 12).tolist()},
        }
    _dump(run_dir / ALIGNMENT, align_doc)
    out = {}
    width = scn.analysis.zero_window_ps
    for w in windows:
        if w == "zero8ps":
            try:
                counts = hs.window_counts(0.0, width)
            except ValueError as exc:
                raise RunError(f"{exc}; choose a bin width that places a bin center inside the zero-delay window") from exc
            window = {"center_ps": 0.0, "width_ps": width}
        elif w == "full":
            counts = hs.matrix().sum(axis=1)
            window = {"center_ps": hs.delay_start + hs.t_rep_ps / 2, "width_ps": hs.t_rep_ps}
        else:
            raise ValueError(f"unknown window {w!r}")
        if counts.sum() <= 0:
            raise NumericError(f"no coincidences in the {w} window")
        doc = rho_document(mle_reconstruct(counts, hs.settings), window, frame)
        _dump(run_dir / RHO_FILES[w], doc)
        out[w] = doc
    return out


# --- curves and fit ---------------------------------------------------------------------


def analyze(run_dir: Path, scn: Scenario, bin_ps: float | None = None) -> EntanglementCurve:
    hs = _prepared(load_histograms(run_dir), scn)
    if bin_ps is not None and bin_ps != hs.bin_width:
        factor = bin_ps / hs.bin_width
        if abs(factor - round(factor)) > 1e-9 or round(factor) < 1:
            raise RunError(f"--bin-ps {bin_ps} is not a multiple of the recorded {hs.bin_width} ps bins")
        hs = hs.rebinned(int(round(factor)))
    ec = curve(hs, None, scn.analysis.min_counts, load_frame(run_dir))
    ec.write_csv(run_dir / CURVE)
    return ec


def fit(run_dir: Path, scn: Scenario) -> FitModel:
    path = run_dir / CURVE
    if not path.exists():
        raise RunError(f"{CURVE} not found in {run_dir}: run the analyze step first")
    ec = EntanglementCurve.read_csv(path)
    noise = noise_floor(ec, scn.analysis.noise_before_ps)
    try:
        model = fit_fidelity(ec, noise=noise, fit_start=scn.analysis.fit_start_ps, guess={"fss": scn.source.cascade.fss, "t1": scn.source.cascade.t1_x})
    except ValueError as exc:
        raise NumericError(f"fidelity fit failed: {exc}") from exc
    if model.at_bound:
        log.warning("fit parameters at their bounds: %s; the data do not constrain them", ", ".join(model.at_bound))
    averages = {}
    for m in ("concurrence", "f_phi_plus"):
        try:
            averages[m] = decay_time_average(ec, m, scn.analysis.average_window_ps)
        except ValueError:
            averages[m] = None
    write_fit_report(run_dir / FIT, model, {"decay_time_average": averages, "average_window_ps": scn.analysis.average_window_ps})
    return model


# --- summary, report, manifest --------------------------------------------------------------


def summarize(run_dir: Path, scn: Scenario, diagnostics: dict | None = None) -> dict:
    rho = {w: _load(run_dir / f, "tomograph") for w, f in RHO_FILES.items()}
    fit_doc = _load(run_dir / FIT, "fit")
    summary = {
        "scenario": scn.name,
        "seed": scn.seed,
        "pulses_per_setting": scn.pulses_per_setting,
        "f_phi_plus_zero8ps": rho["zero8ps"]["bell_fidelities"]["phi_plus"],
        "concurrence_zero8ps": rho["zero8ps"]["concurrence"],
        "f_phi_plus_full": rho["full"]["bell_fidelities"]["phi_plus"],
        "concurrence_full": rho["full"]["concurrence"],
        "inner_diagonal_zero8ps": rho["zero8ps"]["inner_diagonal"],
        "inner_diagonal_full": rho["full"]["inner_diagonal"],
        "decay_time_average": fit_doc["decay_time_average"],
        "fit_period_ps": fit_doc["fit"]["period_ps"],
        "fit_visibility": fit_doc["fit"]["v"],
        "bell_sum_max_deviation": max(abs(d["bell_sum"] - 1) for d in rho.values()),
    }
    if diagnostics:
        summary.update(diagnostics)
    _dump(run_dir / SUMMARY, summary)
    return summary


def _matrix_table(path: Path, m) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", *BASIS_LABELS])
        for label, row in zip(BASIS_LABELS, m):
            w.writerow([label, *(f"{v:.6f}" for v in row)])


def report(run_dir: Path) -> str:
    """Human-readable summary plus plot-data tables for the density matrices and curves."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunError(f"{run_dir} is not a run directory")
    rho = {w: _load(run_dir / f, "tomograph") for w, f in RHO_FILES.items()}
    fit_doc = _load(run_dir / FIT, "fit")
    if not (run_dir / CURVE).exists():
        raise RunError(f"{CURVE} not found in {run_dir}: run the analyze step first")
    summary = _load(run_dir / SUMMARY, "run") if (run_dir / SUMMARY).exists() else {}
    plots = run_dir / "plot_data"
    plots.mkdir(exist_ok=True)
    for w, doc in rho.items():
        _matrix_table(plots / f"rho_{w}_re.csv", doc["re"])
        _matrix_table(plots / f"rho_{w}_im.csv", doc["im"])
    ec = EntanglementCurve.read_csv(run_dir / CURVE)
    fm = fit_doc["fit"]
    model = FitModel(fm["s"], fm["n"], fm["fss"], fm["t1"], fm["v"])
    with open(plots / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center_ps", "f_phi_plus", "f_phi_minus", "concurrence", "f_phi_plus_fit", "counts"])
        for k in range(len(ec.centers)):
            t = ec.centers[k]
            fit_val = f"{float(model.fidelity(t)):.6f}" if t >= 0 else "nan"
            vals = [f"{v[k]:.6f}" if ec.valid[k] else "nan" for v in (ec.f_phi_plus, ec.f_phi_minus, ec.concurrence)]
            w.writerow([f"{t:.3f}", *vals, fit_val, f"{ec.counts[k]:.6g}"])

    lines = [f"run: {summary.get('scenario', run_dir.name)}", ""]
    for w, doc in rho.items():
        lines.append(f"window {w} (width {doc['window']['width_ps']:.1f} ps, {doc['counts']:.0f} coincidences)")
        lines.append("  Re(rho)")
        for label, row in zip(BASIS_LABELS, doc["re"]):
            lines.append(f"    {label}  " + "  ".join(f"{v:+.3f}" for v in row))
        lines.append("  Im(rho)")
        for label, row in zip(BASIS_LABELS, doc["im"]):
            lines.append(f"    {label}  " + "  ".join(f"{v:+.3f}" for v in row))
        f = doc["bell_fidelities"]
        lines.append(f"  F(phi+) = {f['phi_plus']:.4f}   F(phi-) = {f['phi_minus']:.4f}   C = {doc['concurrence']:.4f}   purity = {doc['purity']:.4f}")
        lines.append("")
    avg = fit_doc["decay_time_average"]
    lines.append(f"decay-time averages over {fit_doc['average_window_ps']:.0f} ps:")
    for k, v in avg.items():
        lines.append(f"  {k}: {'n/a' if v is None else f'{v:.4f}'}")
    lines.append("")
    lines.append(
        f"fit: period {fm['period_ps']:.1f} ps (FSS {fm['fss']:.4f} +- {fm['errors'].get('fss', float('nan')):.4f} ueV), "
        f"T1 {fm['t1']:.1f} ps, v {fm['v']:.4f}, noise {fm['n']:.3g}/bin"
    )
    if fm.get("at_bound"):
        lines.append(f"  warning: {', '.join(fm['at_bound'])} ended on a bound and is not constrained by the data")
    if "detector_rate_hz" in summary:
        r = summary["detector_rate_hz"]
        lines.append(f"detector rates without analyzer: XX {r['xx'] / 1e3:.2f} kHz, X {r['x'] / 1e3:.2f} kHz")
    text = "\n".join(lines) + "\n"
    (run_dir / REPORT).write_text(text)
    return text


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run_dir: Path, scn: Scenario, wall_time_s: float) -> dict:
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != MANIFEST)
    doc = {
        "scenario": scn.name,
        "seed": scn.seed,
        "config_digest": scn.digest(),
        "versions": {"qdlink": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()},
        "files": {str(p.relative_to(run_dir)): _sha256(p) for p in files},
        "wall_time_s": round(wall_time_s, 3),
    }
    _dump(run_dir / MANIFEST, doc)
    return doc


def run(scn: Scenario, out_dir, events: bool = True, workers: int | None = None) -> dict:
    """Full pipeline into ``out_dir``; returns the summary."""
    t_start = time.perf_counter()
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump(run_dir / SCENARIO, scn.doc)
    log.info("simulating %s: %d settings x %d pulses", scn.name, len(SETTING_SETS[scn.tomography.settings]), scn.pulses_per_setting)
    hs, diag = simulate(scn, run_dir / "events" if events else None, workers)
    hs.dump(run_dir / HISTOGRAMS)
    tomograph(run_dir, scn)
    analyze(run_dir, scn)
    fit(run_dir, scn)
    summary = summarize(run_dir, scn, diag)
    report(run_dir)
    write_manifest(run_dir, scn, time.perf_counter() - t_start)
    return summary
