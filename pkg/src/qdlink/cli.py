"""Command line entry point: ``qdlink <command> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__, pipeline
from .scenario import PRESETS, ConfigError, Scenario, dump_yaml, from_dict, resolve, schema_json, with_overrides
from .tomography import TomographyError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("qdlink")


def _scenario_from_args(args) -> Scenario:
    return with_overrides(resolve(args.scenario), pulses=args.pulses, seed=args.seed, bin_ps=getattr(args, "bin_ps", None))


def _scenario_from_run(args) -> Scenario:
    """Scenario stored in the run directory, unless one is given explicitly."""
    if getattr(args, "scenario", None):
        return _scenario_from_args(args)
    path = Path(args.out) / pipeline.SCENARIO
    if not path.exists():
        raise pipeline.RunError(f"{path} not found: pass --scenario or run the simulate step first")
    return from_dict(json.loads(path.read_text()), source=str(path))


def cmd_run(args) -> int:
    scn = _scenario_from_args(args)
    summary = pipeline.run(scn, args.out, events=not args.no_events, workers=args.workers)
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_OK


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    scn = _scenario_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / pipeline.SCENARIO).write_text(json.dumps(scn.doc, indent=1, sort_keys=True) + "\n")
    hs, diag = pipeline.simulate(scn, None if args.no_events else out / "events", args.workers)
    hs.dump(out / pipeline.HISTOGRAMS)
    (out / "rates.json").write_text(json.dumps(diag, indent=1, sort_keys=True) + "\n")
    log.info("simulated %d settings in %.1f s", len(hs.histograms), time.perf_counter() - t0)
    return EXIT_OK


def cmd_tomograph(args) -> int:
    scn = _scenario_from_run(args)
    windows = ("zero8ps", "full") if args.window is None else (args.window,)
    docs = pipeline.tomograph(Path(args.out), scn, windows)
    for w, doc in docs.items():
        f = doc["bell_fidelities"]
        print(f"{w}: F(phi+) = {f['phi_plus']:.4f}  F(phi-) = {f['phi_minus']:.4f}  C = {doc['concurrence']:.4f}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    scn = _scenario_from_run(args)
    ec = pipeline.analyze(Path(args.out), scn, args.bin_ps)
    print(f"{int(ec.valid.sum())} of {len(ec.centers)} bins valid; curve written to {Path(args.out) / pipeline.CURVE}")
    return EXIT_OK


def cmd_fit(args) -> int:
    scn = _scenario_from_run(args)
    model = pipeline.fit(Path(args.out), scn)
    print(f"period {model.period_ps:.1f} ps, FSS {model.fss:.4f} ueV, T1 {model.t1:.1f} ps, v {model.v:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir or args.out)
    if not (run_dir / pipeline.SUMMARY).exists() and (run_dir / pipeline.FIT).exists():
        pipeline.summarize(run_dir, _scenario_from_run(argparse.Namespace(out=str(run_dir), scenario=None)))
    print(pipeline.report(run_dir), end="")
    return EXIT_OK


def cmd_schema(args) -> int:
    sys.stdout.write(schema_json())
    return EXIT_OK


def cmd_presets(args) -> int:
    if args.name:
        if args.name not in PRESETS:
            raise ConfigError(f"unknown preset {args.name!r}")
        sys.stdout.write(dump_yaml(PRESETS[args.name]))
        return EXIT_OK
    for name in PRESETS:
        scn = resolve(name)
        budget = scn.rate_budget()
        print(f"{name:16s} XX {budget['xx']['signal_hz'] / 1e3:8.2f} kHz signal   X {budget['x']['signal_hz'] / 1e3:7.2f} kHz   {scn.description}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qdlink", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"qdlink {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_opts(sp, required=True):
        sp.add_argument("--scenario", required=required, help="preset name or YAML scenario file")
        sp.add_argument("--pulses", type=int, help="pulses per measurement setting")
        sp.add_argument("--seed", type=int, help="master seed")

    def out_opt(sp):
        sp.add_argument("--out", required=True, help="run directory")

    sp = sub.add_parser("run", help="simulate, reconstruct, analyze, fit and report")
    scenario_opts(sp)
    out_opt(sp)
    sp.add_argument("--bin-ps", type=float, help="histogram bin width in ps")
    sp.add_argument("--no-events", action="store_true", help="do not write the event file")
    sp.add_argument("--workers", type=int, help="parallel processes for the simulation")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("simulate", help="generate events and coincidence histograms")
    scenario_opts(sp)
    out_opt(sp)
    sp.add_argument("--bin-ps", type=float, help="histogram bin width in ps")
    sp.add_argument("--no-events", action="store_true")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("tomograph", help="basis alignment and windowed density matrices")
    scenario_opts(sp, required=False)
    out_opt(sp)
    sp.add_argument("--window", choices=["zero8ps", "full"], help="only this integration window")
    sp.set_defaults(func=cmd_tomograph)

    sp = sub.add_parser("analyze", help="per-bin fidelity and concurrence curve")
    scenario_opts(sp, required=False)
    out_opt(sp)
    sp.add_argument("--bin-ps", type=float, help="curve bin width (multiple of the histogram bins)")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("fit", help="oscillation fit and decay-time averages")
    scenario_opts(sp, required=False)
    out_opt(sp)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("report", help="text summary and plot-data tables")
    sp.add_argument("run_dir", nargs="?")
    sp.add_argument("--out", help="run directory")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("schema", help="print the scenario JSON schema")
    sp.set_defaults(func=cmd_schema)

    sp = sub.add_parser("presets", help="list presets or print one as YAML")
    sp.add_argument("name", nargs="?")
    sp.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "report" and not (args.run_dir or args.out):
        parser.error("report needs a run directory")
    try:
        return args.func(args)
    except (ConfigError, pipeline.RunError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pipeline.NumericError, TomographyError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
