"""Scenario configuration: YAML files, schema validation and the shipped presets.

Every numeric key carries its unit in its name (``loss_db``, ``irf_fwhm_ps``,
``noise_rate_hz`` ...); unknown keys are rejected.
"""
from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .cascade import DetectorConfig, SourceConfig
from .channel import DriftModel, DriftStage, FilterStage, LossStage, QfcStage, Stage, chain_transmission
from .qmath import CascadeParams
from .tomography import SETTING_SETS


class _Loader(yaml.SafeLoader):
    """SafeLoader that also reads exponent floats without a dot (``1e6``), as YAML 1.2 does."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


class ConfigError(ValueError):
    """Invalid scenario configuration; ``line`` points into the source file when known."""

    def __init__(self, message: str, path: str = "", line: int | None = None, source: str | None = None):
        self.path = path
        self.line = line
        self.source = source
        where = ""
        if source:
            where += f"{source}"
        if line is not None:
            where += f":{line}"
        if path:
            where += f" [{path}]" if where else f"[{path}]"
        super().__init__(f"{where}: {message}" if where else message)


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_PROB = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_STAGE = {
    "oneOf": [
        _obj({"type": {"const": "loss"}, "label": {"type": "string"}, "loss_db": _NONNEG}, ["type", "loss_db"]),
        _obj(
            {
                "type": {"const": "qfc"},
                "label": {"type": "string"},
                "efficiency": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "noise_rate_hz": _NONNEG,
                "direction": {"enum": ["down", "up"]},
                "input_nm": _POS,
                "output_nm": _POS,
                "pump_nm": _POS,
            },
            ["type", "efficiency"],
        ),
        _obj(
            {
                "type": {"const": "drift"},
                "label": {"type": "string"},
                "correlation_time_h": _POS,
                "step_angle_rms_rad": _NONNEG,
                "seed": {"type": "integer", "minimum": 0},
            },
            ["type"],
        ),
        _obj(
            {"type": {"const": "filter"}, "label": {"type": "string"}, "bandwidth_ghz": _POS, "inhomogeneous_ghz": _POS},
            ["type", "bandwidth_ghz"],
        ),
    ]
}

_DETECTOR = _obj({"irf_fwhm_ps": _NONNEG, "efficiency": _PROB, "dark_rate_hz": _NONNEG})
_ARM = _obj({"stages": {"type": "array", "items": _STAGE}, "detector": _DETECTOR})

SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "qdlink scenario",
    **_obj(
        {
            "name": {"type": "string", "minLength": 1},
            "description": {"type": "string"},
            "seed": {"type": "integer", "minimum": 0},
            "pulses_per_setting": {"type": "integer", "minimum": 1},
            "acquisition_h": _POS,
            "source": _obj(
                {
                    "excitation_rate_mhz": _POS,
                    "pair_probability": _PROB,
                    "fss_uev": _POS,
                    "t1_x_ps": _POS,
                    "t1_xx_ps": _POS,
                    "t_rep_ns": _POS,
                    "coherence": _PROB,
                }
            ),
            "arms": _obj({"xx": _ARM, "x": _ARM}),
            "tomography": _obj(
                {
                    "settings": {"enum": sorted(SETTING_SETS)},
                    "bin_width_ps": _POS,
                    "delay_start_ps": _NUM,
                    "subtract_accidentals": {"type": "boolean"},
                    "align": {"type": "boolean"},
                    "align_window_ps": _POS,
                    "align_min_counts": {"type": "integer", "minimum": 1},
                    "workers": {"type": "integer", "minimum": 1},
                }
            ),
            "analysis": _obj(
                {
                    "min_counts": _NONNEG,
                    "zero_window_ps": _POS,
                    "average_window_ps": _POS,
                    "fit_start_ps": _NUM,
                    "noise_before_ps": _NUM,
                }
            ),
            "expect": _obj({"rates_hz": _obj({"xx": _POS, "x": _POS})}),
        },
        ["name"],
    ),
}


def schema_json() -> str:
    return json.dumps(SCHEMA, indent=2, sort_keys=True) + "\n"


# --- typed scenario ---------------------------------------------------------------


@dataclass(frozen=True)
class TomographyOptions:
    settings: str = "james16"
    bin_width_ps: float = 8.0
    delay_start_ps: float = -500.0
    subtract_accidentals: bool = False
    align: bool = False
    align_window_ps: float = 32.0
    align_min_counts: int = 100
    workers: int = 1


@dataclass(frozen=True)
class AnalysisOptions:
    min_counts: float = 20.0
    zero_window_ps: float = 8.0
    average_window_ps: float = 171.0
    fit_start_ps: float = 0.0
    noise_before_ps: float = -200.0


@dataclass(frozen=True)
class Arm:
    stages: tuple[Stage, ...] = ()
    detector: DetectorConfig = field(default_factory=DetectorConfig)


@dataclass(frozen=True)
class Scenario:
    name: str
    source: SourceConfig
    xx: Arm
    x: Arm
    pulses_per_setting: int = 1_000_000
    acquisition_h: float = 4.0
    tomography: TomographyOptions = field(default_factory=TomographyOptions)
    analysis: AnalysisOptions = field(default_factory=AnalysisOptions)
    description: str = ""
    doc: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def seed(self) -> int:
        return self.source.seed

    def digest(self) -> str:
        return config_digest(self.doc)

    def rate_budget(self) -> dict:
        """Expected detector click rates (Hz) per arm, signal and background separately."""
        f = self.source.excitation_rate * 1e6 * self.source.pair_probability
        out = {}
        for name, arm in (("xx", self.xx), ("x", self.x)):
            signal = f * chain_transmission(arm.stages) * arm.detector.efficiency
            noise = 0.0
            for k, st in enumerate(arm.stages):
                if isinstance(st, QfcStage) and st.noise_rate:
                    noise += st.noise_rate * chain_transmission(arm.stages[k + 1 :]) * arm.detector.efficiency
            out[name] = {"signal_hz": signal, "noise_hz": noise, "dark_hz": arm.detector.dark_rate, "total_hz": signal + noise + arm.detector.dark_rate}
        return out


def config_digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _stage(entry: dict) -> Stage:
    kind = entry["type"]
    label = entry.get("label", kind)
    if kind == "loss":
        return LossStage(float(entry["loss_db"]), label)
    if kind == "qfc":
        return QfcStage(
            float(entry["efficiency"]),
            float(entry.get("noise_rate_hz", 0.0)),
            entry.get("direction", "down"),
            label,
            entry.get("input_nm"),
            entry.get("output_nm"),
            float(entry.get("pump_nm", 1607.0)),
        )
    if kind == "drift":
        return DriftStage(
            DriftModel(float(entry.get("correlation_time_h", 12.0)), float(entry.get("step_angle_rms_rad", 0.0)), int(entry.get("seed", 0))),
            label,
        )
    if kind == "filter":
        return FilterStage(float(entry["bandwidth_ghz"]), float(entry.get("inhomogeneous_ghz", 5.6)), label)
    raise ConfigError(f"unknown stage type {kind!r}")


def _arm(doc: dict | None) -> Arm:
    doc = doc or {}
    det = doc.get("detector", {})
    return Arm(
        tuple(_stage(s) for s in doc.get("stages", [])),
        DetectorConfig(float(det.get("irf_fwhm_ps", 0.0)), float(det.get("efficiency", 1.0)), float(det.get("dark_rate_hz", 0.0))),
    )


def _node_line(root, path) -> int | None:
    """1-based source line of the YAML node at ``path`` (deepest existing ancestor)."""
    node, line = root, None
    if node is not None:
        line = node.start_mark.line + 1
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node = nxt
        line = node.start_mark.line + 1
    return line


def _best_error(err: jsonschema.ValidationError) -> jsonschema.ValidationError:
    # inside a oneOf over stage types, report the branch whose type matched
    if err.context:
        typed = [e for e in err.context if "type" not in list(e.relative_path)[:1] and e.validator != "const"]
        pool = typed or list(err.context)
        return max(pool, key=lambda e: len(e.absolute_path))
    return err


def validate(doc, root_node=None, source: str | None = None) -> None:
    if not isinstance(doc, dict):
        raise ConfigError("scenario must be a mapping", source=source)
    validator = jsonschema.Draft7Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    err = _best_error(errors[0])
    path = list(err.absolute_path)
    if err.validator == "additionalProperties" and isinstance(err.instance, dict):
        # point at the first unexpected key rather than its parent mapping
        extra = [k for k in err.instance if k not in err.schema.get("properties", {})]
        if extra:
            path.append(extra[0])
    line = _node_line(root_node, path) if root_node is not None else None
    raise ConfigError(err.message, ".".join(map(str, path)), line, source)


def from_dict(doc: dict, root_node=None, source: str | None = None) -> Scenario:
    validate(doc, root_node, source)
    src = doc.get("source", {})
    rate = float(src.get("excitation_rate_mhz", 305.0))
    t_rep = float(src.get("t_rep_ns", 1000.0 / rate))
    try:
        cascade = CascadeParams(
            fss=float(src.get("fss_uev", 2.1)),
            t1_x=float(src.get("t1_x_ps", 171.0)),
            t1_xx=float(src.get("t1_xx_ps", 120.0)),
            t_rep=t_rep,
        )
        source_cfg = SourceConfig(rate, float(src.get("pair_probability", 1.0)), cascade, int(doc.get("seed", 0)), float(src.get("coherence", 1.0)))
        arms = doc.get("arms", {})
        scenario = Scenario(
            name=doc["name"],
            source=source_cfg,
            xx=_arm(arms.get("xx")),
            x=_arm(arms.get("x")),
            pulses_per_setting=int(doc.get("pulses_per_setting", 1_000_000)),
            acquisition_h=float(doc.get("acquisition_h", 4.0)),
            tomography=TomographyOptions(**doc.get("tomography", {})),
            analysis=AnalysisOptions(**doc.get("analysis", {})),
            description=doc.get("description", ""),
            doc=copy.deepcopy(doc),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), source=source) from exc
    return scenario


def loads(text: str, source: str | None = None) -> Scenario:
    try:
        root = yaml.compose(text, Loader=_Loader)
        doc = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line=None if mark is None else mark.line + 1, source=source) from exc
    return from_dict(doc, root, source)


def load(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario file: {exc.strerror}", source=str(path)) from exc
    return loads(text, str(path))


def with_overrides(scenario: Scenario, pulses: int | None = None, seed: int | None = None, bin_ps: float | None = None) -> Scenario:
    doc = copy.deepcopy(scenario.doc)
    if pulses is not None:
        doc["pulses_per_setting"] = int(pulses)
    if seed is not None:
        doc["seed"] = int(seed)
    if bin_ps is not None:
        doc.setdefault("tomography", {})["bin_width_ps"] = float(bin_ps)
    return from_dict(doc)


def dump_yaml(doc: dict) -> str:
    return yaml.safe_dump(doc, sort_keys=False)


# --- presets ----------------------------------------------------------------------
#
# Rate budget. Detector efficiency 0.85 on both arms; the XX arm is the one
# converted / transmitted. Measured rates: XX 507 kHz and X 450 kHz before
# conversion, 44 kHz after QFC, 1.35 kHz after the city loop, 5.1 kHz after
# back-conversion.
#   pair probability p = 507e3 / (305e6 * 0.85), i.e. lossless XX coupling
#   X coupling loss    = 10 log10(507 / 450)
#   QFC down           = 44 / 507
#   loop               = 14.4 dB fiber + connector loss so that 44 kHz -> 1.35 kHz
#   QFC up * etalon    = 5.1 / 44, etalon throughput 0.9 / 5.6

_F = 305e6
_ETA_DET = 0.85
PAIR_PROBABILITY = round(507e3 / (_F * _ETA_DET), 9)
X_COUPLING_DB = round(10 * math.log10(507 / 450), 4)
QFC_DOWN = round(44 / 507, 6)
LOOP_EXTRA_DB = round(10 * math.log10(44 / 1.35) - 14.4, 4)
ETALON_GHZ = 0.9
# Down-converter background at its output. With it the accidental floor is a few
# tenths of a percent of the zero-delay bin, enough for concurrence to vanish
# near 6 T1 and for the full-period state to pick up visible mixing.
QFC_DOWN_NOISE_HZ = 1.0e6
# Raman background of the up-converter at its output, before the etalon.
# The signal alone reaches 5.1 kHz at the detector; the total background is set
# so that the zero-delay fidelity lands at ~0.90 (about 0.75 MHz at the detector,
# of which ~0.1 MHz is down-converter background carried through).
BACK_CONVERSION_NOISE_HZ = 4.78e6
QFC_UP = round(5.1 / 44 / (ETALON_GHZ / 5.6), 6)

_DETECTOR_DOC = {"irf_fwhm_ps": 41.0, "efficiency": _ETA_DET, "dark_rate_hz": 20.0}
_DRIFT = {"type": "drift", "correlation_time_h": 12.0, "step_angle_rms_rad": 0.012, "seed": 11}


def _preset(name, description, xx_stages, pulses, acquisition_h, *, align=False, expect_xx, analysis=None, coherence=0.948):
    return {
        "name": name,
        "description": description,
        "seed": 2024,
        "pulses_per_setting": pulses,
        "acquisition_h": acquisition_h,
        "source": {
            "excitation_rate_mhz": 305.0,
            "pair_probability": PAIR_PROBABILITY,
            "fss_uev": 2.1,
            "t1_x_ps": 171.0,
            "t1_xx_ps": 120.0,
            "coherence": coherence,
        },
        "arms": {
            "xx": {"stages": xx_stages, "detector": dict(_DETECTOR_DOC)},
            "x": {"stages": [{"type": "loss", "label": "x_coupling", "loss_db": X_COUPLING_DB}], "detector": dict(_DETECTOR_DOC)},
        },
        "tomography": {"settings": "full36", "bin_width_ps": 8.0, "delay_start_ps": -500.0, "subtract_accidentals": False, "align": align},
        "analysis": {"min_counts": 20, "zero_window_ps": 8.0, "average_window_ps": 171.0, "fit_start_ps": 80.0, **(analysis or {})},
        "expect": {"rates_hz": {"xx": expect_xx, "x": 450e3}},
    }


_QFC_DOWN_STAGE = {"type": "qfc", "label": "qfc_down", "efficiency": QFC_DOWN, "noise_rate_hz": QFC_DOWN_NOISE_HZ, "direction": "down"}

PRESETS: dict[str, dict] = {
    "initial": _preset(
        "initial",
        "Source benchmark: both photons straight to the tomography unit.",
        [],
        10_000_000,
        4.0,
        expect_xx=507e3,
    ),
    "qfc": _preset(
        "qfc",
        "XX photon down-converted 780 nm -> 1515 nm before detection.",
        [dict(_QFC_DOWN_STAGE)],
        500_000_000,
        6.0,
        expect_xx=44e3,
    ),
    "city_loop": _preset(
        "city_loop",
        "Converted XX photon sent through the 35.8 km deployed fiber loop.",
        [
            dict(_QFC_DOWN_STAGE),
            {"type": "loss", "label": "fiber_loop", "loss_db": 14.4},
            {"type": "loss", "label": "connectors", "loss_db": LOOP_EXTRA_DB},
            dict(_DRIFT),
        ],
        1_000_000_000,
        48.0,
        align=True,
        expect_xx=1.35e3,
    ),
    "back_conversion": _preset(
        "back_conversion",
        "Converted XX photon converted back to 780 nm behind an etalon filter; Raman noise from the pump SHG.",
        [
            dict(_QFC_DOWN_STAGE),
            {"type": "qfc", "label": "qfc_up", "efficiency": QFC_UP, "noise_rate_hz": BACK_CONVERSION_NOISE_HZ, "direction": "up"},
            {"type": "filter", "label": "etalon", "bandwidth_ghz": ETALON_GHZ},
            dict(_DRIFT),
        ],
        6_000_000_000,
        48.0,
        align=True,
        expect_xx=5.1e3,
        analysis={"fit_start_ps": 500.0},
    ),
}


def preset(name: str) -> Scenario:
    try:
        doc = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose one of {', '.join(PRESETS)}") from None
    return from_dict(copy.deepcopy(doc))


def resolve(name_or_path: str) -> Scenario:
    """A preset name or a path to a YAML scenario file."""
    if name_or_path in PRESETS:
        return preset(name_or_path)
    return load(name_or_path)
