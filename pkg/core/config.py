"""
config.py
---------
Experiment configuration.

Config files are flat `key = value` lines; `#` starts a comment. Every key
of ExperimentConfig may appear at most once, unknown keys are errors.
Named presets and estimator display metadata live in data/experiments.json.
"""

import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache

from core.errors import ConfigError, OutputError
from core.vi_estimator import H_ASSEMBLY_MODES, WEIGHTING_MODES, VIConfig

BLIND_VI = "blind-vi"
AIDED_LS = "aided-ls"
AIDED_MMSE = "aided-mmse"
PERFECT_CSI = "perfect-csi"
ESTIMATORS = (BLIND_VI, AIDED_LS, AIDED_MMSE, PERFECT_CSI)

CONSTELLATIONS = ("qpsk", "qam16")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


# ── Load experiment metadata ─────────────────

@lru_cache(maxsize=1)
def _load_experiment_data() -> dict:
    base_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    path = os.path.join(base_dir, "data", "experiments.json")
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def estimator_info() -> dict:
    """Display name and description per estimator key."""
    return _load_experiment_data()["estimators"]


def uses_pilots(estimator: str) -> bool:
    return bool(estimator_info().get(estimator, {}).get("uses_pilots", False))


def display_name(estimator: str) -> str:
    return estimator_info().get(estimator, {}).get("display_name", estimator)


def canonical_estimator(name: str) -> str:
    key = name.strip().lower()
    if key not in ESTIMATORS:
        for k, info in estimator_info().items():
            if info.get("display_name", "").lower() == key:
                return k
        raise ConfigError(f"unknown estimator '{name}' (expected one of {', '.join(ESTIMATORS)})")
    return key


# ── ExperimentConfig ─────────────────────────

@dataclass
class ExperimentConfig:
    """One SNR sweep: system size, grid, estimator set and VI hyperparameters."""
    n_antennas: int = 4
    n_users: int = 4
    constellation: str = "qpsk"
    rho2: float = 1.0
    snr_grid_db: list = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
                              metadata={"item": float})
    blocks_per_point: int = 200
    est_repetitions: int = 4
    t_det: int = 32
    t_pilot: int = 0
    estimators: list = field(default_factory=lambda: list(ESTIMATORS), metadata={"item": str})
    learning_rate: float = 0.05
    mc_samples: int = 10
    report_samples: int = 100
    max_iters: int = 2000
    tolerance: float = 1e-4
    window: int = 20
    hidden: int = 16
    amplitude: float = 0.0
    weighting: str = "noise"
    sigma2_model: float = 0.0
    noise_floor: float = 1e-3
    schedule_aware: bool = True
    h_assembly: str = "average"
    reference_symbol: bool = True
    seed: int = 0
    workers: int = 1
    report_wall_time: bool = False
    trace_path: str = ""

    def __post_init__(self):
        self.constellation = self.constellation.strip().lower().replace("-", "")
        if self.constellation == "16qam":
            self.constellation = "qam16"
        self.estimators = [canonical_estimator(e) for e in self.estimators]
        self.snr_grid_db = [float(s) for s in self.snr_grid_db]
        self.validate()

    def validate(self):
        counts = ("n_antennas", "n_users", "blocks_per_point", "est_repetitions", "t_det",
                  "mc_samples", "report_samples", "max_iters", "window",
                  "hidden", "workers")
        for name in counts:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.constellation not in CONSTELLATIONS:
            raise ConfigError(f"unknown constellation '{self.constellation}'")
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db must not be empty")
        if any(math.isnan(s) or s == -math.inf for s in self.snr_grid_db):
            raise ConfigError(f"invalid SNR grid {self.snr_grid_db}")
        if not self.estimators:
            raise ConfigError("estimators must not be empty")
        if len(set(self.estimators)) != len(self.estimators):
            raise ConfigError("estimators must not repeat")
        if self.t_pilot < 0:
            raise ConfigError("t_pilot must be >= 0 (0 means 2 * n_users)")
        if self.pilot_length < self.n_users:
            raise ConfigError(f"t_pilot={self.t_pilot} is shorter than n_users={self.n_users}")
        for name in ("rho2", "learning_rate", "noise_floor"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("tolerance", "amplitude", "sigma2_model"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.weighting not in WEIGHTING_MODES:
            raise ConfigError(f"weighting must be one of {WEIGHTING_MODES}")
        if self.h_assembly not in H_ASSEMBLY_MODES:
            raise ConfigError(f"h_assembly must be one of {H_ASSEMBLY_MODES}")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    # ── Derived values ───────────────────────

    @property
    def t_est(self) -> int:
        return self.n_users * self.est_repetitions

    @property
    def pilot_length(self) -> int:
        return self.t_pilot or 2 * self.n_users

    def vi_config(self) -> VIConfig:
        return VIConfig(
            learning_rate=self.learning_rate,
            mc_samples=self.mc_samples,
            report_samples=self.report_samples,
            max_iters=self.max_iters,
            tolerance=self.tolerance,
            window=self.window,
            hidden=self.hidden,
            amplitude=self.amplitude,
            weighting=self.weighting,
            sigma2_model=self.sigma2_model,
            noise_floor=self.noise_floor,
            schedule_aware=self.schedule_aware,
            h_assembly=self.h_assembly,
            reference_symbol=self.reference_symbol,
            trace_path=self.trace_path,
            seed=self.seed,
        )

    def with_overrides(self, **values) -> "ExperimentConfig":
        return replace(self, **values)

    # ── Serialization ────────────────────────

    def dumps(self) -> str:
        lines = ["# blind MIMO experiment configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str, path: str = "<string>", base: "ExperimentConfig" = None) -> "ExperimentConfig":
        values = _parse_lines(text, path)
        try:
            return replace(base, **values) if base is not None else cls(**values)
        except ConfigError as exc:
            raise ConfigError(str(exc), path) from exc

    @classmethod
    def from_preset(cls, name: str) -> "ExperimentConfig":
        presets = _load_experiment_data()["presets"]
        if name not in presets:
            raise ConfigError(f"unknown preset '{name}' (available: {', '.join(sorted(presets))})")
        values = {}
        for key, raw in presets[name]["config"].items():
            values[key] = _coerce(key, _json_to_text(raw), f"preset:{name}", 0)
        return cls(**values)


def preset_names() -> dict:
    """Preset name -> description."""
    return {k: v.get("description", "") for k, v in _load_experiment_data()["presets"].items()}


def load_config(path: str, base: ExperimentConfig = None) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", path) from exc
    return ExperimentConfig.loads(text, path, base)


def save_config(config: ExperimentConfig, path: str):
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write(config.dumps())
    except OSError as exc:
        raise OutputError(str(exc), path) from exc


# ── Parsing helpers ──────────────────────────

_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _json_to_text(raw) -> str:
    if isinstance(raw, list):
        return ",".join(_json_to_text(r) for r in raw)
    if isinstance(raw, bool):
        return "true" if raw else "false"
    return str(raw)


def _coerce(key: str, text: str, path: str, line: int):
    if key not in _FIELDS:
        raise ConfigError(f"unknown key '{key}'", path, line)
    f = _FIELDS[key]
    try:
        if "item" in f.metadata:
            item = f.metadata["item"]
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return [item(p) for p in parts]
        kind = type(f.default)
        if kind is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {text}")
        if kind is int:
            return int(text, 0)
        if kind is float:
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for '{key}': {exc}", path, line) from exc


def _parse_lines(text: str, path: str) -> dict:
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got '{raw.strip()}'", path, number)
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"duplicate key '{key}'", path, number)
        values[key] = _coerce(key, value, path, number)
    return values
