"""
CorrFaD configuration

Environment defaults come from a .env file (python-dotenv) and CORRFAD_*
variables. A RunConfig layers built-in command defaults, the environment,
an optional TOML/JSON config file and explicit CLI flags, in that order.
"""

import os
import json
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

from errors import ConfigConflictError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

BACKENDS = ("frequency-psr", "spatial-ncc")
OVERLAP_MODES = ("iou", "iot")
LOCALIZATION_RULES = ("within-5px", "within-10pct-iod")
EXPERIMENTS = (
    "baseline",
    "scale-sweep",
    "cumulative",
    "random-baseline",
    "repeated-setting",
    "filter-selection",
)

# Keys that never change an artifact, so they stay out of the config hash
VOLATILE_KEYS = {"workers", "progress", "log_level", "force", "config"}


@dataclass(frozen=True)
class Settings:
    """Defaults read from the environment"""

    sigma: float = 2.0
    epsilon_scale: float = 0.01
    max_dim: int = 4096
    workers: int = 1
    log_level: str = "INFO"
    overlap_mode: str = "iou"
    overlap_threshold: float = 0.25

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            sigma=float(os.getenv("CORRFAD_SIGMA", "2.0")),
            epsilon_scale=float(os.getenv("CORRFAD_EPSILON_SCALE", "0.01")),
            max_dim=int(os.getenv("CORRFAD_MAX_DIM", "4096")),
            workers=int(os.getenv("CORRFAD_WORKERS", str(os.cpu_count() or 1))),
            log_level=os.getenv("CORRFAD_LOG_LEVEL", "INFO"),
            overlap_mode=os.getenv("CORRFAD_OVERLAP_MODE", "iou"),
            overlap_threshold=float(os.getenv("CORRFAD_OVERLAP_THRESHOLD", "0.25")),
        )


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    return Settings.from_env()


def _common_defaults(settings: Settings) -> Dict[str, Any]:
    return {
        "sigma": settings.sigma,
        "epsilon": None,
        "epsilon_scale": settings.epsilon_scale,
        "max_dim": settings.max_dim,
        "workers": settings.workers,
        "log_level": settings.log_level,
        "seed": 0,
        "progress": True,
        "force": False,
    }


COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "synth": {
        "out": "corpus",
        "n_train": 256,
        "n_test": 73,
        "canvas": [192, 160],
        "iod_min": 16.0,
        "iod_max": 32.0,
        "octaves": None,
        "poses": None,
        "pose_min": -10.0,
        "pose_max": 10.0,
        "noise": 0.02,
        "background": "stripes",
        "clutter": 6,
        "train_identities": 128,
        "test_identities": 36,
    },
    "train": {
        "corpus": None,
        "annotations": None,
        "grid": "default",
        "octaves": None,
        "poses": ["LEFT", "FRONTAL", "RIGHT"],
        "crop": [1.0, 1.25],
        "out": "bank.cfad",
    },
    "detect": {
        "bank": None,
        "corpus": None,
        "split": "test",
        "annotations": None,
        "backend": "frequency-psr",
        "k": 1,
        "out": "detections.json",
    },
    "eval": {
        "experiment": "repeated-setting",
        "bank": None,
        "corpus": None,
        "annotations": None,
        "out_dir": "reports",
        "backend": None,
        "overlap_mode": None,
        "overlap_threshold": None,
        "rule": "within-5px",
        "octave": None,
        "octave_span": 0.5,
        "step": 0.05,
        "allow_upsampling": False,
        "n_per_step": 12,
        "octaves": None,
    },
}


def read_config_file(path: str) -> Dict[str, Any]:
    """
    Read a TOML or JSON config file

    Args:
        path: File path; the extension selects the parser

    Returns:
        Parsed mapping
    """
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigConflictError(f"config file not found: {path}")

    try:
        if config_path.suffix.lower() == ".toml":
            with open(config_path, "rb") as f:
                return tomllib.load(f)
        with open(config_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigConflictError(f"cannot parse config file {path}: {e}") from e


@dataclass
class RunConfig:
    """Fully resolved parameters for one command"""

    command: str
    params: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def resolve(cls,
                command: str,
                flags: Optional[Dict[str, Any]] = None,
                config_file: Optional[str] = None,
                settings: Optional[Settings] = None) -> "RunConfig":
        """
        Build a RunConfig: defaults <- environment <- config file <- flags

        Args:
            command: One of synth, train, detect, eval
            flags: Parameters given explicitly; None values are ignored
            config_file: Optional TOML/JSON file
            settings: Environment defaults (read from the environment if omitted)

        Returns:
            Validated RunConfig
        """
        if command not in COMMAND_DEFAULTS:
            raise ConfigConflictError(f"unknown command: {command}")

        settings = settings or get_settings()
        params: Dict[str, Any] = _common_defaults(settings)
        params.update(COMMAND_DEFAULTS[command])

        if config_file:
            data = read_config_file(config_file)
            # Flat keys first, then the section named after the command
            params.update({k: v for k, v in data.items() if not isinstance(v, dict)})
            params.update(data.get(command, {}))
            params["config"] = str(config_file)

        for key, value in (flags or {}).items():
            if value is not None:
                params[key] = value

        config = cls(command=command, params=params)
        config.validate()
        return config

    def __getitem__(self, key: str) -> Any:
        return self.params[key]

    def get(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)

    def echo(self) -> Dict[str, Any]:
        """Resolved parameters that determine outputs"""
        return {k: v for k, v in sorted(self.params.items()) if k not in VOLATILE_KEYS}

    def config_hash(self) -> str:
        canonical = json.dumps({"command": self.command, "params": self.echo()},
                               sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def validate(self) -> None:
        """Reject conflicting or out-of-range values before any work"""
        p = self.params

        if p.get("sigma") is not None and float(p["sigma"]) <= 0:
            raise ConfigConflictError(f"sigma must be > 0, got {p['sigma']}")
        if p.get("epsilon") is not None and float(p["epsilon"]) < 0:
            raise ConfigConflictError(f"epsilon must be >= 0, got {p['epsilon']}")
        if int(p.get("workers") or 1) < 1:
            raise ConfigConflictError("workers must be >= 1")

        backend = p.get("backend")
        if backend is not None and backend not in BACKENDS:
            raise ConfigConflictError(f"unknown backend {backend!r}; expected one of {BACKENDS}")

        mode = p.get("overlap_mode")
        if mode is not None and mode not in OVERLAP_MODES:
            raise ConfigConflictError(f"unknown overlap mode {mode!r}")
        threshold = p.get("overlap_threshold")
        if threshold is not None and not 0.0 < float(threshold) <= 1.0:
            raise ConfigConflictError(f"overlap threshold must be in (0, 1], got {threshold}")

        if "k" in p and int(p["k"]) < 1:
            raise ConfigConflictError(f"k must be >= 1, got {p['k']}")

        for key in ("octave",):
            if p.get(key) is not None and not 3.0 <= float(p[key]) <= 7.5:
                raise ConfigConflictError(f"{key} must lie in [3.0, 7.5], got {p[key]}")
        for octave in p.get("octaves") or []:
            if not 3.0 <= float(octave) <= 7.5:
                raise ConfigConflictError(f"grid octave must lie in [3.0, 7.5], got {octave}")

        if self.command == "eval":
            if p["experiment"] not in EXPERIMENTS:
                raise ConfigConflictError(f"unknown experiment {p['experiment']!r}")
            if p.get("rule") not in LOCALIZATION_RULES:
                raise ConfigConflictError(f"unknown localization rule {p.get('rule')!r}")
            if p["experiment"] == "scale-sweep":
                if p.get("allow_upsampling"):
                    raise ConfigConflictError("scale sweep never upsamples test images; "
                                              "drop allow_upsampling")
                if float(p["step"]) <= 0 or float(p["octave_span"]) <= 0:
                    raise ConfigConflictError("scale sweep step and span must be > 0")

        if self.command == "synth":
            if int(p["n_train"]) < 0 or int(p["n_test"]) < 0:
                raise ConfigConflictError("corpus sizes must be >= 0")
            if float(p["iod_min"]) <= 0 or float(p["iod_max"]) < float(p["iod_min"]):
                raise ConfigConflictError("need 0 < iod_min <= iod_max")
