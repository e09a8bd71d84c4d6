"""Run configuration: dataclass defaults, presets, TOML/JSON files and overrides"""

from __future__ import annotations

import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

from .distill import DistillConfig
from .errors import ConfigError
from .student import StudentConfig
from .teacher import TeacherConfig
from .trafficgen import GEAR_ID, RPM_ID, AttackKind, AttackSpec

logger = logging.getLogger(__name__)

# simulate --attack choices; rpm and gear are spoofs of fixed identifiers
ATTACK_CHOICES = ("dos", "fuzzy", "spoof", "rpm", "gear")
SPOOF_TARGETS = {"rpm": RPM_ID, "gear": GEAR_ID}

PRESETS: dict[str, dict[str, dict[str, Any]]] = {
    "desk": {},
    "published": {
        "teacher": {"learning_rate": 5e-5, "batch_size": 128, "epochs": 3, "max_length": 16},
        "student": {
            "learning_rate": 1e-5,
            "batch_size": 1024,
            "epochs": 8,
            "hidden_size": 64,
            "lstm_layers": 2,
        },
    },
}


@dataclass
class SimulationConfig:
    """Synthetic log generation settings"""

    attack: str = "dos"
    duration: float = 60.0
    rate: float = 100.0
    attack_fraction: Optional[float] = None  # overrides rate when set
    window: Optional[tuple[float, float]] = None
    inject_id: int = 0x000
    target_id: Optional[int] = None
    payload: Optional[tuple[int, ...]] = None

    def validate(self) -> None:
        if self.attack not in ATTACK_CHOICES:
            raise ConfigError(f"simulate.attack must be one of {ATTACK_CHOICES}, got {self.attack!r}")
        if not self.duration > 0:
            raise ConfigError(f"simulate.duration must be > 0, got {self.duration}")
        if not self.rate > 0:
            raise ConfigError(f"simulate.rate must be > 0, got {self.rate}")
        if self.attack_fraction is not None and not 0 < self.attack_fraction < 1:
            raise ConfigError("simulate.attack_fraction must lie strictly between 0 and 1")
        if self.window is not None and len(self.window) != 2:
            raise ConfigError("simulate.window must be [start, end]")
        if self.attack == "spoof" and self.target_id is None:
            raise ConfigError("simulate.target_id is required for --attack spoof (or use rpm / gear)")

    def attack_spec(self, seed: int, benign_rate: float) -> AttackSpec:
        rate = self.rate
        if self.attack_fraction is not None:
            rate = benign_rate * self.attack_fraction / (1.0 - self.attack_fraction)
        target = self.target_id if self.target_id is not None else SPOOF_TARGETS.get(self.attack)
        kind = AttackKind.SPOOF if self.attack in SPOOF_TARGETS else AttackKind(self.attack)
        return AttackSpec(
            kind=kind,
            rate=rate,
            window=tuple(self.window) if self.window is not None else None,
            inject_id=self.inject_id,
            target_id=target,
            payload=tuple(self.payload) if self.payload is not None else None,
            seed=seed,
        )


@dataclass
class RunConfig:
    """Everything a command needs, fully resolved before work starts"""

    name: Optional[str] = None
    seed: int = 0
    out: Optional[str] = None
    threads: int = 1
    preset: str = "desk"
    dataset: Optional[str] = None
    train_ratio: float = 0.7
    strict: bool = False
    teacher_checkpoint: Optional[str] = None
    model: Optional[str] = None
    eval_split: str = "test"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    simulate: SimulationConfig = field(default_factory=SimulationConfig)

    def __post_init__(self):
        # the distillation student is the [student] section
        self.distill.student = self.student

    def validate(self) -> None:
        if self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if not 0 < self.train_ratio < 1:
            raise ConfigError(f"train_ratio must lie strictly between 0 and 1, got {self.train_ratio}")
        if self.eval_split not in ("train", "test"):
            raise ConfigError("eval_split must be 'train' or 'test'")
        self.teacher.validate()
        self.distill.validate()
        self.simulate.validate()

    def output_dir(self, command: str) -> Path:
        if self.out:
            return Path(self.out).expanduser()
        return Path("runs") / (self.name or command)

    def to_dict(self) -> dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in SECTIONS}
        for section in SECTIONS:
            data[section] = asdict(getattr(self, section))
        data["distill"].pop("student")
        return data

    def write(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


SECTIONS = ("teacher", "student", "distill", "simulate")


def read_config_file(path: Path) -> dict[str, Any]:
    """Parse a TOML or JSON config file by suffix"""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as f:
                return tomllib.load(f)
        if path.suffix == ".json":
            return json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"{path}: {e}")
    raise ConfigError(f"{path}: config files must end in .toml or .json")


def _coerce(key: str, current: Any, value: Any) -> Any:
    if isinstance(value, list):
        value = tuple(value)
    if current is None or value is None:
        return value
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true or false, got {value!r}")
        return value
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(current, (int, float)) and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{key} expects a number, got {value!r}")
    if isinstance(current, int) and isinstance(value, float):
        if not value.is_integer():
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, str) and not isinstance(value, str):
        raise ConfigError(f"{key} expects a string, got {value!r}")
    return value


def _assign(target: Any, key: str, values: dict[str, Any], prefix: str = "") -> None:
    known = {f.name for f in fields(target)}
    for name, value in values.items():
        dotted = f"{prefix}{name}"
        if name not in known or (prefix == "distill." and name == "student"):
            raise ConfigError(f"unknown config key {dotted!r} in {key}")
        setattr(target, name, _coerce(dotted, getattr(target, name), value))


def apply_overrides(config: RunConfig, data: dict[str, Any], source: str) -> RunConfig:
    """Merge a nested mapping (file contents, preset or flags) into config"""
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table in {source}")
            _assign(getattr(config, key), source, value, prefix=f"{key}.")
        else:
            _assign(config, source, {key: value})
    return config


def parse_assignment(text: str) -> dict[str, Any]:
    """``section.key=value`` into a nested mapping; values use TOML syntax"""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = (part.strip() for part in text.split("=", 1))
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    parts = key.split(".")
    if len(parts) > 2 or not all(parts):
        raise ConfigError(f"--set key must be 'key' or 'section.key', got {key!r}")
    return {parts[0]: {parts[1]: value}} if len(parts) == 2 else {parts[0]: value}


def load_run_config(
    path: Optional[Path] = None,
    preset: Optional[str] = None,
    flags: Optional[dict[str, Any]] = None,
    assignments: Optional[list[str]] = None,
) -> RunConfig:
    """Resolve defaults < preset < file < flags < --set assignments"""
    file_data = read_config_file(path) if path is not None else {}
    chosen = preset or file_data.get("preset") or "desk"
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}; choose from {sorted(PRESETS)}")

    config = RunConfig()
    apply_overrides(config, PRESETS[chosen], f"preset {chosen}")
    apply_overrides(config, file_data, str(path))
    config.preset = chosen
    apply_overrides(config, flags or {}, "command line")
    for text in assignments or []:
        apply_overrides(config, parse_assignment(text), f"--set {text}")
    config.validate()
    logger.debug("resolved config: %s", config.to_dict())
    return config
