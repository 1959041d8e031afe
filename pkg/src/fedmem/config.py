"""Experiment configuration: ``key = value`` pairs under ``[section]`` headers.

Errors carry the file path and, where one exists, the offending line.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .errors import ConfigurationError
from .federation import FedConfig
from .personalize import DEFAULT_GRID

SCENARIOS = ("compare", "unseen", "capacity_sweep", "kernel_sweep", "quality_sweep", "hw_split", "drift", "compress_sweep")


class ConfigError(ConfigurationError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path, self.line = path, line
        where = path or "<config>"
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}")


# -- value parsers ---------------------------------------------------------


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(conv: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        items = [t.strip() for t in text.replace(";", ",").split(",")]
        return tuple(conv(t) for t in items if t)

    return parse


def _optional(conv: Callable[[str], Any]) -> Callable[[str], Any]:
    def parse(text: str):
        if text.strip().lower() in ("", "none", "auto"):
            return None
        return conv(text)

    return parse


def _schedule(text: str) -> tuple[tuple[int, float], ...]:
    """``100:0.1, 150:0.1`` -> ((100, 0.1), (150, 0.1))."""
    out = []
    for item in _list(str)(text):
        at, _, factor = item.partition(":")
        if not factor:
            raise ValueError(f"schedule entries look like round:factor, got {item!r}")
        out.append((int(at), float(factor)))
    return tuple(out)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t

    return parse


floats = _list(float)
ints = _list(int)


# -- sections --------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    scenario: str = "compare"
    seed: int = 0
    out: str = "out"
    workers: int = 1


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 10
    num_coarse: int = 5
    samples_per_class: int = 400
    feature_dim: int = 16
    separation: float = 0.5
    coarse_separation: float | None = None
    partitioner: str = "dirichlet"
    alpha: float = 0.3
    beta: float = 10.0
    num_clients: int = 20
    split: tuple = (0.6, 0.2, 0.2)
    min_client_samples: int = 10


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (64, 32)
    repr_layer: int | None = None


@dataclass(frozen=True)
class PersonalizeConfig:
    k: int = 10
    sigma: float = 1.0
    lambda_grid: tuple = DEFAULT_GRID
    retrain_on_train_val: bool = False
    finetune_epochs: int = 5
    finetune_lr: float | None = None  # None: final scheduled FedAvg lr
    local_epochs: int = 50
    local_lr: float | None = None  # None: base FedAvg lr


@dataclass(frozen=True)
class UnseenConfig:
    train_fraction: float = 0.8


@dataclass(frozen=True)
class CapacityConfig:
    capacities: tuple = (0.1, 0.33, 0.66, 1.0)
    alphas: tuple = (0.1, 1e6)
    train_fraction: float = 0.8


@dataclass(frozen=True)
class KernelSweepConfig:
    ks: tuple = (1, 3, 5, 10, 20, 50)
    sigmas: tuple = (0.1, 1.0, 10.0, 100.0, 1000.0)


@dataclass(frozen=True)
class QualityConfig:
    epochs: int = 20
    checkpoints: tuple = (0, 1, 2, 5, 10, 20)
    lr: float = 0.05
    batch_size: int = 32


@dataclass(frozen=True)
class HwSplitConfig:
    delta_c: tuple = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
    train_fraction: float = 0.8


@dataclass(frozen=True)
class DriftConfig:
    t0: int = 20
    T: int = 60
    policies: tuple = ("fixed", "fifo", "concatenate")
    lam: float = 1.0
    train_fraction: float = 0.8
    shift_seed: int | None = None


@dataclass(frozen=True)
class CompressConfig:
    fractions: tuple = (0.1, 0.33, 0.66, 1.0)
    proj_dims: tuple = (2, 8, 16, 32)
    train_fraction: float = 0.8


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = RunConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    fed: FedConfig = FedConfig()
    personalize: PersonalizeConfig = PersonalizeConfig()
    unseen: UnseenConfig = UnseenConfig()
    capacity: CapacityConfig = CapacityConfig()
    kernel: KernelSweepConfig = KernelSweepConfig()
    quality: QualityConfig = QualityConfig()
    hw_split: HwSplitConfig = HwSplitConfig()
    drift: DriftConfig = DriftConfig()
    compress: CompressConfig = CompressConfig()
    source: str = field(default="", compare=False)

    @property
    def scenario(self) -> str:
        return self.run.scenario

    @property
    def seed(self) -> int:
        return self.run.seed

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)


# section name -> (dataclass, {key: parser})
_SECTIONS: dict[str, tuple[type, dict[str, Callable[[str], Any]]]] = {
    "run": (RunConfig, {"scenario": _choice(*SCENARIOS), "seed": int, "out": str, "workers": int}),
    "data": (
        DataConfig,
        {
            "num_classes": int,
            "num_coarse": int,
            "samples_per_class": int,
            "feature_dim": int,
            "separation": float,
            "coarse_separation": _optional(float),
            "partitioner": _choice("dirichlet", "pachinko"),
            "alpha": float,
            "beta": float,
            "num_clients": int,
            "split": floats,
            "min_client_samples": int,
        },
    ),
    "model": (ModelConfig, {"hidden": ints, "repr_layer": _optional(int)}),
    "fed": (
        FedConfig,
        {
            "rounds": int,
            "participation": float,
            "local_epochs": int,
            "batch_size": int,
            "lr": float,
            "lr_schedule": _schedule,
        },
    ),
    "personalize": (
        PersonalizeConfig,
        {
            "k": int,
            "sigma": float,
            "lambda_grid": floats,
            "retrain_on_train_val": _bool,
            "finetune_epochs": int,
            "finetune_lr": _optional(float),
            "local_epochs": int,
            "local_lr": _optional(float),
        },
    ),
    "unseen": (UnseenConfig, {"train_fraction": float}),
    "capacity": (CapacityConfig, {"capacities": floats, "alphas": floats, "train_fraction": float}),
    "kernel": (KernelSweepConfig, {"ks": ints, "sigmas": floats}),
    "quality": (QualityConfig, {"epochs": int, "checkpoints": ints, "lr": float, "batch_size": int}),
    "hw_split": (HwSplitConfig, {"delta_c": floats, "train_fraction": float}),
    "drift": (
        DriftConfig,
        {
            "t0": int,
            "t": int,
            "policies": _list(_choice("fixed", "fifo", "concatenate")),
            "lambda": float,
            "train_fraction": float,
            "shift_seed": _optional(int),
        },
    ),
    "compress": (CompressConfig, {"fractions": floats, "proj_dims": ints, "train_fraction": float}),
}
_FIELD_ALIASES = {("drift", "lambda"): "lam", ("drift", "t"): "T"}  # keys are case-folded

ALWAYS_REQUIRED = ("run", "data", "fed", "personalize")
SCENARIO_SECTION = {
    "unseen": "unseen",
    "capacity_sweep": "capacity",
    "kernel_sweep": "kernel",
    "quality_sweep": "quality",
    "hw_split": "hw_split",
    "drift": "drift",
    "compress_sweep": "compress",
}


def _line_index(text: str) -> dict[tuple[str, str | None], int]:
    """Map (section, key) and (section, None) to 1-based line numbers."""
    index: dict[tuple[str, str | None], int] = {}
    section = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            index.setdefault((section, None), no)
        elif section is not None:
            for sep in ("=", ":"):
                if sep in line:
                    key = line.split(sep, 1)[0].strip().lower()
                    index.setdefault((section, key), no)
                    break
    return index


def parse_config(text: str, path: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str.lower  # type: ignore[assignment]
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        msg = getattr(exc, "message", str(exc)).splitlines()[0]
        raise ConfigError(msg, path, line) from None
    lines = _line_index(text)

    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]", path, lines.get((name, None)))
    for name in ALWAYS_REQUIRED:
        if not parser.has_section(name):
            raise ConfigError(f"missing required section [{name}]", path)
    if not parser.has_option("run", "scenario"):
        raise ConfigError("[run] must set scenario", path, lines.get(("run", None)))

    built = {}
    for name, (cls, keys) in _SECTIONS.items():
        if not parser.has_section(name):
            continue
        kwargs = {}
        for key, raw in parser.items(name):
            line = lines.get((name, key))
            if key not in keys:
                raise ConfigError(f"[{name}] unknown key {key!r}", path, line)
            try:
                kwargs[_FIELD_ALIASES.get((name, key), key)] = keys[key](raw)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}", path, line) from None
        try:
            built[name] = cls(**kwargs)
        except (ConfigurationError, TypeError) as exc:
            raise ConfigError(f"[{name}] {exc}", path, lines.get((name, None))) from None

    scenario = built["run"].scenario
    needed = SCENARIO_SECTION.get(scenario)
    if needed and needed not in built:
        raise ConfigError(f"scenario {scenario} requires a [{needed}] section", path)

    cfg = ExperimentConfig(source=path, **built)
    _validate(cfg, path, lines)
    return cfg


def _validate(cfg: ExperimentConfig, path: str, lines) -> None:
    def fail(section: str, key: str, msg: str):
        raise ConfigError(f"[{section}] {key}: {msg}", path, lines.get((section, key)))

    d = cfg.data
    if len(d.split) != 3 or abs(sum(d.split) - 1.0) > 1e-9 or min(d.split) <= 0:
        fail("data", "split", "needs three positive ratios summing to 1")
    if d.num_classes % d.num_coarse:
        fail("data", "num_coarse", "must divide num_classes")
    if d.alpha <= 0:
        fail("data", "alpha", "must be positive")
    if d.num_clients < 1:
        fail("data", "num_clients", "must be >= 1")
    if any(h < 1 for h in cfg.model.hidden):
        fail("model", "hidden", "layer widths must be positive")
    grid = cfg.personalize.lambda_grid
    if any(not 0 <= g <= 1 for g in grid) or 0.0 not in grid or 1.0 not in grid:
        fail("personalize", "lambda_grid", "must lie in [0, 1] and contain both 0 and 1")
    if cfg.personalize.k < 1:
        fail("personalize", "k", "must be >= 1")
    if cfg.personalize.sigma <= 0:
        fail("personalize", "sigma", "must be positive")
    for section in ("unseen", "capacity", "hw_split", "compress"):
        tf = getattr(cfg, section).train_fraction
        if not 0 < tf < 1:
            fail(section, "train_fraction", "must lie in (0, 1)")
    if any(not 0 < c <= 1 for c in cfg.capacity.capacities):
        fail("capacity", "capacities", "must lie in (0, 1]")
    if any(not 0 <= dc <= 0.5 for dc in cfg.hw_split.delta_c):
        fail("hw_split", "delta_c", "must lie in [0, 0.5]")
    if not 0 < cfg.drift.t0 < cfg.drift.T:
        fail("drift", "t0", "needs 0 < t0 < T")
    if not 0 <= cfg.drift.lam <= 1:
        fail("drift", "lambda", "must lie in [0, 1]")
    if any(not 0 < f <= 1 for f in cfg.compress.fractions):
        fail("compress", "fractions", "must lie in (0, 1]")


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    return parse_config(text, str(p))


def render_config(cfg: ExperimentConfig) -> list[str]:
    """Resolved configuration as ``section.key = value`` lines (for manifests)."""
    out = []
    for name in _SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            value = getattr(section, f.name)
            if isinstance(value, tuple):
                value = ", ".join(":".join(map(str, v)) if isinstance(v, tuple) else str(v) for v in value)
            out.append(f"{name}.{f.name} = {value}")
    return out
