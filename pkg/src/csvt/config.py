"""``key = value`` run configuration with named presets.

Keys are grouped by prefix: ``model.*``, ``ssl.*``, ``finetune.*``,
``synth.*``, ``bench.*`` plus a few top-level ones (``preset``, ``seed``,
``precision``, ``threads``). Tuples are written comma-separated. Lines
starting with ``#`` and blank lines are ignored; unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .data import SynthSpec
from .model import CsvtConfig
from .ssl import SslConfig
from .train import FinetuneConfig


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class BenchConfig:
    sizes: tuple = (224, 336, 448, 560, 672)
    repeats: int = 5
    warmup: int = 1
    element_budget: int = 200_000_000
    timing: bool = True


@dataclasses.dataclass
class EvalConfig:
    batch_size: int = 64


SECTIONS = {
    "model": CsvtConfig,
    "ssl": SslConfig,
    "finetune": FinetuneConfig,
    "synth": SynthSpec,
    "bench": BenchConfig,
    "eval": EvalConfig,
}
# derived from the global seed unless set explicitly
_SEEDED = ("ssl.seed", "finetune.seed", "synth.seed")
TOP_LEVEL = {"preset": "full", "seed": 0, "precision": "f32", "threads": 1}

PRESETS = {
    "full": {},
    "desk": {
        "model.image_size": 64, "model.embed_dim": 64, "model.num_layers": 4,
        "model.num_heads": 2,
        "ssl.epochs": 30, "ssl.batch_size": 16, "ssl.warmup_epochs": 3,
        "ssl.global_size": 64, "ssl.local_size": 32, "ssl.head_bottleneck": 64,
        "finetune.epochs": 30, "finetune.batch_size": 16, "finetune.warmup_epochs": 6,
        "eval.batch_size": 16,
    },
}


def _defaults() -> dict:
    out = dict(TOP_LEVEL)
    for prefix, cls in SECTIONS.items():
        for f in dataclasses.fields(cls):
            out[f"{prefix}.{f.name}"] = f.default
    return out


_DEFAULTS = _defaults()


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of ``key``'s default value."""
    default = _DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = float if any(isinstance(v, float) for v in default) else int
            return tuple(kind(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value).lower() if isinstance(value, bool) else str(value)


def parse_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = parse_value(key, value)
    return out


class RunConfig:
    """Fully resolved settings: defaults < preset < file < overrides."""

    def __init__(self, values: dict | None = None, **overrides):
        explicit = dict(values or {})
        explicit.update(overrides)
        for key in explicit:
            if key not in _DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
        preset = explicit.get("preset", TOP_LEVEL["preset"])
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        resolved = dict(_DEFAULTS)
        resolved.update(PRESETS[preset])
        resolved.update(explicit)
        for key in _SEEDED:
            if key not in explicit:
                resolved[key] = resolved["seed"]
        if resolved["precision"] not in ("f32", "f64"):
            raise ConfigError("precision must be f32 or f64")
        if resolved["threads"] < 1:
            raise ConfigError("threads must be >= 1")
        self.values = resolved
        # build once so invalid combinations fail at load time
        try:
            self.model(), self.ssl(), self.synth().validate()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, source: str | Path | None = None, **overrides) -> "RunConfig":
        """Read a file, or take ``source`` as a preset name when no such file exists."""
        values = {}
        if source is not None:
            path = Path(source)
            if path.is_file():
                values = parse_text(path.read_text(encoding="utf-8"), str(path))
            elif str(source) in PRESETS:
                values = {"preset": str(source)}
            else:
                raise ConfigError(f"no config file or preset named {str(source)!r}")
        return cls(values, **{k: v for k, v in overrides.items() if v is not None})

    def __getitem__(self, key: str):
        return self.values[key]

    def section(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    def model(self) -> CsvtConfig:
        return CsvtConfig(**self.section("model"))

    def ssl(self) -> SslConfig:
        return SslConfig(**self.section("ssl"))

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(**self.section("finetune"))

    def synth(self) -> SynthSpec:
        return SynthSpec(**self.section("synth"))

    def bench(self) -> BenchConfig:
        return BenchConfig(**self.section("bench"))

    def eval(self) -> EvalConfig:
        return EvalConfig(**self.section("eval"))

    def dump(self) -> str:
        """Every resolved key, one per line, in a form :func:`parse_text` reads back."""
        return "".join(f"{k} = {format_value(v)}\n" for k, v in sorted(self.values.items()))
