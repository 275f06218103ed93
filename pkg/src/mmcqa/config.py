"""TOML run configuration: sections mirror the generator and run settings plus output paths.

Precedence, lowest first: built-in defaults, the config file, ``--set section.key=value``
overrides, then dedicated command-line flags such as ``--seed``.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import SyntheticConfig
from .pipeline import PipelineError, RunConfig, config_hash

RESULTS_ENV = "MMCQA_RESULTS_DIR"
DEFAULT_RESULTS = "results"


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    data_dir: str = ""  # corpus written by gen-data; empty means generate in memory
    results_dir: str = ""  # empty means $MMCQA_RESULTS_DIR, else ./results


@dataclass
class Diagnose:
    """Generator settings for the tight and loose corpora compared by diagnose-knn."""

    tight_topic_concentration: float = 0.6
    loose_topic_concentration: float = 0.15
    tight_noise_std: float = 0.5
    loose_noise_std: float = 1.0
    n_samples: int = 3000
    sizes: tuple[int, ...] = (1000, 2000, 3000)
    ks: tuple[int, ...] = tuple(range(1, 11))


@dataclass
class Settings:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    run: RunConfig = field(default_factory=RunConfig)
    paths: Paths = field(default_factory=Paths)
    diagnose: Diagnose = field(default_factory=Diagnose)
    seed: int = 0

    def results_dir(self) -> Path:
        return Path(self.paths.results_dir or os.environ.get(RESULTS_ENV) or DEFAULT_RESULTS)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "synthetic": self.synthetic.to_dict(),
            "run": self.run.to_dict(),
            "diagnose": {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self.diagnose).items()},
        }

    def digest(self) -> str:
        """Hash of everything that shapes results; output paths are excluded."""
        return config_hash(self.to_dict())


SECTIONS = {"synthetic": SyntheticConfig, "run": RunConfig, "paths": Paths, "diagnose": Diagnose}
TOP_LEVEL = ("seed",)


def _coerce(section: str, key: str, value: Any, current: Any) -> Any:
    """Check a value against the type of the field's current value."""
    where = f"[{section}] {key}"
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _apply(settings: Settings, doc: Mapping[str, Any], origin: str) -> None:
    for key, value in doc.items():
        if key in TOP_LEVEL:
            settings.seed = _coerce("top level", key, value, settings.seed)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"{origin}: unknown section or key {key!r}; allowed: "
                              f"{sorted(SECTIONS) + list(TOP_LEVEL)}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"{origin}: {key!r} must be a table")
        obj = getattr(settings, key)
        names = {f.name for f in dataclasses.fields(obj)}
        updates = {}
        for k, v in value.items():
            if k not in names:
                raise ConfigError(f"{origin}: unknown key {k!r} in [{key}]; allowed: {sorted(names)}")
            updates[k] = _coerce(key, k, v, getattr(obj, k))
        try:
            new = dataclasses.replace(obj, **updates)
            if hasattr(new, "validate"):
                new.validate()
            setattr(settings, key, new)
        except (ValueError, TypeError, PipelineError) as exc:
            raise ConfigError(f"{origin}: [{key}] {exc}") from exc


def parse_override(text: str) -> dict[str, Any]:
    """``section.key=value`` (value in TOML syntax, bare words read as strings) -> nested dict."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) == 1 and parts[0] in TOP_LEVEL:
        section, key = None, parts[0]
    elif len(parts) == 2:
        section, key = parts
    else:
        raise ConfigError(f"override {text!r}: expected section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return {key: value} if section is None else {section: {key: value}}


def load_settings(path: str | Path | None = None, overrides: Sequence[str] = ()) -> Settings:
    settings = Settings()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _apply(settings, doc, str(path))
    for text in overrides:
        _apply(settings, parse_override(text), f"--set {text}")
    return settings


def dump_toml(settings: Settings) -> str:
    """Resolved settings as TOML (paths included), for embedding next to outputs."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"seed = {settings.seed}"]
    for name in SECTIONS:
        lines.append(f"\n[{name}]")
        for k, v in dataclasses.asdict(getattr(settings, name)).items():
            lines.append(f"{k} = {fmt(v)}")
    return "\n".join(lines) + "\n"
