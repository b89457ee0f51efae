"""INI-style run configuration: sections ``dataset``, ``model``, ``training``,
``experiment`` and ``simulator``. Every key has a default (see ``DEFAULTS``).
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass, field
from pathlib import Path

from .training import StageSchedule

# section -> key -> (default, description)
DEFAULTS: dict[str, dict[str, tuple[str, str]]] = {
    "dataset": {
        "root": ("", "class-per-directory image root"),
        "others_id": ("others", "name of the evaluation-only others directory / label"),
    },
    "model": {
        "arch": ("resnet50v2", "backbone architecture: resnet50v2 or resnet-mini"),
        "weights": ("", "pretrained weights file; empty = $BATTERYSORT_CACHE/<arch>.pt"),
        "dropout": ("0.20", "dropout rate between pooling and the dense head"),
        "v_depth": ("2", "trainable backbone units in stage 1, counted back from the head"),
    },
    "training": {
        "stage1_lr": ("0.005", "stage-1 learning rate"),
        "stage1_epochs": ("300", "stage-1 epochs"),
        "stage1_patience": ("none", "stage-1 early-stopping patience (none = off)"),
        "stage2_lr": ("0.00005", "stage-2 learning rate"),
        "stage2_epochs": ("100", "stage-2 epochs"),
        "stage2_patience": ("10", "stage-2 early-stopping patience"),
        "stage2_extra_unfreeze": ("2", "backbone units added to stage V before stage 2"),
    },
    "experiment": {
        "regime": ("fine_tuned", "no_knowledge | non_optimal | fine_tuned"),
        "n_runs": ("10", "independent runs per configuration"),
        "base_seed": ("0", "run i uses seed base_seed + i"),
        "threshold": ("0.80", "rejection threshold for the others label"),
        "depths": ("0,1,2,3,4", "trainable-layer sweep values"),
        "rates": ("0,0.1,0.2,0.3,0.4,0.5", "dropout sweep values"),
        "output_dir": ("runs", "where run directories are written"),
        "save_checkpoints": ("true", "write a checkpoint per run"),
    },
    "simulator": {
        "ejector_positions": ("", "comma-separated belt positions in class order; empty = 1..K"),
        "belt_length": ("0", "belt length in battery spacings; 0 = last ejector + 1"),
        "threshold": ("0.80", "rejection threshold used on the line"),
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, path=None, line: int | None = None):
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.path, self.line = path, line


def _int_or_none(v: str) -> int | None:
    return None if v.strip().lower() in ("", "none") else int(v)


def _floats(v: str) -> list[float]:
    return [float(x) for x in v.split(",") if x.strip()]


def _ints(v: str) -> list[int]:
    return [int(x) for x in v.split(",") if x.strip()]


@dataclass
class Config:
    values: dict[str, dict[str, str]] = field(default_factory=lambda: {s: {k: d for k, (d, _) in keys.items()} for s, keys in DEFAULTS.items()})
    path: Path | None = None
    lines: dict[tuple[str, str], int] = field(default_factory=dict)

    # -- parsing -------------------------------------------------------
    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise ConfigError("config file not found", path)
        return cls.parse(path.read_text(), path)

    @classmethod
    def parse(cls, text: str, path=None) -> "Config":
        cfg = cls(path=Path(path) if path else None)
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=str(path or "<config>"))
        except configparser.Error as exc:
            raise ConfigError(str(exc).splitlines()[0], path, getattr(exc, "lineno", None)) from exc
        section = None
        for n, raw in enumerate(text.splitlines(), 1):
            m = re.match(r"\s*\[([^\]]+)\]", raw)
            if m:
                section = m.group(1).strip()
                continue
            m = re.match(r"\s*([A-Za-z0-9_]+)\s*[=:]", raw)
            if m and section:
                cfg.lines[(section, m.group(1).lower())] = n
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}]", path, cfg._line_of_section(text, section))
            for key, value in parser.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]", path, cfg.lines.get((section, key)))
                cfg.values[section][key] = value.strip()
        cfg.validate()
        return cfg

    @staticmethod
    def _line_of_section(text: str, section: str) -> int | None:
        for n, raw in enumerate(text.splitlines(), 1):
            if raw.strip() == f"[{section}]":
                return n
        return None

    def set(self, assignment: str) -> None:
        """Apply ``key=value`` or ``section.key=value``; bare keys must be unambiguous."""
        if "=" not in assignment:
            raise ConfigError(f"override {assignment!r} is not key=value")
        key, value = (s.strip() for s in assignment.split("=", 1))
        if "." in key:
            section, key = key.split(".", 1)
        else:
            owners = [s for s, keys in DEFAULTS.items() if key in keys]
            if len(owners) != 1:
                raise ConfigError(f"override key {key!r} is {'ambiguous' if owners else 'unknown'}; use section.key")
            section = owners[0]
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown override key {section}.{key}")
        self.values[section][key] = value
        self.lines.pop((section, key), None)
        self.validate()

    # -- typed access --------------------------------------------------
    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def _typed(self, section: str, key: str, conv):
        try:
            return conv(self.values[section][key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {section}.{key}: {self.values[section][key]!r} ({exc})",
                              self.path, self.lines.get((section, key))) from exc

    def number(self, section: str, key: str) -> float:
        return self._typed(section, key, float)

    def integer(self, section: str, key: str) -> int:
        return self._typed(section, key, int)

    def flag(self, section: str, key: str) -> bool:
        v = self.values[section][key].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"bad boolean for {section}.{key}: {v!r}", self.path, self.lines.get((section, key)))
        return v in ("true", "1", "yes")

    def validate(self) -> None:
        from .backbone import Regime

        self._typed("model", "dropout", float)
        self._typed("model", "v_depth", int)
        self._typed("experiment", "regime", Regime)
        for k in ("stage1_lr", "stage2_lr"):
            self._typed("training", k, float)
        for k in ("stage1_epochs", "stage2_epochs", "stage2_extra_unfreeze"):
            self._typed("training", k, int)
        for k in ("stage1_patience", "stage2_patience"):
            self._typed("training", k, _int_or_none)
        for k in ("n_runs", "base_seed"):
            self._typed("experiment", k, int)
        self._typed("experiment", "threshold", float)
        self._typed("experiment", "depths", _ints)
        self._typed("experiment", "rates", _floats)
        self._typed("simulator", "ejector_positions", _ints)
        self._typed("simulator", "belt_length", int)
        self.schedules()

    def schedules(self) -> tuple[StageSchedule, StageSchedule]:
        try:
            return (
                StageSchedule(self.number("training", "stage1_lr"), self.integer("training", "stage1_epochs"),
                              self._typed("training", "stage1_patience", _int_or_none)),
                StageSchedule(self.number("training", "stage2_lr"), self.integer("training", "stage2_epochs"),
                              self._typed("training", "stage2_patience", _int_or_none),
                              self.integer("training", "stage2_extra_unfreeze")),
            )
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"[training] {exc}", self.path) from exc

    def depths(self) -> list[int]:
        return self._typed("experiment", "depths", _ints)

    def rates(self) -> list[float]:
        return self._typed("experiment", "rates", _floats)

    def ejector_positions(self) -> list[int]:
        return self._typed("simulator", "ejector_positions", _ints)

    def line_of(self, section: str, key: str) -> int | None:
        return self.lines.get((section, key))

    # -- emitting ------------------------------------------------------
    def to_ini(self, with_comments: bool = False) -> str:
        out = io.StringIO()
        for section, keys in DEFAULTS.items():
            out.write(f"[{section}]\n")
            for key, (_, doc) in keys.items():
                if with_comments:
                    out.write(f"# {doc}\n")
                out.write(f"{key} = {self.values[section][key]}\n")
            out.write("\n")
        return out.getvalue()

    def snapshot(self) -> dict[str, dict[str, str]]:
        return {s: dict(v) for s, v in self.values.items()}
