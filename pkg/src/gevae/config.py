"""Run configuration: an INI file with fixed sections, validated and defaulted.

Every key has a type, a default and a range check. Unknown sections or keys
are rejected with the closest known name as a suggestion, and the effective
configuration can be written back out (``config.echo``) to reproduce a run.
"""
from __future__ import annotations

import configparser
import difflib
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class Field:
    kind: type | str
    default: Any
    check: Callable[[Any], bool] | None = None
    rule: str = ""


def _positive(x):
    return x > 0


def _nonnegative(x):
    return x >= 0


def _choice(*options):
    return Field(str, options[0], lambda v: v in options, f"one of {', '.join(options)}")


def _prob(default):
    return Field(float, default, lambda v: 0.0 <= v <= 1.0, "in [0, 1]")


def _pos_int(default):
    return Field(int, default, _positive, "> 0")


SCHEMA: dict[str, dict[str, Field]] = {
    "data": {
        "kind": _choice("community", "grid", "ladder", "er"),
        "directory": Field(str, ""),
        "num_graphs": _pos_int(200),
        "num_clusters": _pos_int(2),
        "cluster_min": _pos_int(10),
        "cluster_max": _pos_int(15),
        "p_in": _prob(0.3),
        "p_out": _prob(0.05),
        "rows_min": _pos_int(3),
        "rows_max": _pos_int(8),
        "cols_min": _pos_int(3),
        "cols_max": _pos_int(8),
        "rungs": Field("intlist", (4, 8, 16, 32), lambda v: len(v) > 0 and min(v) > 0,
                       "a non-empty list of positive integers"),
        "n": _pos_int(20),
        "p": _prob(0.2),
        "train_fraction": Field(float, 2.0 / 3.0, lambda v: 0.0 < v < 1.0, "in (0, 1)"),
        "embedding": _choice("eigenmap", "lle"),
        "workers": _pos_int(1),
    },
    "model": {
        "embed_dim": _pos_int(6),
        "decoder_dim": Field(int, 0, _nonnegative, ">= 0 (0 means embed_dim)"),
        "flow_depth": Field(int, 6, _nonnegative, ">= 0"),
        "bins": Field(int, 8, lambda v: v >= 2, ">= 2"),
        "tail_bound": Field(float, 3.0, _positive, "> 0"),
        "width": _pos_int(64),
        "heads": _pos_int(4),
        "inducing_points": _pos_int(32),
        "conditioner_depth": _pos_int(2),
        "decoder_depth": _pos_int(3),
        "sigma": Field(float, 0.1, _positive, "> 0"),
        "eps_rate": Field(float, 1e-8, _positive, "> 0"),
    },
    "train": {
        "steps": Field(int, 3000, _nonnegative, ">= 0"),
        "batch_size": _pos_int(16),
        "lr": Field(float, 1e-3, _nonnegative, ">= 0"),
        "clip": Field(float, 5.0, _positive, "> 0"),
        "log_every": _pos_int(1),
        "checkpoint_every": Field(int, 0, _nonnegative, ">= 0 (0 keeps only the final one)"),
    },
    "eval": {
        "num_samples": _pos_int(128),
        "num_generated": Field(int, 0, _nonnegative, ">= 0 (0 means test-set size)"),
        "statistics": Field("strlist", ("degree", "clustering", "orbit"),
                            lambda v: len(v) > 0 and set(v) <= {"degree", "clustering", "orbit"},
                            "a non-empty subset of degree, clustering, orbit"),
        "kernel": _choice("tv", "l2"),
        "bandwidth": Field(float, 1.0, _positive, "> 0"),
        "estimator": _choice("biased", "unbiased"),
        "interpolation_steps": _pos_int(5),
        "interpolate_a": Field(int, 0, _nonnegative, ">= 0"),
        "interpolate_b": Field(int, 1, _nonnegative, ">= 0"),
        "figure_dim": Field(int, 8, lambda v: v >= 2, ">= 2"),
    },
    "run": {
        "seed": Field(int, 0, _nonnegative, ">= 0"),
        "output": Field(str, "runs/default", lambda v: bool(v.strip()), "non-empty"),
    },
}


class RunConfig:
    """Validated configuration; ``cfg.model.sigma`` style access."""

    def __init__(self, values: dict[str, dict[str, Any]]):
        self._values = values
        for section, entries in values.items():
            setattr(self, section, _Section(section, entries))

    def to_dict(self) -> dict:
        return {s: dict(v) for s, v in self._values.items()}

    @property
    def output(self) -> Path:
        return Path(self._values["run"]["output"])

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, entries in self._values.items():
            parser[section] = {k: _format(v) for k, v in entries.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


class _Section:
    def __init__(self, name, entries):
        self.__dict__.update(entries)
        self._name = name

    def __repr__(self):
        items = ", ".join(f"{k}={v!r}" for k, v in self.__dict__.items() if not k.startswith("_"))
        return f"[{self._name}] {items}"


def _format(value) -> str:
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _suggest(name: str, options) -> str:
    close = difflib.get_close_matches(name, list(options), n=1)
    return f"; did you mean {close[0]!r}?" if close else ""


def _convert(section: str, key: str, raw: str, field: Field):
    where = f"[{section}] {key}"
    text = raw.strip()
    try:
        if field.kind is int:
            value = int(text)
        elif field.kind is float:
            value = float(text)
        elif field.kind == "intlist":
            value = tuple(int(t) for t in text.replace(",", " ").split())
        elif field.kind == "strlist":
            value = tuple(t for t in text.replace(",", " ").split())
        else:
            value = text
    except ValueError:
        kind = field.kind if isinstance(field.kind, str) else field.kind.__name__
        raise ConfigError(f"{where}: expected {kind}, got {raw!r}") from None
    if field.check is not None and not field.check(value):
        raise ConfigError(f"{where}: value {raw.strip()!r} out of range, must be {field.rule}")
    return value


def _lookup(section: str, key: str) -> Field:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]{_suggest(section, SCHEMA)}")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]{_suggest(key, SCHEMA[section])}")
    return SCHEMA[section][key]


def _resolve_override(item: str) -> tuple[str, str, str]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    name, value = item.split("=", 1)
    name = name.strip()
    if "." in name:
        section, key = name.split(".", 1)
        return section, key, value
    owners = [s for s, keys in SCHEMA.items() if name in keys]
    if len(owners) == 1:
        return owners[0], name, value
    if len(owners) > 1:
        raise ConfigError(f"override key {name!r} is ambiguous; use one of "
                          + ", ".join(f"{s}.{name}" for s in owners))
    every = [k for keys in SCHEMA.values() for k in keys]
    raise ConfigError(f"unknown key {name!r}{_suggest(name, every)}")


def load_config(path=None, overrides=()) -> RunConfig:
    """Parse, default and validate a configuration file plus ``key=value`` overrides.

    ``path`` may be None for an all-defaults configuration. Override keys are
    ``section.key`` or a bare key that is unique across sections.
    """
    raw: dict[str, dict[str, str]] = {s: {} for s in SCHEMA}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {str(path)!r} not found")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(path.read_text(), source=str(path))
        except configparser.Error as exc:
            first = str(exc).splitlines()[0]
            raise ConfigError(f"cannot parse {str(path)!r}: {first}") from None
        for section in parser.sections():
            for key, value in parser[section].items():
                _lookup(section, key)
                raw[section][key] = value
    for item in overrides:
        section, key, value = _resolve_override(item)
        _lookup(section, key)
        raw[section][key] = value

    values: dict[str, dict[str, Any]] = {}
    for section, fields in SCHEMA.items():
        values[section] = {}
        for key, field in fields.items():
            if key in raw[section]:
                values[section][key] = _convert(section, key, raw[section][key], field)
            else:
                values[section][key] = field.default
    _cross_check(values)
    return RunConfig(values)


def _cross_check(values):
    m, d = values["model"], values["data"]
    if m["width"] % m["heads"]:
        raise ConfigError(f"[model] width: {m['width']} is not divisible by heads={m['heads']}")
    for lo, hi in (("cluster_min", "cluster_max"), ("rows_min", "rows_max"), ("cols_min", "cols_max")):
        if d[lo] > d[hi]:
            raise ConfigError(f"[data] {lo}: {d[lo]} exceeds {hi}={d[hi]}")
    if d["directory"] and not Path(d["directory"]).is_dir():
        raise ConfigError(f"[data] directory: {d['directory']!r} does not exist")


def dataset_params(cfg: RunConfig) -> dict:
    """Generator parameters relevant to ``cfg.data.kind``."""
    d = cfg.data
    keys = {
        "community": ("num_graphs", "num_clusters", "cluster_min", "cluster_max", "p_in", "p_out"),
        "grid": ("num_graphs", "rows_min", "rows_max", "cols_min", "cols_max"),
        "ladder": ("rungs",),
        "er": ("num_graphs", "n", "p"),
    }[d.kind]
    out = {k: getattr(d, k) for k in keys}
    if "rungs" in out:
        out["rungs"] = list(out["rungs"])
    return out


def model_config_kwargs(cfg: RunConfig) -> dict:
    m = cfg.model.__dict__
    out = {k: v for k, v in m.items() if not k.startswith("_")}
    out["decoder_dim"] = out["decoder_dim"] or None
    return out
