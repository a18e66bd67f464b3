"""Experiment configuration: a sectioned INI file with a fixed schema.

Every key has a parser, a canonical formatter and a default, so loading and
re-emitting a configuration is idempotent.  Validation errors carry the file
line of the offending key.
"""

from __future__ import annotations

import ast
import configparser
import dataclasses
import math
import operator
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np

from .tree import MAX_STEPS


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None, source: str = "<config>"):
        self.line = line
        self.source = source
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)


# ---------------------------------------------------------------------------
# value parsers and formatters


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError(f"expected a finite number, got {text!r}")
    return v


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _int(text: str) -> int:
    return int(text)


def _floats(text: str) -> tuple:
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    return tuple(_float(p) for p in text.replace(",", " ").split())


def _fmt_floats(v) -> str:
    return ", ".join(_fmt_float(x) for x in v) if v else "none"


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split())


def _fmt_ints(v) -> str:
    return ", ".join(str(x) for x in v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _fmt_bool(v: bool) -> str:
    return "true" if v else "false"


def _auto_float(text: str):
    return "auto" if text.strip().lower() == "auto" else _float(text)


def _fmt_auto(v) -> str:
    return v if v == "auto" else _fmt_float(v)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip().lower()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return t

    return parse


def _words(text: str) -> tuple:
    return tuple(sorted({p.strip().lower() for p in text.replace(",", " ").split()}))


def _fmt_words(v) -> str:
    return ", ".join(v)


def _boundary_items(text: str) -> tuple:
    """``none``, ``inner``, ``outer``, a coordinate, or ``R phi0 phi1``; items split by ``|``."""
    text = text.strip()
    if text.lower() in ("", "none"):
        return ()
    items = []
    for part in text.split("|"):
        part = part.strip()
        if part.lower() in ("inner", "outer"):
            items.append(part.lower())
            continue
        nums = _floats(part)
        if len(nums) == 3:
            items.append(nums)
        else:
            items.extend(nums)
    return tuple(items)


def _fmt_boundary(v) -> str:
    if not v:
        return "none"
    out = []
    for item in v:
        if isinstance(item, str):
            out.append(item)
        elif isinstance(item, tuple):
            out.append(" ".join(_fmt_float(x) for x in item))
        else:
            out.append(_fmt_float(item))
    return " | ".join(out)


# ---------------------------------------------------------------------------
# restricted expressions for coefficients


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
_CONSTS = {"pi": math.pi, "e": math.e}
VARIABLES = ("x", "y", "r", "phi", "t", "W")
_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNOPS = {ast.USub: operator.neg, ast.UAdd: operator.pos}


@dataclass(frozen=True)
class Expression:
    """Arithmetic in ``x, y, r, phi, t, W`` with a few elementary functions."""

    text: str
    tree: Any = field(compare=False, repr=False)
    names: frozenset = field(compare=False)

    @classmethod
    def parse(cls, text: str) -> "Expression":
        text = text.strip()
        try:
            node = ast.parse(text, mode="eval").body
        except SyntaxError as exc:
            raise ValueError(f"cannot parse expression {text!r}") from exc
        names = set()
        cls._check(node, names)
        return cls(text, node, frozenset(names))

    @classmethod
    def _check(cls, node, names: set) -> None:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return
        if isinstance(node, ast.Name):
            if node.id in VARIABLES:
                names.add(node.id)
            elif node.id not in _CONSTS:
                raise ValueError(f"unknown name {node.id!r} in expression")
            return
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            cls._check(node.left, names)
            cls._check(node.right, names)
            return
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
            cls._check(node.operand, names)
            return
        if (
            isinstance(node, ast.Call)
            and isinstance(node.func, ast.Name)
            and node.func.id in _FUNCS
            and len(node.args) == 1
            and not node.keywords
        ):
            cls._check(node.args[0], names)
            return
        raise ValueError(f"unsupported construct in expression: {ast.dump(node)}")

    @property
    def is_constant(self) -> bool:
        return not self.names

    @property
    def is_adapted(self) -> bool:
        return bool(self.names & {"t", "W"})

    def evaluate(self, env: dict):
        def ev(node):
            if isinstance(node, ast.Constant):
                return float(node.value)
            if isinstance(node, ast.Name):
                return env[node.id] if node.id in VARIABLES else _CONSTS[node.id]
            if isinstance(node, ast.BinOp):
                return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
            if isinstance(node, ast.UnaryOp):
                return _UNOPS[type(node.op)](ev(node.operand))
            return _FUNCS[node.func.id](ev(node.args[0]))

        with np.errstate(all="ignore"):
            return ev(self.tree)


def _expr(text: str) -> str:
    e = Expression.parse(text)
    if e.is_constant:
        return _fmt_float(e.evaluate({}))
    return e.text


# ---------------------------------------------------------------------------
# schema


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str]
    default: Any
    unit: str = ""


SCHEMA: dict[str, dict[str, Key]] = {
    "geometry": {
        "kind": Key(_choice("interval", "annulus"), str, "interval"),
        "j": Key(_int, str, 16, "cells"),
        "l": Key(_float, _fmt_float, 1.0, "length"),
        "nr": Key(_int, str, 6, "radial cells"),
        "nphi": Key(_int, str, 12, "angular cells"),
        "r0": Key(_float, _fmt_float, 1.0, "length"),
        "r1": Key(_float, _fmt_float, 2.0, "length"),
    },
    "time": {
        "t": Key(_float, _fmt_float, 1.0, "time"),
        "m": Key(_int, str, 10, "steps"),
    },
    "regions": {
        "g0": Key(_floats, _fmt_floats, (0.3, 0.7), "coordinates"),
        "o": Key(_floats, _fmt_floats, (0.5, 0.9), "coordinates"),
        "o_gamma": Key(_boundary_items, _fmt_boundary, (1.0,), "boundary points or arcs"),
        "g1": Key(_floats, _fmt_floats, (0.5, 0.65), "coordinates"),
        "t0": Key(_float, _fmt_float, 0.0, "time"),
    },
    "potentials": {
        "a1": Key(_expr, str, "0.0", "1/time"),
        "a2": Key(_expr, str, "0.0", "1/sqrt(time)"),
        "b1": Key(_expr, str, "0.0", "1/time"),
        "b2": Key(_expr, str, "0.0", "1/sqrt(time)"),
    },
    "sources": {
        "shape": Key(_choice("bump", "zero"), str, "bump"),
        "center": Key(_float, _fmt_float, 0.7, "coordinate"),
        "width": Key(_float, _fmt_float, 0.2, "coordinate"),
        "amplitude": Key(_float, _fmt_float, 1.0, "field units"),
        "boundary_amplitude": Key(_float, _fmt_float, 0.0, "field units"),
        "weight_constant": Key(_auto_float, _fmt_auto, "auto", "time"),
    },
    "carleman": {
        "lambda": Key(_float, _fmt_float, 2.0),
        "mu": Key(_float, _fmt_float, 1.5),
        "psi_peak": Key(_float, _fmt_float, 0.2),
        "weight_constant": Key(_auto_float, _fmt_auto, "auto", "time"),
        "lambdas": Key(_floats, _fmt_floats, (1.0, 2.0, 5.0, 10.0)),
        "samples": Key(_int, str, 20),
    },
    "hum": {
        "eps": Key(_float, _fmt_float, 1e-6),
        "cg_tol": Key(_float, _fmt_float, 1e-10),
        "max_iter": Key(_int, str, 200),
        "directions": Key(_int, str, 10),
    },
    "convergence": {
        "levels": Key(_ints, _fmt_ints, (8, 16, 32, 64), "cells"),
        "m": Key(_int, str, 4, "steps"),
    },
    "output": {
        "directory": Key(str, str, "out"),
        "formats": Key(_words, _fmt_words, ("csv", "json", "txt")),
    },
    "run": {
        "seed": Key(_int, str, 0),
        "allow_disjoint_regions": Key(_bool, _fmt_bool, False),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    values: dict
    lines: dict = field(default_factory=dict, compare=False, repr=False)
    source: str = field(default="<config>", compare=False, repr=False)

    def __getitem__(self, key: tuple[str, str]):
        return self.values[key]

    def get(self, section: str, key: str):
        return self.values[(section, key)]

    def replace(self, **changes) -> "ExperimentConfig":
        """``replace(run__seed=3)`` style overrides."""
        values = dict(self.values)
        for name, v in changes.items():
            section, key = name.split("__", 1)
            if (section, key) not in values:
                raise KeyError(name)
            values[(section, key)] = v
        return dataclasses.replace(self, values=values)

    def line_of(self, section: str, key: str) -> Optional[int]:
        return self.lines.get((section, key)) or self.lines.get((section, None))

    def error(self, section: str, key: Optional[str], message: str) -> ConfigError:
        line = self.line_of(section, key) if key else self.lines.get((section, None))
        label = f"[{section}] {key}" if key else f"[{section}]"
        return ConfigError(f"{label}: {message}", line, self.source)

    def to_ini(self) -> str:
        out = []
        for section, keys in SCHEMA.items():
            out.append(f"[{section}]")
            for key, spec in keys.items():
                unit = f"  # [{spec.unit}]" if spec.unit else ""
                out.append(f"{key} = {spec.fmt(self.values[(section, key)])}{unit}")
            out.append("")
        return "\n".join(out)


def default_config() -> ExperimentConfig:
    return ExperimentConfig({(s, k): spec.default for s, keys in SCHEMA.items() for k, spec in keys.items()})


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_]+)\s*[=:]")


def _line_index(text: str) -> dict:
    lines, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(raw)
        if m:
            section = m.group(1).strip().lower()
            lines.setdefault((section, None), i)
            continue
        m = _KEY_RE.match(raw)
        if m and section is not None:
            lines.setdefault((section, m.group(1).lower()), i)
    return lines


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and type-check; does not build the numerical problem."""
    lines = _line_index(text)
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError(f"malformed configuration ({exc.__class__.__name__})", line, source) from exc
    values = dict(default_config().values)
    for section in cp.sections():
        sec = section.lower()
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", lines.get((sec, None)), source)
        for key, text_value in cp.items(section):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"[{sec}] unknown key {key!r}", lines.get((sec, key)), source)
            try:
                values[(sec, key)] = SCHEMA[sec][key].parse(text_value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}", lines.get((sec, key)), source) from exc
    cfg = ExperimentConfig(values, lines, source)
    _check_scalars(cfg)
    return cfg


def _check_scalars(cfg: ExperimentConfig) -> None:
    def need(cond: bool, section: str, key: str, message: str):
        if not cond:
            raise cfg.error(section, key, message)

    g = cfg.get
    M = g("time", "m")
    need(1 <= M <= MAX_STEPS, "time", "m", f"number of steps must lie in 1..{MAX_STEPS}, got {M}")
    need(g("time", "t") > 0, "time", "t", "final time must be positive")
    for k in ("lambda", "mu"):
        need(g("carleman", k) >= 1, "carleman", k, f"must be >= 1, got {g('carleman', k)}")
    need(g("carleman", "psi_peak") > 0, "carleman", "psi_peak", "must be positive")
    need(g("carleman", "samples") >= 1, "carleman", "samples", "need at least one sample")
    need(all(v >= 1 for v in g("carleman", "lambdas")), "carleman", "lambdas", "every lambda must be >= 1")
    need(len(g("carleman", "lambdas")) >= 1, "carleman", "lambdas", "lambda grid is empty")
    for sec in ("sources", "carleman"):
        wc = g(sec, "weight_constant")
        need(wc == "auto" or wc > 0, sec, "weight_constant", "must be positive or 'auto'")
    need(g("sources", "width") > 0, "sources", "width", "must be positive")
    need(g("hum", "eps") > 0, "hum", "eps", "penalty must be positive")
    need(0 < g("hum", "cg_tol") < 1, "hum", "cg_tol", "must lie in (0, 1)")
    need(g("hum", "max_iter") >= 1, "hum", "max_iter", "must be >= 1")
    need(g("hum", "directions") >= 1, "hum", "directions", "must be >= 1")
    levels = g("convergence", "levels")
    need(len(levels) >= 2, "convergence", "levels", "need at least two refinement levels")
    need(1 <= g("convergence", "m") <= MAX_STEPS, "convergence", "m", f"must lie in 1..{MAX_STEPS}")
    unknown = set(g("output", "formats")) - {"csv", "json", "txt"}
    need(not unknown, "output", "formats", f"unknown formats {sorted(unknown)}")
    kind = g("geometry", "kind")
    for key in ("g0", "o", "g1"):
        n = len(g("regions", key))
        ok = n == 2 if kind == "interval" else n in (2, 4)
        need(ok, "regions", key, f"region needs {'(a, b)' if kind == 'interval' else '(r0, r1[, phi0, phi1])'}")
    if kind == "interval":
        need(
            all(not isinstance(i, (str, tuple)) for i in g("regions", "o_gamma")),
            "regions",
            "o_gamma",
            "interval boundary regions are end-point coordinates",
        )


def load_config(path: str | Path) -> ExperimentConfig:
    """Read, type-check and fully validate (the numerical problem is built once)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration: {exc.strerror}", None, str(path)) from exc
    cfg = parse_config(text, str(path))
    from .experiments import build_experiment  # local import: experiments depends on this module

    build_experiment(cfg)
    return cfg
