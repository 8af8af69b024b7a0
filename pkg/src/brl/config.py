"""INI-style experiment configuration with a closed key schema."""
from __future__ import annotations

import ast
import configparser
import hashlib
import operator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional

import numpy as np

from .errors import ConfigError

_OPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv,
        ast.Pow: operator.pow, ast.USub: operator.neg, ast.UAdd: operator.pos}
_NAMES = {"pi": np.pi, "e": np.e}


def number(text: str) -> float:
    """Float from a literal or a small arithmetic expression (``pi`` and ``e`` allowed)."""
    text = str(text).strip()
    try:
        return float(text)
    except ValueError:
        pass
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError:
        raise ConfigError(f"cannot parse number {text!r}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name) and node.id in _NAMES:
            return _NAMES[node.id]
        if isinstance(node, ast.BinOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _OPS:
            return _OPS[type(node.op)](ev(node.operand))
        raise ConfigError(f"unsupported expression {text!r}")

    return float(ev(tree))


def number_list(text: str):
    return [number(t) for t in str(text).split(",") if t.strip()]


def int_value(text: str) -> int:
    v = number(text)
    if v != int(v):
        raise ConfigError(f"expected an integer, got {text!r}")
    return int(v)


def boolean(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def intervals(text: str):
    """``a:b, c:d`` parameter pairs."""
    out = []
    for part in str(text).split(","):
        if not part.strip():
            continue
        if ":" not in part:
            raise ConfigError(f"interval {part.strip()!r} must be written a:b")
        a, b = part.split(":", 1)
        out.append((number(a), number(b)))
    return out


def string_list(text: str):
    return [t.strip() for t in str(text).split(",") if t.strip()]


def text(v: str) -> str:
    return str(v).strip()


SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "geometry": {"kind": text, "radius": number, "theta_max": number, "center": number_list, "r": number,
                 "E": intervals, "E_fraction": intervals},
    "rays": {"entry": number_list, "angle": number_list, "max_reflections": int_value, "n_u": int_value,
             "n_a": int_value, "step": number, "family_step": number},
    "grid": {"n": int_value, "margin": number},
    "transform": {"lambda": number_list, "potential": text, "conformal": text, "phantom": text,
                  "phantom_center": number_list, "phantom_radius": number, "c": number_list,
                  "x1_nodes": int_value, "n_lambda": int_value, "lambda_max": number, "fine_n": int_value},
    "inversion": {"alpha": number, "iters": int_value, "tol": number, "basis": text, "x1_method": text,
                  "x1_smooth": number, "x1_nodes": int_value, "data": text, "k_smallest": int_value,
                  "k_largest": int_value, "E_list": text},
    "beam": {"entry": number, "angle": number, "reflections": int_value, "tau": number_list,
             "lambda": number_list, "delta_prime": number, "psi": string_list, "psi_sigma": number,
             "residual_method": text, "boundary": boolean, "h": number, "field_tau": number,
             "field_n": int_value},
    "output": {"dir": text, "svg": boolean, "prefix": text},
}

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "geometry": {"kind": "disc_euclidean"},
    "rays": {"max_reflections": 0, "n_u": 60, "n_a": 60, "step": 1e-3, "family_step": 5e-3},
    "grid": {"n": 48, "margin": 0.0},
    "transform": {"lambda": [0.0], "phantom": "bump", "phantom_center": [0.2, -0.1], "phantom_radius": 0.5,
                  "c": [1.0], "x1_nodes": 65, "n_lambda": 17, "lambda_max": 2.0, "fine_n": 97},
    "inversion": {"alpha": 1e-6, "iters": 300, "tol": 1e-10, "basis": "pixel", "x1_method": "support_smooth",
                  "x1_smooth": 0.1, "x1_nodes": 17, "k_smallest": 1, "k_largest": 1},
    "beam": {"reflections": 0, "tau": [32.0, 64.0, 128.0, 256.0], "lambda": [0.0], "psi": ["one"],
             "psi_sigma": 0.5, "residual_method": "fermi", "boundary": True, "field_n": 129},
    "output": {"dir": ".", "svg": True, "prefix": ""},
}


@dataclass
class ExperimentConfig:
    sections: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    source: str = ""
    path: Optional[Path] = None

    def get(self, section: str, key: str, default=None):
        if key not in SCHEMA[section]:
            raise ConfigError(f"[{section}] has no key {key!r}")
        if key in self.sections.get(section, {}):
            return self.sections[section][key]
        return DEFAULTS.get(section, {}).get(key, default)

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in section [{section}]")
        self.sections.setdefault(section, {})[key] = value

    def resolve(self, p: str) -> Path:
        """Paths inside a config are relative to the config file."""
        q = Path(p)
        if not q.is_absolute() and self.path is not None:
            q = self.path.parent / q
        return q

    def digest(self, extra: str = "") -> str:
        return hashlib.sha256((self.source + "\n" + extra).encode()).hexdigest()[:16]


def parse_config_text(source: str, path: Optional[Path] = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(source)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    cfg = ExperimentConfig(source=source, path=path)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown config key {key!r} in section [{sec}]")
            try:
                val = SCHEMA[sec][key](raw)
            except ConfigError as exc:
                raise ConfigError(f"[{sec}] {key}: {exc}") from None
            cfg.sections.setdefault(sec, {})[key] = val
    return cfg


def load_config(path) -> ExperimentConfig:
    if path is None:
        return parse_config_text("")
    p = Path(path)
    try:
        src = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config_text(src, p)
