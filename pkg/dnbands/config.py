"""Strict JSON experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from jsonschema import Draft202012Validator
from jsonschema.exceptions import ValidationError, relevance

from .ballsolver import Potential
from .errors import ConfigError
from .invariants import KAPPA_CHOICES, PHI_ARG_CHOICES, SIGN_CHOICES, Switches, TestFunction

_GAUSS = re.compile(r"^gauss\(\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*\)$")
_NAMED = {"id": TestFunction.identity, "square": TestFunction.square, "one": TestFunction.one}


@dataclass(frozen=True)
class MonomialTerm:
    monomial: tuple[int, int, int]
    coeff: float


@dataclass(frozen=True)
class TestFunctionSpec:
    """Either a name (``id``, ``square``, ``one``, ``gauss(σ)``) or polynomial coefficients."""

    __test__ = False

    name: str | None = None
    coeffs: tuple[float, ...] | None = None

    def build(self) -> TestFunction:
        if self.coeffs is not None:
            return TestFunction.polynomial(self.coeffs)
        match = _GAUSS.match(self.name or "")
        if match:
            return TestFunction.gauss(float(match.group(1)))
        return _NAMED[self.name]()

    def as_json(self):
        return list(self.coeffs) if self.coeffs is not None else self.name


@dataclass(frozen=True)
class QuadratureSizes:
    Nt: int = 64
    Ns: int = 64
    orbit_grid: int = 50
    jet_L: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    potential: tuple[MonomialTerm, ...]
    L_max: int = 24
    J: int | None = 3
    k_min: int = 5
    k_max: int | None = None
    alpha: int | None = None
    neumann_tol: float = 1e-10
    test_functions: tuple[TestFunctionSpec, ...] = (
        TestFunctionSpec("id"),
        TestFunctionSpec("square"),
        TestFunctionSpec("one"),
    )
    switches: Switches = field(default_factory=Switches)
    scan_conventions: bool = False
    include_w: bool = True
    quadrature: QuadratureSizes = field(default_factory=QuadratureSizes)
    berezin_k_range: tuple[int, int, int] = (10, 60, 2)
    beta_tolerances: tuple[float, float, float] = (1e-3, 1e-2, 0.1)
    threads: int = 1
    out: str = "out"

    def build_potential(self) -> Potential:
        return Potential([(term.monomial, term.coeff) for term in self.potential])

    def build_test_functions(self) -> list[TestFunction]:
        return [spec.build() for spec in self.test_functions]

    def to_dict(self) -> dict:
        data = dataclasses.asdict(self)
        data["potential"] = [{"monomial": list(t.monomial), "coeff": t.coeff} for t in self.potential]
        data["test_functions"] = [spec.as_json() for spec in self.test_functions]
        data["berezin_k_range"] = list(self.berezin_k_range)
        data["beta_tolerances"] = list(self.beta_tolerances)
        return data

    def config_hash(self) -> str:
        """First 16 hex digits of SHA-256 over the canonical JSON, execution-only fields excluded."""
        data = self.to_dict()
        for key in ("threads", "out"):
            data.pop(key)
        payload = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]




# ---------------------------------------------------------------------------
# Schema
# ---------------------------------------------------------------------------

_POSITIVE = {"type": "number", "exclusiveMinimum": 0}

_TEST_FUNCTION = {
    "anyOf": [
        {"type": "string", "pattern": rf"^(?:{'|'.join(_NAMED)})$|{_GAUSS.pattern}"},
        {"type": "array", "items": {"type": "number"}, "minItems": 1},
    ]
}

_SWITCHES = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kappa_delta": {"enum": list(KAPPA_CHOICES)},
        "phi_arg": {"enum": list(PHI_ARG_CHOICES)},
        "delta_s2_sign": {"enum": list(SIGN_CHOICES)},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "required": ["potential"],
    "properties": {
        "potential": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["monomial", "coeff"],
                "properties": {
                    "monomial": {
                        "type": "array",
                        "items": {"type": "integer", "minimum": 0},
                        "minItems": 3,
                        "maxItems": 3,
                    },
                    "coeff": {"type": "number"},
                },
            },
        },
        "L_max": {"type": "integer", "minimum": 1},
        "J": {"anyOf": [{"const": "auto"}, {"type": "integer", "minimum": 0}]},
        "k_window": {
            "type": "array",
            "prefixItems": [
                {"type": "integer", "minimum": 1},
                {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 1}]},
            ],
            "minItems": 2,
            "maxItems": 2,
        },
        "alpha": {"enum": [1, 2]},
        "neumann_tol": _POSITIVE,
        "test_functions": {"type": "array", "items": _TEST_FUNCTION},
        "switches": {"anyOf": [{"const": "scan"}, _SWITCHES]},
        "scan_conventions": {"type": "boolean"},
        "include_w": {"type": "boolean"},
        "quadrature": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "Nt": {"type": "integer", "minimum": 2},
                "Ns": {"type": "integer", "minimum": 2},
                "orbit_grid": {"type": "integer", "minimum": 1},
                "jet_L": {"anyOf": [{"type": "null"}, {"type": "integer", "minimum": 0}]},
            },
        },
        "berezin_k_range": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 3,
            "maxItems": 3,
        },
        "beta_tolerances": {"type": "array", "items": _POSITIVE, "minItems": 3, "maxItems": 3},
        "threads": {"type": "integer", "minimum": 1},
        "out": {"type": "string", "minLength": 1},
    },
}

_VALIDATOR = Draft202012Validator(CONFIG_SCHEMA)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _dotted(parts) -> str:
    path = ""
    for part in parts:
        path = _join(path, part)
    return path


def _branch_rank(error: ValidationError) -> tuple[int, bool]:
    # inside anyOf, prefer the branch that got furthest into the instance
    return len(error.absolute_path), error.validator not in ("type", "const")


def _config_error(error: ValidationError) -> ConfigError:
    while error.context:
        error = max(error.context, key=_branch_rank)
    path = _dotted(error.absolute_path)
    if error.validator == "additionalProperties":
        known = error.schema.get("properties", {})
        extra = sorted(key for key in error.instance if key not in known)
        return ConfigError(_join(path, extra[0]), "unknown key")
    if error.validator == "required":
        missing = [key for key in error.validator_value if key not in error.instance]
        return ConfigError(_join(path, missing[0]), "required key missing")
    return ConfigError(path, error.message)


def _test_function(value: Any, path: str) -> TestFunctionSpec:
    if isinstance(value, list):
        return TestFunctionSpec(coeffs=tuple(float(v) for v in value))
    match = _GAUSS.match(value)
    if match and float(match.group(1)) <= 0:
        raise ConfigError(path, "Gaussian width must be positive")
    return TestFunctionSpec(name=value)


def parse_config(data: Any) -> ExperimentConfig:
    """Validate a decoded JSON document and build the configuration."""
    errors = list(_VALIDATOR.iter_errors(data))
    if errors:
        raise _config_error(max(errors, key=relevance))

    kwargs: dict[str, Any] = {
        "potential": tuple(MonomialTerm(tuple(int(p) for p in t["monomial"]), float(t["coeff"])) for t in data["potential"]),
    }
    for key in ("L_max", "alpha", "threads"):
        if key in data:
            kwargs[key] = int(data[key])
    for key in ("include_w", "out"):
        if key in data:
            kwargs[key] = data[key]
    if "J" in data:
        kwargs["J"] = None if data["J"] == "auto" else int(data["J"])
    if "k_window" in data:
        lo, hi = (None if v is None else int(v) for v in data["k_window"])
        if hi is not None and hi < lo:
            raise ConfigError("k_window[1]", f"must be >= {lo}, got {hi}")
        kwargs["k_min"], kwargs["k_max"] = lo, hi
    if "neumann_tol" in data:
        kwargs["neumann_tol"] = float(data["neumann_tol"])
    if "test_functions" in data:
        kwargs["test_functions"] = tuple(
            _test_function(v, f"test_functions[{i}]") for i, v in enumerate(data["test_functions"])
        )
    switches = data.get("switches")
    scan = switches == "scan" or data.get("scan_conventions", False)
    if isinstance(switches, Mapping):
        kwargs["switches"] = Switches(
            float(switches.get("kappa_delta", 0.5)),
            switches.get("phi_arg", "q0"),
            switches.get("delta_s2_sign", "-"),
        )
    kwargs["scan_conventions"] = scan
    if "quadrature" in data:
        kwargs["quadrature"] = dataclasses.replace(
            QuadratureSizes(), **{key: None if v is None else int(v) for key, v in data["quadrature"].items()}
        )
    if "berezin_k_range" in data:
        lo, hi, step = (int(v) for v in data["berezin_k_range"])
        if hi < lo:
            raise ConfigError("berezin_k_range", "upper bound below lower bound")
        kwargs["berezin_k_range"] = (lo, hi, step)
    if "beta_tolerances" in data:
        kwargs["beta_tolerances"] = tuple(float(v) for v in data["beta_tolerances"])
    return ExperimentConfig(**kwargs)


def load_config(path: Path | str) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON: {exc}") from exc
    return parse_config(data)


def apply_overrides(
    config: ExperimentConfig,
    out: str | None = None,
    threads: int | None = None,
    k_min: int | None = None,
    k_max: int | None = None,
    scan_conventions: bool | None = None,
) -> ExperimentConfig:
    """Command-line flags take precedence over config fields."""
    changes: dict[str, Any] = {}
    if out is not None:
        changes["out"] = out
    if threads is not None:
        if threads < 1:
            raise ConfigError("threads", f"must be >= 1, got {threads}")
        changes["threads"] = threads
    if k_min is not None:
        if k_min < 1:
            raise ConfigError("k_window[0]", f"must be >= 1, got {k_min}")
        changes["k_min"] = k_min
    if k_max is not None:
        lo = changes.get("k_min", config.k_min)
        if k_max < lo:
            raise ConfigError("k_window[1]", f"must be >= {lo}, got {k_max}")
        changes["k_max"] = k_max
    if scan_conventions:
        changes["scan_conventions"] = True
    return dataclasses.replace(config, **changes)
