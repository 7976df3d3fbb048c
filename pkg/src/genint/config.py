"""INI experiment configuration: schema, defaults and aggregated validation.

Sections and keys are fixed; ``[strategy:NAME]`` sections define the
ablation grid.  Every problem found in a file is collected and reported at
once through :class:`ConfigurationError`.
"""

from __future__ import annotations

import configparser
import difflib
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .exceptions import ConfigurationError
from .intervene import OFFSET_MODES, SOURCES, InterventionStrategy


@dataclass(frozen=True)
class Key:
    kind: type
    default: Any
    check: Callable[[Any], bool] | None = None
    bound: str = ""  # human-readable bound, quoted in error messages


def _ge(x):
    return lambda v: v >= x


def _gt(x):
    return lambda v: v > x


def _one_of(options):
    return lambda v: v in options


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": Key(int, 7, _ge(0), "seed ≥ 0"),
        "out": Key(str, "runs/default"),
    },
    "data": {
        "source": Key(str, "bundled", _one_of(("bundled", "idx")), "source ∈ {bundled, idx}"),
        "train_images": Key(str, ""),
        "train_labels": Key(str, ""),
        "test_images": Key(str, ""),
        "test_labels": Key(str, ""),
        "test_per_class": Key(int, 100, _ge(1), "test_per_class ≥ 1"),
        "saturation": Key(float, 0.8, lambda v: 0 < v <= 1, "0 < saturation ≤ 1"),
        "value": Key(float, 0.9, lambda v: 0 < v <= 1, "0 < value ≤ 1"),
    },
    "cvae": {
        "latent_dim": Key(int, 16, _ge(1), "latent_dim ≥ 1"),
        "hidden_units": Key(int, 400, _ge(1), "hidden_units ≥ 1"),
        "beta": Key(float, 1.0, _ge(0), "β ≥ 0"),
        "epochs": Key(int, 20, _ge(1), "epochs ≥ 1"),
        "batch_size": Key(int, 128, _ge(1), "batch_size ≥ 1"),
        "learning_rate": Key(float, 1e-3, _gt(0), "learning_rate > 0"),
    },
    "intervention": {
        "truncation": Key(float, 1.0, _gt(0), "t > 0"),
        "top_k": Key(int, 2, _ge(1), "k ≥ 1"),
        "scale": Key(float, 3.0, _ge(0), "s ≥ 0"),
        "directions_per_sample": Key(int, 2, _ge(1), "directions_per_sample ≥ 1"),
        "offset_mode": Key(str, "none", _one_of(OFFSET_MODES), f"offset_mode ∈ {{{', '.join(OFFSET_MODES)}}}"),
        "source": Key(str, "encoded", _one_of(SOURCES), f"source ∈ {{{', '.join(SOURCES)}}}"),
        "per_class_n": Key(int, 400, _ge(1), "per_class_n ≥ 1"),
        "pca_source": Key(str, "posterior", _one_of(("posterior", "prior")), "pca_source ∈ {posterior, prior}"),
    },
    "classifier": {
        "hidden_units": Key(int, 256, _ge(1), "hidden_units ≥ 1"),
        "learning_rate": Key(float, 1e-3, _gt(0), "learning_rate > 0"),
        "epochs": Key(int, 10, _ge(1), "epochs ≥ 1"),
        "batch_size": Key(int, 128, _ge(1), "batch_size ≥ 1"),
        "batch_size_int": Key(int, 128, _ge(1), "batch_size_int ≥ 1"),
        "batch_size_itr": Key(int, 128, _ge(1), "batch_size_itr ≥ 1"),
        "lambda1": Key(float, 1.0, _ge(0), "λ1 ≥ 0"),
        "lambda2": Key(float, 0.0, _ge(0), "λ2 ≥ 0"),
        "use_original_data": Key(bool, False),
        "three_term_lambda1": Key(float, 0.05, _ge(0), "three_term_lambda1 ≥ 0"),
        "three_term_lambda2": Key(float, 1.0, _ge(0), "three_term_lambda2 ≥ 0"),
    },
    "irm": {
        "penalty_weight": Key(float, 1e4, _ge(0), "penalty_weight ≥ 0"),
        "warmup_steps": Key(int, 100, _ge(0), "warmup_steps ≥ 0"),
    },
    "causal": {
        "tau": Key(float, 1.0, _gt(0), "τ > 0"),
        "n_scm": Key(int, 1000, _ge(1), "n_scm ≥ 1"),
        "iv_samples": Key(int, 1_000_000, _ge(3), "iv_samples ≥ 3"),
    },
    "probe": {
        "subset_sizes": Key(list, [2, 5, 10], lambda v: all(2 <= s <= 10 for s in v), "2 ≤ subset size ≤ 10"),
        "hidden_units": Key(int, 128, _ge(1), "hidden_units ≥ 1"),
        "epochs": Key(int, 20, _ge(1), "epochs ≥ 1"),
        "regressor_epochs": Key(int, 10, _ge(1), "regressor_epochs ≥ 1"),
    },
}

STRATEGY_KEYS: dict[str, Key] = {
    k: SCHEMA["intervention"][k]
    for k in ("truncation", "top_k", "scale", "directions_per_sample", "offset_mode")
}

DEFAULT_GRID = {
    "observational": InterventionStrategy(scale=0.0),
    "weak": InterventionStrategy(top_k=1, scale=1.0, directions_per_sample=1),
    "strong": InterventionStrategy(top_k=2, scale=3.0, directions_per_sample=2),
}


@dataclass
class ExperimentConfig:
    sections: dict[str, dict[str, Any]]
    grid: dict[str, InterventionStrategy] = field(default_factory=lambda: dict(DEFAULT_GRID))
    path: Path | None = None

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def out(self) -> Path:
        return Path(self.sections["run"]["out"])

    def strategy(self) -> InterventionStrategy:
        s = self.sections["intervention"]
        return InterventionStrategy(**{k: s[k] for k in STRATEGY_KEYS})

    def as_dict(self) -> dict:
        return {
            "sections": self.sections,
            "grid": {name: st.as_dict() for name, st in self.grid.items()},
        }

    def digest(self, *names: str) -> str:
        """SHA-1 of the named sections (all of them by default).

        The output directory is left out: moving a run does not change it.
        """
        selected = names or (*sorted(self.sections), "grid")
        payload = {n: dict(self.sections[n]) for n in selected if n != "grid"}
        if "run" in payload:
            payload["run"].pop("out", None)
        if "grid" in selected:
            payload["grid"] = self.as_dict()["grid"]
        return hashlib.sha1(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _convert(kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is list:
        return [int(part) for part in raw.replace(",", " ").split()]
    if kind is float:
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(f"not finite: {raw!r}")
        return value
    return kind(raw)


def _nearest(name: str, options) -> str:
    match = difflib.get_close_matches(name, list(options), n=1, cutoff=0.0)
    return match[0] if match else ""


def _read_keys(section: str, items, schema: dict[str, Key], errors: list[str]) -> dict[str, Any]:
    values = {k: (list(key.default) if isinstance(key.default, list) else key.default) for k, key in schema.items()}
    for name, raw in items:
        if name not in schema:
            errors.append(f"[{section}] unknown key {name!r}; did you mean {_nearest(name, schema)!r}?")
            continue
        key = schema[name]
        try:
            value = _convert(key.kind, raw)
        except ValueError:
            errors.append(f"[{section}] {name} = {raw!r} is not a valid {key.kind.__name__}")
            continue
        if key.check is not None and not key.check(value):
            errors.append(f"[{section}] {name} = {raw.strip()} is out of range: requires {key.bound}")
            continue
        values[name] = value
    return values


def _check_paths(sections, base: Path, errors: list[str]) -> None:
    data = sections["data"]
    if data["source"] != "idx":
        return
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        if not data[key]:
            errors.append(f"[data] {key} is required when source = idx")
            continue
        path = Path(data[key])
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            errors.append(f"[data] {key} = {data[key]} does not exist")
        else:
            data[key] = str(path)


def parse_config_string(text: str, base_dir=".") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep key case so typos are reported verbatim
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    errors: list[str] = []
    sections: dict[str, dict[str, Any]] = {}
    grid: dict[str, InterventionStrategy] = {}
    known = list(SCHEMA) + ["strategy:<name>"]
    for name in parser.sections():
        if name.startswith("strategy:"):
            label = name.split(":", 1)[1].strip()
            if not label:
                errors.append(f"[{name}] strategy sections need a name")
                continue
            values = _read_keys(name, parser.items(name), STRATEGY_KEYS, errors)
            strategy = InterventionStrategy(**values)
            if strategy.directions_per_sample > strategy.top_k:
                errors.append(f"[{name}] directions_per_sample = {strategy.directions_per_sample} requires ≤ k = {strategy.top_k}")
            grid[label] = strategy
        elif name not in SCHEMA:
            errors.append(f"unknown section [{name}]; did you mean [{_nearest(name, known)}]?")
    for name, schema in SCHEMA.items():
        items = parser.items(name) if parser.has_section(name) else []
        sections[name] = _read_keys(name, items, schema, errors)
    iv = sections["intervention"]
    if iv["directions_per_sample"] > iv["top_k"]:
        errors.append(
            f"[intervention] directions_per_sample = {iv['directions_per_sample']} requires ≤ k = {iv['top_k']}"
        )
    latent = sections["cvae"]["latent_dim"]
    for label, st in [("intervention", None), *[(f"strategy:{n}", s) for n, s in grid.items()]]:
        k = iv["top_k"] if st is None else st.top_k
        if k > latent:
            errors.append(f"[{label}] top_k = {k} requires k ≤ latent_dim = {latent}")
    _check_paths(sections, Path(base_dir), errors)
    if errors:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(errors))
    return ExperimentConfig(sections, grid or dict(DEFAULT_GRID))


def parse_config(path=None) -> ExperimentConfig:
    """Read and validate an INI file; ``None`` gives the documented defaults."""
    if path is None:
        return parse_config_string("")
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    config = parse_config_string(text, base_dir=path.parent)
    config.path = path
    return config


def default_config_text() -> str:
    """The defaults rendered as an INI file, one section per module."""
    lines = []
    for section, schema in SCHEMA.items():
        lines.append(f"[{section}]")
        for name, key in schema.items():
            value = key.default
            if isinstance(value, bool):
                value = str(value).lower()
            elif isinstance(value, list):
                value = ", ".join(map(str, value))
            lines.append(f"{name} = {value}")
        lines.append("")
    for name, st in DEFAULT_GRID.items():
        lines.append(f"[strategy:{name}]")
        lines.extend(f"{k} = {v}" for k, v in st.as_dict().items())
        lines.append("")
    return "\n".join(lines)
