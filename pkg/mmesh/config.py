#
# Copyright 2025 The mmesh contributors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#    http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#

"""Experiment configuration: flat `section.key = value` files mapped onto dataclasses."""

import dataclasses
import logging
import os
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from .errors import ConfigError
from .fields import BUILTIN_FIELDS
from .flow import SolverConfig
from .functionals import FUNCTIONAL_KINDS
from .metric import BALANCING_KINDS, METRIC_KINDS

logger = logging.getLogger(__name__)

THREADS_ENV = "MMESH_THREADS"

_LINE = re.compile(r'^\s*([A-Za-z_][A-Za-z0-9_]*)\.([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$')
_INT = re.compile(r'^[+-]?\d+$')
_FLOAT = re.compile(r'^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$')

# Defaults that depend on the functional kind
KIND_DEFAULTS = {
    "proposed": {"functional.gamma": 1.25, "flow.tau": 0.004},
    "huang": {"functional.gamma": 1.5, "flow.tau": 0.01},
    "kolasinski_huang": {"functional.gamma": 1.5, "flow.tau": 0.01},
}


@dataclass
class MeshConfig:
    nx: int = 20
    ny: int = 40
    nz: int = 0
    x_min: float = 0.0
    x_max: float = 1.0
    y_min: float = 0.0
    y_max: float = 1.0
    z_min: float = 0.0
    z_max: float = 1.0
    input: str = ""
    perturb: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1 or self.nz < 0:
            raise ConfigError(f"mesh subdivisions must be positive, got nx={self.nx} ny={self.ny} nz={self.nz}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min and self.z_max > self.z_min):
            raise ConfigError("mesh domain bounds must satisfy min < max")
        if not 0.0 <= self.perturb < 0.5:
            raise ConfigError(f"mesh.perturb must lie in [0, 0.5), got {self.perturb}")

    @property
    def dim(self) -> int:
        return 3 if self.nz > 0 else 2

    @property
    def num_cells(self) -> int:
        return 6 * self.nx * self.ny * self.nz if self.nz > 0 else 2 * self.nx * self.ny


@dataclass
class FieldConfig:
    name: str = "sine_band"
    re: float = 40.0
    time: float = 1.0
    resample: bool = True

    def __post_init__(self):
        if self.name not in BUILTIN_FIELDS:
            raise ConfigError(f"unknown builtin field '{self.name}' (available: {', '.join(sorted(BUILTIN_FIELDS))})")
        if not self.re > 0:
            raise ConfigError(f"field.re must be > 0, got {self.re}")

    def parameters(self) -> Dict[str, float]:
        return {"re": self.re, "time": self.time} if self.name == "burgers_profile" else {}


@dataclass
class MetricConfig:
    kind: str = "hessian"
    beta: float = 0.0
    smoothing_sweeps: int = 2
    apply_kappa: bool = True
    hessian_floor: float = 1e-8

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ConfigError(f"metric.kind must be one of {', '.join(METRIC_KINDS)}, got '{self.kind}'")
        if self.kind == "arclength" and self.beta < 0:
            raise ConfigError(f"metric.beta must be >= 0 for the arc-length metric, got {self.beta}")
        if self.kind == "eigen" and not 0.0 < self.beta < 1.0:
            raise ConfigError(f"metric.beta must lie in (0, 1) for the eigen metric, got {self.beta}")
        if self.smoothing_sweeps < 0:
            raise ConfigError(f"metric.smoothing_sweeps must be >= 0, got {self.smoothing_sweeps}")
        if not 0.0 < self.hessian_floor < 1.0:
            raise ConfigError(f"metric.hessian_floor must lie in (0, 1), got {self.hessian_floor}")


@dataclass
class FunctionalConfig:
    kind: str = "proposed"
    gamma: float = 1.25
    mu: float = 1.0 / 3.0
    balancing: str = "ours"
    p: float = 0.0

    def __post_init__(self):
        if self.kind not in FUNCTIONAL_KINDS:
            raise ConfigError(f"functional.kind must be one of {', '.join(FUNCTIONAL_KINDS)}, got '{self.kind}'")
        if not self.gamma > 1.0:
            raise ConfigError(f"functional.gamma must be > 1, got {self.gamma}")
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigError(f"functional.mu must lie in [0, 1], got {self.mu}")
        if self.balancing not in BALANCING_KINDS:
            raise ConfigError(f"functional.balancing must be one of {', '.join(BALANCING_KINDS)}, got '{self.balancing}'")
        if self.p < 0:
            raise ConfigError(f"functional.p must be >= 0 (0 selects d*gamma/2), got {self.p}")

    def balancing_exponent(self, d: int) -> float:
        return self.p if self.p > 0 else d * self.gamma / 2.0


@dataclass
class OutputConfig:
    dir: str = "out"
    vtk_every: int = 1
    csv: bool = True
    record_timing: bool = True
    store: bool = True

    def __post_init__(self):
        if self.vtk_every < 0:
            raise ConfigError(f"output.vtk_every must be >= 0, got {self.vtk_every}")


@dataclass
class RuntimeConfig:
    threads: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.threads < 0:
            raise ConfigError(f"runtime.threads must be >= 0 (0 = all cores), got {self.threads}")

    def resolved_threads(self) -> int:
        """Thread count after the MMESH_THREADS override; 0 means all cores."""
        threads = self.threads
        env = os.environ.get(THREADS_ENV, "").strip()
        if env:
            if not _INT.match(env) or int(env) < 0:
                raise ConfigError(f"{THREADS_ENV} must be a non-negative integer, got '{env}'")
            threads = int(env)
        return threads if threads > 0 else (os.cpu_count() or 1)


SECTIONS = {
    "mesh": MeshConfig,
    "field": FieldConfig,
    "metric": MetricConfig,
    "functional": FunctionalConfig,
    "flow": SolverConfig,
    "output": OutputConfig,
    "runtime": RuntimeConfig,
}


def parse_value(text: str) -> Any:
    """Literal of the config grammar: "string", true/false, int or float."""
    if len(text) >= 2 and text[0] == '"' and text[-1] == '"':
        return text[1:-1]
    if text in ("true", "false"):
        return text == "true"
    if _INT.match(text):
        return int(text)
    if _FLOAT.match(text):
        return float(text)
    raise ValueError(f"cannot parse value '{text}' (strings must be double-quoted)")


def _strip_comment(line: str) -> str:
    in_string = False
    for i, ch in enumerate(line):
        if ch == '"':
            in_string = not in_string
        elif ch == '#' and not in_string:
            return line[:i]
    return line


def parse_text(text: str, source: str = "<config>") -> Dict[str, Tuple[Any, int]]:
    """Map of 'section.key' -> (value, line number)."""
    entries: Dict[str, Tuple[Any, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        match = _LINE.match(line)
        if not match:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value', got '{raw.strip()}'")
        section, key, value = match.groups()
        try:
            entries[f"{section}.{key}"] = (parse_value(value), lineno)
        except ValueError as e:
            raise ConfigError(f"{source}:{lineno}: {e}") from None
    return entries


def _coerce(value: Any, target: type, where: str) -> Any:
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a quoted string, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    mesh: MeshConfig = dataclasses.field(default_factory=MeshConfig)
    field: FieldConfig = dataclasses.field(default_factory=FieldConfig)
    metric: MetricConfig = dataclasses.field(default_factory=MetricConfig)
    functional: FunctionalConfig = dataclasses.field(default_factory=FunctionalConfig)
    flow: SolverConfig = dataclasses.field(default_factory=SolverConfig)
    output: OutputConfig = dataclasses.field(default_factory=OutputConfig)
    runtime: RuntimeConfig = dataclasses.field(default_factory=RuntimeConfig)

    @classmethod
    def from_mapping(cls, mapping: Dict[str, Any], source: str = "<config>",
                     lines: Optional[Dict[str, int]] = None) -> 'ExperimentConfig':
        """Build from {'section.key': value}; missing keys take their defaults."""
        lines = lines or {}
        kind = mapping.get("functional.kind", FunctionalConfig.kind)
        values = dict(KIND_DEFAULTS.get(kind, {}))
        values.update(mapping)

        grouped: Dict[str, Dict[str, Any]] = {name: {} for name in SECTIONS}
        for dotted, value in values.items():
            where = f"{source}:{lines[dotted]}" if dotted in lines else source
            section, _, key = dotted.partition(".")
            if section not in SECTIONS:
                raise ConfigError(f"{where}: unknown section '{section}'")
            types = {f.name: f.type for f in fields(SECTIONS[section])}
            if key not in types:
                raise ConfigError(f"{where}: unknown key '{dotted}'")
            target = types[key]
            if isinstance(target, str):
                target = {"int": int, "float": float, "bool": bool, "str": str}[target]
            grouped[section][key] = _coerce(value, target, f"{where}: {dotted}")

        try:
            return cls(**{name: SECTIONS[name](**grouped[name]) for name in SECTIONS})
        except ConfigError as e:
            raise ConfigError(f"{source}: {e}") from None

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> 'ExperimentConfig':
        entries = parse_text(text, source)
        return cls.from_mapping({k: v for k, (v, _) in entries.items()}, source,
                                {k: n for k, (_, n) in entries.items()})

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> 'ExperimentConfig':
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        """Serialize every key, so the file fully reproduces the run."""
        out = []
        for name in SECTIONS:
            section = getattr(self, name)
            for f in fields(section):
                value = getattr(section, f.name)
                if isinstance(value, bool):
                    text = "true" if value else "false"
                elif isinstance(value, str):
                    text = f'"{value}"'
                else:
                    text = repr(value)
                out.append(f"{name}.{f.name} = {text}")
            out.append("")
        return "\n".join(out)

    def with_output_dir(self, directory: Union[str, Path]) -> 'ExperimentConfig':
        return replace(self, output=replace(self.output, dir=str(directory)))
