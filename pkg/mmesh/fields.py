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

"""Built-in analytic fields that drive the metric."""

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict

import numpy as np
from scipy.special import expit


def _xy(points):
    p = np.atleast_2d(np.asarray(points, dtype=float))
    return p[..., 0], p[..., 1]


def sine_band(points, **_):
    """tanh(-100 (y - 0.5 - 0.25 sin(2 pi x)))."""
    x, y = _xy(points)
    return np.tanh(-100.0 * (y - 0.5 - 0.25 * np.sin(2.0 * np.pi * x)))


def sine_band_gradient(points, **_):
    x, y = _xy(points)
    s = -100.0 * (y - 0.5 - 0.25 * np.sin(2.0 * np.pi * x))
    sech2 = 1.0 - np.tanh(s) ** 2
    return np.stack([sech2 * 50.0 * np.pi * np.cos(2.0 * np.pi * x), sech2 * -100.0], axis=-1)


def x_shape(points, **_):
    """tanh(100 (1 - x - y)) - tanh(100 (x - y))."""
    x, y = _xy(points)
    return np.tanh(100.0 * (1.0 - x - y)) - np.tanh(100.0 * (x - y))


def x_shape_gradient(points, **_):
    x, y = _xy(points)
    a = 1.0 - np.tanh(100.0 * (1.0 - x - y)) ** 2
    b = 1.0 - np.tanh(100.0 * (x - y)) ** 2
    return np.stack([-100.0 * a - 100.0 * b, -100.0 * a + 100.0 * b], axis=-1)


def burgers_profile(points, re: float = 40.0, time: float = 1.0, **_):
    """Travelling-front solution 1 / (1 + exp(Re (x + y - t))) at a fixed time."""
    x, y = _xy(points)
    return expit(-re * (x + y - time))


def burgers_profile_gradient(points, re: float = 40.0, time: float = 1.0, **_):
    u = burgers_profile(points, re=re, time=time)
    du = -re * u * (1.0 - u)
    return np.stack([du, du], axis=-1)


@dataclass(frozen=True)
class BuiltinField:
    name: str
    value: Callable
    gradient: Callable
    parameters: Dict[str, float] = field(default_factory=dict)


BUILTIN_FIELDS: Dict[str, BuiltinField] = {
    "sine_band": BuiltinField("sine_band", sine_band, sine_band_gradient),
    "x_shape": BuiltinField("x_shape", x_shape, x_shape_gradient),
    "burgers_profile": BuiltinField("burgers_profile", burgers_profile, burgers_profile_gradient,
                                    {"re": 40.0, "time": 1.0}),
}


def get_field(name: str) -> BuiltinField:
    try:
        return BUILTIN_FIELDS[name]
    except KeyError:
        raise ValueError(f"unknown builtin field '{name}' (available: {', '.join(sorted(BUILTIN_FIELDS))})") from None


def builtin_field(name: str, point, **params):
    """Evaluate a built-in field at one point (scalar result) or at an (n, 2) array of points."""
    values = get_field(name).value(point, **params)
    return float(values[0]) if np.ndim(point) == 1 else values


def field_functions(name: str, **params):
    """(value, gradient) callables on (n, 2) point arrays with parameters bound."""
    entry = get_field(name)
    bound = {**entry.parameters, **params}
    return partial(entry.value, **bound), partial(entry.gradient, **bound)
