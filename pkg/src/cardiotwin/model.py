"""Lumped-parameter left-ventricle circuit: parameters, elastance, state equations.

State vector (baseline, 5 entries)::

    x = [V_LV - V_d, P_LA, P_A, P_Ao, Q_T]

With an LVAD attached a sixth entry holds the device flow.  All right-hand
side functions accept stacked inputs: ``x`` of shape ``(..., 5)`` and
parameter attributes that are either floats or arrays broadcastable against
``x[..., 0]``.  This lets the solver advance a whole cohort in one call.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from types import SimpleNamespace
from typing import Any, Mapping, Sequence

import numpy as np


class ParameterError(ValueError):
    """Raised for parameter sets that violate physical constraints."""


PARAM_FIELDS = (
    "r_m", "r_a", "r_c", "r_s", "c_a", "c_s", "c_r", "l_s",
    "e_max", "e_min", "t_c", "v_d", "start_v", "start_pao",
)

# learnable coordinates, in the order used for theta vectors everywhere
LEARNABLE = ("r_m", "r_a", "e_max", "e_min", "v_d", "t_c", "start_v")

FIXED_VALUES = {
    "r_c": 0.0398,
    "r_s": 1.0,
    "c_a": 0.08,
    "c_s": 1.33,
    "c_r": 4.4,
    "l_s": 0.0005,
    "start_pao": 75.0,
}

DEFAULT_RANGES = {
    "r_m": (0.005, 0.1),
    "r_a": (0.0001, 0.25),
    "e_max": (0.5, 3.5),
    "e_min": (0.02, 0.1),
    "v_d": (4.0, 25.0),
    "t_c": (0.4, 1.7),
    "start_v": (0.0, 280.0),
}

REFERENCE_VALUES = {
    "r_m": 0.005,
    "r_a": 0.001,
    "e_max": 2.0,
    "e_min": 0.05,
    "v_d": 10.0,
    "t_c": 0.8,
    "start_v": 140.0,
    **FIXED_VALUES,
}


def _reject_unknown(cls_name: str, data: Mapping[str, Any], allowed: Sequence[str]) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ParameterError(f"{cls_name}: unknown keys {unknown}")
    missing = sorted(set(allowed) - set(data))
    if missing:
        raise ParameterError(f"{cls_name}: missing keys {missing}")


@dataclass(frozen=True)
class PatientParams:
    """The 14 circuit parameters of one patient."""

    r_m: float
    r_a: float
    r_c: float
    r_s: float
    c_a: float
    c_s: float
    c_r: float
    l_s: float
    e_max: float
    e_min: float
    t_c: float
    v_d: float
    start_v: float
    start_pao: float

    def __post_init__(self) -> None:
        for name in PARAM_FIELDS:
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not math.isfinite(value):
                raise ParameterError(f"{name} must be finite, got {value}")
            # start_v has a closed range starting at 0 (empty ventricle is allowed)
            if value < 0 or (value == 0 and name != "start_v"):
                raise ParameterError(f"{name} must be positive, got {value}")
        if not self.e_max > self.e_min:
            raise ParameterError(f"e_max ({self.e_max}) must exceed e_min ({self.e_min})")

    @classmethod
    def reference(cls, **overrides: float) -> "PatientParams":
        values = dict(REFERENCE_VALUES)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_theta(cls, theta: Sequence[float], fixed: Mapping[str, float] | None = None) -> "PatientParams":
        """Build from the 7 learnable values (``LEARNABLE`` order) plus fixed values."""
        if len(theta) != len(LEARNABLE):
            raise ParameterError(f"theta must have {len(LEARNABLE)} entries, got {len(theta)}")
        values = dict(FIXED_VALUES if fixed is None else fixed)
        values.update(zip(LEARNABLE, (float(v) for v in theta)))
        return cls(**values)

    def theta(self) -> np.ndarray:
        return np.array([getattr(self, k) for k in LEARNABLE])

    def elastance_spec(self) -> "ElastanceSpec":
        return ElastanceSpec(self.e_max, self.e_min, self.t_c)

    def replace(self, **changes: float) -> "PatientParams":
        return replace(self, **changes)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PatientParams":
        _reject_unknown(cls.__name__, data, PARAM_FIELDS)
        return cls(**{k: float(data[k]) for k in PARAM_FIELDS})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PatientParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class OmegaSchedule:
    """Pump speed over time: a constant level or a linear ramp.

    For ``kind="ramp"`` the speed goes from ``start`` to ``end`` over
    ``duration`` seconds and holds ``end`` afterwards.
    """

    kind: str = "constant"
    level: float = 0.0
    start: float = 0.0
    end: float = 0.0
    duration: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "ramp"):
            raise ParameterError(f"unknown omega schedule kind {self.kind!r}")
        for name in ("level", "start", "end"):
            if getattr(self, name) < 0:
                raise ParameterError(f"omega {name} must be non-negative")
        if self.kind == "ramp" and not self.duration > 0:
            raise ParameterError("ramp duration must be positive")

    @classmethod
    def constant(cls, level: float) -> "OmegaSchedule":
        return cls(kind="constant", level=float(level))

    @classmethod
    def ramp(cls, start: float, end: float, duration: float) -> "OmegaSchedule":
        return cls(kind="ramp", start=float(start), end=float(end), duration=float(duration))

    def __call__(self, t):
        if self.kind == "constant":
            return self.level + 0.0 * np.asarray(t, dtype=float)
        frac = np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)
        return self.start + (self.end - self.start) * frac


LVAD_FIELDS = ("r_o", "r_i", "alpha", "p_bar", "l_i", "l_o", "beta0", "beta1", "beta2", "omega_schedule")


@dataclass(frozen=True)
class LvadParams:
    """Rotary pump branch between the LV and the aorta."""

    r_o: float = 0.0677
    r_i: float = 0.0677
    alpha: float = -3.5
    p_bar: float = 1.0
    l_i: float = 0.0127
    l_o: float = 0.0127
    beta0: float = -0.296
    beta1: float = -0.027
    beta2: float = 9.9025e-7
    omega_schedule: OmegaSchedule = field(default_factory=OmegaSchedule)

    def __post_init__(self) -> None:
        if self.denominator == 0:
            raise ParameterError("LVAD inertance denominator (-l_i - l_o + beta1) is zero")

    @property
    def denominator(self) -> float:
        return -self.l_i - self.l_o + self.beta1

    def with_omega(self, schedule: OmegaSchedule | float) -> "LvadParams":
        if not isinstance(schedule, OmegaSchedule):
            schedule = OmegaSchedule.constant(schedule)
        return replace(self, omega_schedule=schedule)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LvadParams":
        _reject_unknown(cls.__name__, data, LVAD_FIELDS)
        sched = data["omega_schedule"]
        if not isinstance(sched, Mapping):
            raise ParameterError("omega_schedule must be an object")
        _reject_unknown("OmegaSchedule", sched, [f.name for f in fields(OmegaSchedule)])
        values = {k: float(data[k]) for k in LVAD_FIELDS[:-1]}
        return cls(**values, omega_schedule=OmegaSchedule(**sched))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "LvadParams":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ElastanceSpec:
    e_max: float
    e_min: float
    t_c: float

    @property
    def t_max(self) -> float:
        return 0.2 + 0.15 * self.t_c


def elastance_values(e_max, e_min, t_c, t):
    """Array form of the double-Hill elastance curve, periodic in ``t_c``."""
    t = np.asarray(t, dtype=float)
    t_red = np.mod(t, t_c)
    # the curve jumps back to e_min at each cycle boundary; remainders within
    # rounding of t_c belong to the next cycle so that E(k t_c) is exactly e_min
    slack = 8 * np.finfo(float).eps * np.maximum(np.abs(t), t_c)
    t_red = np.where(t_c - t_red <= slack, 0.0, t_red)
    tn = t_red / (0.2 + 0.15 * t_c)
    a = (tn / 0.7) ** 1.9
    shape = 1.55 * (a / (1.0 + a)) / (1.0 + (tn / 1.17) ** 21.9)
    return (e_max - e_min) * shape + e_min


def elastance(spec: ElastanceSpec, t):
    """E(t) in mmHg/ml; ``t`` may be a scalar or an array of times (s)."""
    out = elastance_values(spec.e_max, spec.e_min, spec.t_c, np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def initial_state(params: PatientParams, lvad: LvadParams | None = None) -> np.ndarray:
    """End-diastolic initial state; LA and LV pressures equal, aorta and arteries equal."""
    x0 = [params.start_v, params.start_v * params.e_min, params.start_pao, params.start_pao, 0.0]
    if lvad is not None:
        x0.append(0.0)
    return np.array(x0)


def diode_flows(x, e_t, r_m, r_a):
    """Mitral inflow and aortic outflow (both >= 0)."""
    p_lv = x[..., 0] * e_t
    p1 = np.maximum(x[..., 1] - p_lv, 0.0) / r_m
    p2 = np.maximum(p_lv - x[..., 3], 0.0) / r_a
    return p1, p2


def _circuit_rows(t, x, p):
    e_t = elastance_values(p.e_max, p.e_min, p.t_c, t)
    p1, p2 = diode_flows(x, e_t, p.r_m, p.r_a)
    x2, x3, x4, x5 = x[..., 1], x[..., 2], x[..., 3], x[..., 4]
    rows = [
        p1 - p2,
        (x3 - x2) / (p.r_s * p.c_r) - p1 / p.c_r,
        (x2 - x3) / (p.r_s * p.c_s) + x5 / p.c_s,
        -x5 / p.c_a + p2 / p.c_a,
        (x4 - x3 - p.r_c * x5) / p.l_s,
    ]
    return rows, e_t


def rhs5(t, x, params) -> np.ndarray:
    """Time derivative of the 5-state baseline circuit."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != 5:
        raise ValueError(f"rhs5 expects 5 states, got {x.shape[-1]}")
    rows, _ = _circuit_rows(t, x, params)
    return np.stack(rows, axis=-1)


def r_k(t, x1, spec: ElastanceSpec, lvad: LvadParams):
    """Suction resistance; nonzero only when LV pressure falls below ``p_bar``."""
    e_t = elastance_values(spec.e_max, spec.e_min, spec.t_c, t)
    return np.maximum(lvad.alpha * (x1 * e_t - lvad.p_bar), 0.0)


def rhs6(t, y, params, lvad: LvadParams) -> np.ndarray:
    """Time derivative of the LVAD-augmented 6-state circuit."""
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != 6:
        raise ValueError(f"rhs6 expects 6 states, got {y.shape[-1]}")
    rows, e_t = _circuit_rows(t, y, params)
    x1, x4, x6 = y[..., 0], y[..., 3], y[..., 5]
    rk = np.maximum(lvad.alpha * (x1 * e_t - lvad.p_bar), 0.0)
    omega = lvad.omega_schedule(t)
    rows[0] = rows[0] - x6
    rows[3] = rows[3] + x6 / params.c_a
    resist = lvad.r_i + lvad.r_o + rk - lvad.beta0
    rows.append((-e_t * x1 + x4 + resist * x6 - lvad.beta2 * omega**2) / lvad.denominator)
    return np.stack(rows, axis=-1)


def system_matrices(params: PatientParams) -> tuple[np.ndarray, np.ndarray]:
    """Constant matrices (A1, D1) of the baseline system x' = A1 x + D1 p(x)."""
    p = params
    a1 = np.array([
        [0, 0, 0, 0, 0],
        [0, -1 / (p.r_s * p.c_r), 1 / (p.r_s * p.c_r), 0, 0],
        [0, 1 / (p.r_s * p.c_s), -1 / (p.r_s * p.c_s), 0, 1 / p.c_s],
        [0, 0, 0, 0, -1 / p.c_a],
        [0, 0, -1 / p.l_s, 1 / p.l_s, -p.r_c / p.l_s],
    ], dtype=float)
    d1 = np.array([
        [1, -1],
        [-1 / p.c_r, 0],
        [0, 0],
        [0, 1 / p.c_a],
        [0, 0],
    ], dtype=float)
    return a1, d1


def pressure_volume(state, t, params):
    """(P_LV, V_LV) from circuit state(s) at time(s) ``t``."""
    state = np.asarray(state, dtype=float)
    x1 = state[..., 0]
    e_t = elastance_values(params.e_max, params.e_min, params.t_c, np.asarray(t, dtype=float))
    p_lv = e_t * x1
    v_lv = x1 + params.v_d
    if np.ndim(p_lv) == 0:
        return float(p_lv), float(v_lv)
    return p_lv, v_lv


def stack_params(params_list: Sequence[PatientParams]) -> SimpleNamespace:
    """Column-stack a cohort so the right-hand sides broadcast over patients."""
    return SimpleNamespace(**{
        name: np.array([getattr(p, name) for p in params_list]) for name in PARAM_FIELDS
    })
