"""Fixed-step RK4 integration and multi-cycle simulation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import (
    LvadParams,
    PatientParams,
    initial_state,
    pressure_volume,
    rhs5,
    rhs6,
    stack_params,
)

DEFAULT_CYCLES = 3
DEFAULT_STEPS = 2000


class IntegrationError(RuntimeError):
    def __init__(self, step: int, message: str = "non-finite state"):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    """States sampled at ``t0 + k*dt``; P_LV and V_LV are derived on access."""

    t0: float
    dt: float
    states: np.ndarray
    params: PatientParams | None = None
    lvad: LvadParams | None = None

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if len(states) == 0:
            raise ValueError("trajectory has no states")
        states.setflags(write=False)
        object.__setattr__(self, "states", states)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self.states))

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def p_lv(self) -> np.ndarray:
        return pressure_volume(self.states, self.times, self.params)[0]

    @property
    def v_lv(self) -> np.ndarray:
        return pressure_volume(self.states, self.times, self.params)[1]

    @property
    def samples_per_cycle(self) -> int:
        return int(round(self.params.t_c / self.dt))

    def tail(self, start: int) -> "Trajectory":
        return Trajectory(self.t0 + start * self.dt, self.dt, self.states[start:], self.params, self.lvad)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = [f"x{i + 1}" for i in range(self.dim)]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", *names, "p_lv", "v_lv"])
        p_lv, v_lv = self.p_lv, self.v_lv
        for t, row, p, v in zip(self.times, self.states, p_lv, v_lv):
            writer.writerow([f"{x:.9g}" for x in (t, *row, p, v)])
        return buf.getvalue()


def read_trajectory_csv(text: str, params: PatientParams | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse a trajectory CSV (comment lines starting with ``#`` skipped).

    Returns the header names and the numeric table.
    """
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    table = np.array([[float(v) for v in row] for row in reader])
    return np.array(header), table


def _rk4(system, x0, t0, dt, n_steps, keep_from=0, on_nonfinite="raise"):
    """Advance ``x0`` by ``n_steps`` RK4 steps.

    ``dt`` is a scalar or, for cohorts, an array shaped like ``x0[..., 0]``.
    Returns the stored states (indices ``keep_from..n_steps``) and a mask of
    rows that went non-finite (only when ``on_nonfinite="mask"``).
    """
    x = np.array(x0, dtype=float)
    dt = np.asarray(dt, dtype=float)
    dtc = dt[..., None] if dt.ndim else dt
    out = np.empty((n_steps + 1 - keep_from,) + x.shape)
    failed = np.zeros(x.shape[:-1], dtype=bool)
    if keep_from == 0:
        out[0] = x
    half = 0.5 * dtc
    for k in range(n_steps):
        t = t0 + k * dt
        th = t + 0.5 * dt
        k1 = system(t, x)
        k2 = system(th, x + half * k1)
        k3 = system(th, x + half * k2)
        k4 = system(t + dt, x + dtc * k3)
        x = x + (dtc / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        bad = ~np.isfinite(x).all(axis=-1)
        if bad.any():
            if on_nonfinite == "raise":
                raise IntegrationError(k + 1)
            failed |= bad
            x[bad] = 0.0
        if k + 1 >= keep_from:
            out[k + 1 - keep_from] = x
    return out, failed


def integrate(system: Callable, x0, t0: float, t1: float, dt: float,
              params: PatientParams | None = None, lvad: LvadParams | None = None) -> Trajectory:
    """Classical RK4 on ``x' = system(t, x)`` from ``t0`` to the last grid point <= ``t1``."""
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if not dt > 0 or dt > t1 - t0:
        raise ValueError("need 0 < dt <= t1 - t0")
    n_steps = int(math.floor((t1 - t0) / dt + 1e-9))
    states, _ = _rk4(system, np.atleast_1d(np.asarray(x0, dtype=float)), t0, dt, n_steps)
    return Trajectory(t0, dt, states, params, lvad)


def _check_counts(n_cycles: int, steps_per_cycle: int) -> None:
    if n_cycles < 1:
        raise ValueError("n_cycles must be >= 1")
    if steps_per_cycle < 100:
        raise ValueError("steps_per_cycle must be >= 100")


def simulate_batch(params_list: Sequence[PatientParams], lvad: LvadParams | None = None,
                   n_cycles: int = DEFAULT_CYCLES, steps_per_cycle: int = DEFAULT_STEPS,
                   keep: str = "last", chunk: int = 512) -> list[Trajectory | None]:
    """Simulate a cohort in lock-step; ``None`` marks patients whose state blew up.

    ``keep="last"`` stores only the final cycle (``steps_per_cycle + 1``
    samples), ``keep="all"`` the whole run.  Each patient uses its own
    ``dt = t_c / steps_per_cycle``, so all patients take the same number of
    steps.  Results do not depend on ``chunk``.
    """
    _check_counts(n_cycles, steps_per_cycle)
    if keep not in ("last", "all"):
        raise ValueError("keep must be 'last' or 'all'")
    n_steps = n_cycles * steps_per_cycle
    keep_from = (n_cycles - 1) * steps_per_cycle if keep == "last" else 0
    results: list[Trajectory | None] = []
    for lo in range(0, len(params_list), chunk):
        group = list(params_list[lo:lo + chunk])
        stacked = stack_params(group)
        dt = stacked.t_c / steps_per_cycle
        x0 = np.stack([initial_state(p, lvad) for p in group])
        if lvad is None:
            def system(t, x):
                return rhs5(t, x, stacked)
        else:
            def system(t, x):
                return rhs6(t, x, stacked, lvad)
        with np.errstate(over="ignore", invalid="ignore"):
            states, failed = _rk4(system, x0, 0.0, dt, n_steps, keep_from, on_nonfinite="mask")
        for i, p in enumerate(group):
            if failed[i]:
                results.append(None)
            else:
                results.append(Trajectory(keep_from * dt[i], float(dt[i]), states[:, i, :].copy(), p, lvad))
    return results


def simulate_cycles(params: PatientParams, lvad: LvadParams | None = None,
                    n_cycles: int = DEFAULT_CYCLES, steps_per_cycle: int = DEFAULT_STEPS) -> Trajectory:
    """Full trajectory of one patient from the end-diastolic initial state."""
    _check_counts(n_cycles, steps_per_cycle)
    stacked = stack_params([params])
    dt = params.t_c / steps_per_cycle
    system = (lambda t, x: rhs5(t, x, stacked)) if lvad is None else (lambda t, x: rhs6(t, x, stacked, lvad))
    x0 = initial_state(params, lvad)[None, :]
    states, _ = _rk4(system, x0, 0.0, np.array([dt]), n_cycles * steps_per_cycle)
    return Trajectory(0.0, dt, states[:, 0, :], params, lvad)
