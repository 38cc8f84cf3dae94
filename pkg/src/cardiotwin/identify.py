"""Constructive parameter recovery from fully observed trajectories.

Given every circuit state over time (plus P_LV and V_LV), the elastance
parameters follow from pointwise ratios, and each row of the state equation
becomes a small linear system in the static circuit elements once it is
Laplace transformed at a few values of ``s``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import PatientParams, system_matrices

DEFAULT_S = (2.0, 4.0, 8.0)
MAX_CONDITION = 1e10
STATIC_FIELDS = ("r_m", "r_a", "r_s", "c_r", "c_s", "c_a", "l_s", "r_c")
ELASTANCE_FIELDS = ("e_max", "e_min", "t_c", "v_d")


class IdentifiabilityError(ValueError):
    pass


class DegenerateSignalError(IdentifiabilityError):
    """The elastance series has no detectable period."""


@dataclass(frozen=True)
class ElastanceRecovery:
    e_max: float
    e_min: float
    t_c: float
    v_d: float
    elastance: np.ndarray = field(repr=False)


def _pearson_autocorr(s: np.ndarray) -> np.ndarray:
    """Correlation coefficient between ``s[:n-k]`` and ``s[k:]`` for every lag ``k``."""
    n = len(s)
    spec = np.fft.rfft(s, 2 * n)
    cross = np.fft.irfft(spec * np.conj(spec), 2 * n)[:n]
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    c2 = np.concatenate([[0.0], np.cumsum(s * s)])
    k = np.arange(n)
    m = n - k
    sum_a, sum_b = c1[m], c1[n] - c1[k]
    sq_a, sq_b = c2[m], c2[n] - c2[k]
    var_a = sq_a - sum_a**2 / m
    var_b = sq_b - sum_b**2 / m
    cov = cross - sum_a * sum_b / m
    with np.errstate(invalid="ignore", divide="ignore"):
        out = cov / np.sqrt(var_a * var_b)
    return np.nan_to_num(out, nan=0.0)


def _autocorr_period(signal: np.ndarray, dt: float) -> float:
    if np.ptp(signal) <= 1e-12 * max(1.0, np.abs(signal).max()):
        raise DegenerateSignalError("elastance is constant; no period to detect")
    ac = _pearson_autocorr(signal - signal.mean())
    n = len(ac)
    below = np.nonzero(ac < 0)[0]
    if len(below) == 0:
        raise DegenerateSignalError("autocorrelation never decorrelates")
    # lags whose overlap is under a quarter of the series are too noisy to trust
    lo, hi = below[0], (3 * n) // 4
    if hi <= lo + 1:
        raise DegenerateSignalError("series too short to hold two periods")
    window = ac[lo:hi]
    # first local maximum reaching half the best peak: later peaks are multiples of the period
    level = 0.5 * window.max()
    peaks = np.nonzero((window[1:-1] >= window[:-2]) & (window[1:-1] >= window[2:])
                       & (window[1:-1] >= level))[0]
    if len(peaks) == 0 or window.max() < 0.5:
        raise DegenerateSignalError("no clear autocorrelation peak")
    k = lo + 1 + int(peaks[0])
    y0, y1, y2 = ac[k - 1], ac[k], ac[k + 1]
    denom = y0 - 2 * y1 + y2
    shift = 0.5 * (y0 - y2) / denom if denom != 0 else 0.0
    return (k + shift) * dt


def recover_elastance(p_lv, v_lv, x1, dt: float, tol: float = 1e-9) -> ElastanceRecovery:
    """Elastance parameters and V_d from LV pressure, volume and the shifted volume state.

    ``tol`` bounds the relative spread of ``V_LV - x1``; loosen it for data
    that went through a text file.
    """
    p_lv, v_lv, x1 = (np.asarray(a, dtype=float) for a in (p_lv, v_lv, x1))
    diff = v_lv - x1
    v_d = float(diff.mean())
    if np.max(np.abs(diff - v_d)) > tol * max(abs(v_d), 1e-300):
        raise IdentifiabilityError("V_LV - x1 is not constant; inputs are inconsistent")
    e = p_lv / (v_lv - v_d)
    t_c = _autocorr_period(e, dt)
    m = int(round(t_c / dt))
    last = e[-(m + 1):]
    return ElastanceRecovery(float(last.max()), float(last.min()), float(t_c), v_d, e)


def truncated_laplace(series, dt: float, s: float, t0: float = 0.0) -> float:
    """Trapezoidal integral of ``exp(-s t) f(t)`` over the sampled horizon."""
    if not s > 0:
        raise ValueError("s must be positive")
    f = np.asarray(series, dtype=float)
    t = t0 + dt * np.arange(len(f))
    g = np.exp(-s * t) * f
    return float(dt * (g.sum() - 0.5 * (g[0] + g[-1])))


def _laplace_rows(series: np.ndarray, dt: float, s_values) -> np.ndarray:
    """Laplace transforms of several columns: shape ``(len(s), n_cols)``."""
    t = dt * np.arange(len(series))
    w = np.full(len(series), dt)
    w[0] = w[-1] = 0.5 * dt
    return np.stack([(np.exp(-s * t) * w) @ series for s in s_values])


@dataclass
class RecoveredParams:
    values: dict
    truth: dict | None = None
    rel_errors: dict | None = None
    residuals: dict = field(default_factory=dict)
    cross_checks: dict = field(default_factory=dict)

    def __getattr__(self, name):
        values = self.__dict__.get("values", {})
        if name in values:
            return values[name]
        raise AttributeError(name)

    def to_dict(self) -> dict:
        return {
            "recovered": self.values,
            "truth": self.truth,
            "relative_errors": self.rel_errors,
            "residuals": self.residuals,
            "cross_checks": self.cross_checks,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _lstsq(name: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise IdentifiabilityError(f"{name} system is ill-conditioned (cond={cond:.3g})")
    return np.linalg.lstsq(a, b, rcond=None)[0]


def recover_static_params(states, elastance_series, dt: float, truth: PatientParams | None = None,
                          s_values=DEFAULT_S, elastance_fit: ElastanceRecovery | None = None,
                          ) -> RecoveredParams:
    """Solve each transformed state row for the eight static circuit elements.

    ``states`` is the ``(n, 5)`` baseline trajectory starting at the
    end-diastolic initial condition.
    """
    x = np.asarray(states, dtype=float)[:, :5]
    e = np.asarray(elastance_series, dtype=float)
    if len(e) != len(x):
        raise ValueError("elastance and state series differ in length")
    s_arr = np.asarray(s_values, dtype=float)
    x1, x2, x3, x4, x5 = x.T
    q1 = np.maximum(x2 - x1 * e, 0.0)
    q2 = np.maximum(x1 * e - x4, 0.0)
    horizon = dt * (len(x) - 1)

    lx = _laplace_rows(x, dt, s_arr)
    lq = _laplace_rows(np.column_stack([q1, q2]), dt, s_arr)
    # transform of x' over a finite horizon, boundary term included
    ldx = s_arr[:, None] * lx - x[0] + np.exp(-s_arr * horizon)[:, None] * x[-1]
    l1, l2, l3, l4, l5 = lx.T
    lq1, lq2 = lq.T

    inv_rm, inv_ra = _lstsq("row 1", np.column_stack([lq1, -lq2]), ldx[:, 0])
    r_m, r_a = 1.0 / inv_rm, 1.0 / inv_ra

    u, v = _lstsq("row 2", np.column_stack([l3 - l2, -lq1 / r_m]), ldx[:, 1])
    c_r = 1.0 / v
    r_s = v / u

    u3, v3 = _lstsq("row 3", np.column_stack([l2 - l3, l5]), ldx[:, 2])
    c_s = 1.0 / v3
    r_s_row3 = v3 / u3

    v4, w4 = _lstsq("row 4", np.column_stack([-l5, lq2]), ldx[:, 3])
    c_a = 1.0 / v4
    r_a_row4 = v4 / w4

    v5, w5 = _lstsq("row 5", np.column_stack([l4 - l3, -l5]), ldx[:, 4])
    l_s = 1.0 / v5
    r_c = w5 / v5

    values = {"r_m": r_m, "r_a": r_a, "r_s": r_s, "c_r": c_r, "c_s": c_s, "c_a": c_a, "l_s": l_s, "r_c": r_c}
    if elastance_fit is not None:
        values.update({k: getattr(elastance_fit, k) for k in ELASTANCE_FIELDS})
    values = {k: float(val) for k, val in values.items()}
    bad = [k for k, val in values.items() if not val > 0]
    if bad:
        raise IdentifiabilityError(f"non-positive recovered values for {bad}")

    residuals = _row_residuals(values, lx, lq, ldx)
    result = RecoveredParams(
        values=values,
        residuals=residuals,
        cross_checks={"r_s_row3": float(r_s_row3), "r_a_row4": float(r_a_row4)},
    )
    if truth is not None:
        result.truth = {k: getattr(truth, k) for k in values}
        result.rel_errors = {k: abs(values[k] - result.truth[k]) / abs(result.truth[k]) for k in values}
    return result


def _row_residuals(values: dict, lx, lq, ldx) -> dict:
    """Relative mismatch of ``sL(x) - x(0) = A1 L(x) + D1 L(p)`` per row."""
    template = PatientParams.reference()
    p = template.replace(**{k: values[k] for k in STATIC_FIELDS})
    a1, d1 = system_matrices(p)
    lp = lq / np.array([values["r_m"], values["r_a"]])
    rhs = lx @ a1.T + lp @ d1.T
    # scale by the magnitude of the individual terms so cancellation cannot hide errors
    scale = np.abs(lx) @ np.abs(a1.T) + np.abs(lp) @ np.abs(d1.T) + np.abs(ldx)
    out = {}
    for i in range(5):
        out[f"row_{i + 1}"] = float(np.linalg.norm(ldx[:, i] - rhs[:, i]) / np.linalg.norm(scale[:, i]))
    return out


def identify_trajectory(traj, truth: PatientParams | None = None, s_values=DEFAULT_S,
                        tol: float = 1e-9) -> RecoveredParams:
    """Full recovery from a baseline ``Trajectory``."""
    states = traj.states
    fit = recover_elastance(traj.p_lv, traj.v_lv, states[:, 0], traj.dt, tol)
    return recover_static_params(states, fit.elastance, traj.dt, truth, s_values, fit)
