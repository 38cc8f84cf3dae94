"""Clinical read-outs from trajectories: ED/ES volumes, ejection fraction, PV loops."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .solver import Trajectory

AVERAGE_GRID = 256


class NonPhysiologicalError(ValueError):
    """Volumes that no real ventricle can produce (e.g. non-positive V_ES)."""


@dataclass(frozen=True)
class EdEs:
    v_ed: float
    v_es: float
    t_ed: float
    t_es: float

    def __post_init__(self) -> None:
        if not self.v_es > 0:
            raise NonPhysiologicalError(f"end-systolic volume must be positive, got {self.v_es:.4g}")
        if self.v_ed < self.v_es:
            raise NonPhysiologicalError("v_ed below v_es")

    @property
    def ef(self) -> float:
        return ejection_fraction(self)


@dataclass(frozen=True)
class PvLoop:
    """One cycle of (V_LV, P_LV) pairs sampled uniformly in time."""

    points: np.ndarray
    cycle_index: int = 0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("points must be an (n, 2) array of (volume, pressure)")
        if len(pts) < 100:
            raise ValueError(f"a PV loop needs at least 100 points, got {len(pts)}")
        if not (pts[:, 0] > 0).all():
            raise NonPhysiologicalError("PV loop has non-positive volumes")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def volume(self) -> np.ndarray:
        return self.points[:, 0]

    @property
    def pressure(self) -> np.ndarray:
        return self.points[:, 1]

    @property
    def phase(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.points))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["phase", "v_lv", "p_lv"])
        for ph, (v, p) in zip(self.phase, self.points):
            writer.writerow([f"{ph:.9g}", f"{v:.9g}", f"{p:.9g}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, cycle_index: int = 0) -> "PvLoop":
        lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
        rows = list(csv.reader(lines))
        if rows[0] != ["phase", "v_lv", "p_lv"]:
            raise ValueError(f"unexpected PV-loop header {rows[0]}")
        table = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(table[:, 1:], cycle_index)


def _final_cycle(traj: Trajectory) -> tuple[slice, int]:
    m = traj.samples_per_cycle
    n_full = (len(traj) - 1) // m
    if n_full < 1:
        raise ValueError(f"trajectory covers {len(traj) - 1} steps, less than one cycle ({m})")
    start = (n_full - 1) * m
    # cycle index counted from t = 0, not from the trajectory start
    first = int(round(traj.t0 / (m * traj.dt)))
    return slice(start, start + m + 1), first + n_full - 1


def ed_es_volumes(traj: Trajectory) -> EdEs:
    """Volume extrema over the last full cycle."""
    sl, _ = _final_cycle(traj)
    v = traj.v_lv[sl]
    t = traj.times[sl]
    i_ed, i_es = int(np.argmax(v)), int(np.argmin(v))
    return EdEs(float(v[i_ed]), float(v[i_es]), float(t[i_ed]), float(t[i_es]))


def ejection_fraction(edes: EdEs) -> float:
    if not edes.v_ed > 0:
        raise ValueError("v_ed must be positive")
    return (edes.v_ed - edes.v_es) / edes.v_ed


def ef_from_volumes(v_ed, v_es):
    """Vectorised EF for arrays of predicted or true volumes."""
    v_ed = np.asarray(v_ed, dtype=float)
    return (v_ed - np.asarray(v_es, dtype=float)) / v_ed


def pv_loop(traj: Trajectory) -> PvLoop:
    sl, index = _final_cycle(traj)
    return PvLoop(np.column_stack([traj.v_lv[sl], traj.p_lv[sl]]), index)


def resample_loop(loop: PvLoop, n: int = AVERAGE_GRID) -> np.ndarray:
    grid = np.linspace(0.0, 1.0, n)
    return np.column_stack([
        np.interp(grid, loop.phase, loop.volume),
        np.interp(grid, loop.phase, loop.pressure),
    ])


def average_pv_loop(loops: Sequence[PvLoop]) -> PvLoop:
    """Pointwise mean on a common cycle-fraction grid.

    Each loop is aligned by its own cycle fraction, so members with
    different heart rates line up at end-diastole.
    """
    if not loops:
        raise ValueError("cannot average an empty list of loops")
    stacked = np.stack([resample_loop(lp) for lp in loops])
    return PvLoop(stacked.mean(axis=0), -1)
