"""Synthetic training data: parameter sampling, forward solves, and a stand-in imaging operator.

The "measurement" operator plays the role of an unknown imaging pipeline: it
reads the final-cycle LV volume waveform and passes it through a frozen,
randomly drawn two-layer network.  Nothing downstream may look at its
weights; they only fix a reproducible nonlinear map from physiology to
feature vectors.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .analysis import NonPhysiologicalError, ed_es_volumes
from .model import DEFAULT_RANGES, FIXED_VALUES, LEARNABLE, ParameterError, PatientParams
from .solver import DEFAULT_CYCLES, DEFAULT_STEPS, Trajectory, simulate_batch

log = logging.getLogger(__name__)

MEASUREMENT_DIM = 64
WAVEFORM_SAMPLES = 32
HIDDEN_RENDER = 48
VOLUME_CENTER = 100.0
VOLUME_SCALE = 100.0
MAX_FAILURE_RATE = 0.01


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamBounds:
    """Closed sampling box for the learnable parameters plus fixed values for the rest."""

    ranges: Mapping[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_RANGES))
    fixed: Mapping[str, float] = field(default_factory=lambda: dict(FIXED_VALUES))

    def __post_init__(self) -> None:
        if set(self.ranges) != set(LEARNABLE):
            raise ParameterError(f"ranges must cover exactly {LEARNABLE}")
        if set(self.fixed) != set(FIXED_VALUES):
            raise ParameterError(f"fixed values must cover exactly {sorted(FIXED_VALUES)}")
        ranges = {k: (float(self.ranges[k][0]), float(self.ranges[k][1])) for k in LEARNABLE}
        for k, (lo, hi) in ranges.items():
            if lo > hi:
                raise ParameterError(f"bounds for {k}: lo {lo} > hi {hi}")
        object.__setattr__(self, "ranges", ranges)
        object.__setattr__(self, "fixed", {k: float(v) for k, v in self.fixed.items()})

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.ranges[k][0] for k in LEARNABLE])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.ranges[k][1] for k in LEARNABLE])

    def contains(self, params: PatientParams) -> bool:
        theta = params.theta()
        inside = bool(np.all(theta >= self.lo) and np.all(theta <= self.hi))
        return inside and all(getattr(params, k) == v for k, v in self.fixed.items())

    def with_overrides(self, overrides: Mapping[str, Sequence[float]]) -> "ParamBounds":
        """Replace some ranges; overrides must be proper intervals."""
        ranges = dict(self.ranges)
        for k, pair in overrides.items():
            if k not in ranges:
                raise ParameterError(f"unknown learnable parameter {k!r}")
            lo, hi = float(pair[0]), float(pair[1])
            if not lo < hi:
                raise ParameterError(f"override for {k} needs lo < hi")
            ranges[k] = (lo, hi)
        return ParamBounds(ranges, self.fixed)

    def to_dict(self) -> dict:
        return {"ranges": {k: list(v) for k, v in self.ranges.items()}, "fixed": dict(self.fixed)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ParamBounds":
        unknown = set(data) - {"ranges", "fixed"}
        if unknown:
            raise ParameterError(f"unknown bounds keys {sorted(unknown)}")
        base = cls()
        return cls(data.get("ranges", base.ranges), data.get("fixed", base.fixed))


def grid_counts(n: int, n_axes: int) -> list[int]:
    """Near-equal per-axis level counts whose product is at least ``n``."""
    counts = [max(1, int(math.floor(n ** (1.0 / n_axes) + 1e-9)))] * n_axes
    i = 0
    while math.prod(counts) < n:
        counts[i % n_axes] += 1
        i += 1
    return counts


def sample_thetas(n: int, bounds: ParamBounds, seed: int, mode: str = "uniform") -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    lo, hi = bounds.lo, bounds.hi
    if mode == "uniform":
        rng = np.random.default_rng(seed)
        return rng.uniform(lo, hi, size=(n, len(lo)))
    if mode == "grid":
        axes = []
        for a, b, k in zip(lo, hi, grid_counts(n, len(lo))):
            axes.append(np.array([0.5 * (a + b)]) if k == 1 else np.linspace(a, b, k))
        return np.array(list(itertools.islice(itertools.product(*axes), n)))
    raise ValueError(f"unknown sampling mode {mode!r}")


def sample_params(n: int, bounds: ParamBounds | None = None, seed: int = 0,
                  mode: str = "uniform") -> list[PatientParams]:
    """Draw ``n`` parameter sets, uniform in the box or on a tensor grid."""
    bounds = bounds or ParamBounds()
    return [PatientParams.from_theta(th, bounds.fixed) for th in sample_thetas(n, bounds, seed, mode)]


@dataclass(frozen=True)
class PretextExample:
    theta: np.ndarray
    v_ed: float
    v_es: float


@dataclass
class PretextDataset:
    examples: list[PretextExample]
    failed: list[int]
    meta: dict

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[PretextExample]:
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    @property
    def thetas(self) -> np.ndarray:
        return np.array([e.theta for e in self.examples])

    @property
    def volumes(self) -> np.ndarray:
        return np.array([[e.v_ed, e.v_es] for e in self.examples])


def _solve_volumes(params: Sequence[PatientParams], n_cycles: int, steps: int):
    """Final-cycle trajectories and ED/ES volumes; failures come back as ``None``."""
    out = []
    for p, traj in zip(params, simulate_batch(params, None, n_cycles, steps)):
        if traj is None:
            out.append((None, None))
            continue
        try:
            out.append((traj, ed_es_volumes(traj)))
        except NonPhysiologicalError:
            out.append((None, None))
    return out


def _check_failures(failed: list[int], n: int) -> None:
    if failed:
        log.warning("%d of %d simulations failed", len(failed), n)
    if len(failed) > MAX_FAILURE_RATE * n:
        raise DatasetError(f"{len(failed)} of {n} simulations failed (limit {MAX_FAILURE_RATE:.0%})")


def generate_pretext_dataset(n: int = 3840, bounds: ParamBounds | None = None, seed: int = 0,
                             mode: str = "uniform", n_cycles: int = DEFAULT_CYCLES,
                             steps_per_cycle: int = DEFAULT_STEPS) -> PretextDataset:
    """Sample parameters and record the simulated end-diastolic/end-systolic volumes."""
    bounds = bounds or ParamBounds()
    params = sample_params(n, bounds, seed, mode)
    examples, failed = [], []
    for i, (p, (_, edes)) in enumerate(zip(params, _solve_volumes(params, n_cycles, steps_per_cycle))):
        if edes is None:
            failed.append(i)
        else:
            examples.append(PretextExample(p.theta(), edes.v_ed, edes.v_es))
    _check_failures(failed, n)
    meta = {"kind": "pretext", "n": n, "seed": seed, "mode": mode, "bounds": bounds.to_dict(),
            "n_cycles": n_cycles, "steps_per_cycle": steps_per_cycle, "n_failed": len(failed)}
    return PretextDataset(examples, failed, meta)


@dataclass(frozen=True)
class Renderer:
    """Frozen random feature map standing in for an imaging device."""

    render_seed: int
    w1: np.ndarray = field(init=False, repr=False)
    b1: np.ndarray = field(init=False, repr=False)
    w2: np.ndarray = field(init=False, repr=False)
    b2: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        rng = np.random.default_rng(self.render_seed)
        w1 = rng.standard_normal((HIDDEN_RENDER, WAVEFORM_SAMPLES)) / np.sqrt(WAVEFORM_SAMPLES)
        b1 = 0.1 * rng.standard_normal(HIDDEN_RENDER)
        w2 = rng.standard_normal((MEASUREMENT_DIM, HIDDEN_RENDER)) / np.sqrt(HIDDEN_RENDER)
        b2 = 0.1 * rng.standard_normal(MEASUREMENT_DIM)
        for name, arr in (("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def features(self, waveform: np.ndarray) -> np.ndarray:
        v = (np.asarray(waveform, dtype=float) - VOLUME_CENTER) / VOLUME_SCALE
        return np.tanh(self.w2 @ np.maximum(self.w1 @ v + self.b1, 0.0) + self.b2)


def final_cycle_waveform(traj: Trajectory, n: int = WAVEFORM_SAMPLES) -> np.ndarray:
    """``n`` volume samples uniformly spaced over the last full cycle (end point excluded)."""
    m = traj.samples_per_cycle
    n_full = (len(traj) - 1) // m
    if n_full < 1:
        raise ValueError("trajectory shorter than one cycle")
    v = traj.v_lv[(n_full - 1) * m:n_full * m + 1]
    phase = np.linspace(0.0, 1.0, len(v))
    return np.interp(np.arange(n) / n, phase, v)


@dataclass(frozen=True)
class Measurement:
    y: np.ndarray
    v_ed: float
    v_es: float
    true_theta: np.ndarray | None = None

    @property
    def labels(self) -> tuple[float, float]:
        return (self.v_ed, self.v_es)


def render_measurement(traj: Trajectory, render_seed: int = 0, noise_sigma: float = 0.0,
                       noise_rng: np.random.Generator | None = None,
                       renderer: Renderer | None = None) -> Measurement:
    """Feature vector and (V_ED, V_ES) labels for one simulated trajectory."""
    renderer = renderer or Renderer(render_seed)
    y = renderer.features(final_cycle_waveform(traj))
    if noise_sigma > 0:
        rng = noise_rng if noise_rng is not None else np.random.default_rng([render_seed, 1])
        y = y + rng.normal(0.0, noise_sigma, size=y.shape)
    edes = ed_es_volumes(traj)
    theta = traj.params.theta() if traj.params is not None else None
    return Measurement(y, edes.v_ed, edes.v_es, theta)


@dataclass
class FinetuneDataset:
    measurements: list[Measurement]
    failed: list[int]
    meta: dict

    def __len__(self) -> int:
        return len(self.measurements)

    def __getitem__(self, i):
        return self.measurements[i]

    @property
    def ys(self) -> np.ndarray:
        return np.array([m.y for m in self.measurements])

    @property
    def labels(self) -> np.ndarray:
        return np.array([m.labels for m in self.measurements])

    @property
    def thetas(self) -> np.ndarray:
        return np.array([m.true_theta for m in self.measurements])

    def split_indices(self) -> dict[str, np.ndarray]:
        """80/10/10 train/val/test by position."""
        n = len(self.measurements)
        n_train, n_val = int(0.8 * n), int(0.1 * n)
        idx = np.arange(n)
        return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val], "test": idx[n_train + n_val:]}

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.split_indices()[split]
        return self.ys[idx], self.labels[idx], self.thetas[idx]


def generate_finetune_dataset(n: int = 1000, bounds: ParamBounds | None = None, seed: int = 1,
                              render_seed: int = 0, noise_sigma: float = 0.0,
                              n_cycles: int = DEFAULT_CYCLES,
                              steps_per_cycle: int = DEFAULT_STEPS) -> FinetuneDataset:
    """Labelled (measurement, volumes) pairs with the true parameters kept for evaluation."""
    bounds = bounds or ParamBounds()
    params = sample_params(n, bounds, seed, "uniform")
    renderer = Renderer(render_seed)
    noise_rng = np.random.default_rng([seed, render_seed, 1])
    measurements, failed = [], []
    for i, (traj, edes) in enumerate(_solve_volumes(params, n_cycles, steps_per_cycle)):
        if traj is None:
            failed.append(i)
            continue
        measurements.append(render_measurement(traj, render_seed, noise_sigma, noise_rng, renderer))
    _check_failures(failed, n)
    meta = {"kind": "finetune", "n": n, "seed": seed, "render_seed": render_seed,
            "noise_sigma": noise_sigma, "bounds": bounds.to_dict(), "n_cycles": n_cycles,
            "steps_per_cycle": steps_per_cycle, "n_failed": len(failed)}
    ds = FinetuneDataset(measurements, failed, meta)
    ds.meta["split_sizes"] = {k: int(len(v)) for k, v in ds.split_indices().items()}
    return ds
