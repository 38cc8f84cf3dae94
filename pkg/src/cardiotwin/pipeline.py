"""Two-stage training (surrogate, then inverse backbone), twin prediction and LVAD trials."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .analysis import EdEs, NonPhysiologicalError, PvLoop, ed_es_volumes, ef_from_volumes, pv_loop
from .data import FinetuneDataset, Measurement, ParamBounds, PretextDataset
from .model import FIXED_VALUES, LvadParams, OmegaSchedule, ParameterError, PatientParams
from .nn import Mlp, TrainConfig, TrainingError, forward, train
from .solver import DEFAULT_CYCLES, DEFAULT_STEPS, Trajectory, simulate_batch

log = logging.getLogger(__name__)

VOLUME_SCALE = 100.0
SURROGATE_HIDDEN = (64, 64)
BACKBONE_HIDDEN = (128, 128)
MIN_PRETEXT = 500
MAX_TRIAL_FAILURE = 0.05
DEFAULT_OMEGA_LEVELS = tuple(float(w) for w in range(0, 20001, 1000))

PRETRAIN_CONFIG = TrainConfig(lr=1e-3, batch_size=100, epochs=300, seed=0)
FINETUNE_CONFIG = TrainConfig(lr=1e-3, batch_size=100, epochs=300, seed=1)


class TwinError(RuntimeError):
    def __init__(self, message: str, theta_hat=None):
        super().__init__(message)
        self.theta_hat = theta_hat


def _normaliser(bounds: ParamBounds) -> tuple[np.ndarray, np.ndarray]:
    width = bounds.hi - bounds.lo
    return bounds.lo, np.where(width > 0, 1.0 / np.where(width > 0, width, 1.0), 1.0)


def build_surrogate(bounds: ParamBounds, seed: int = 0) -> Mlp:
    shift, scale = _normaliser(bounds)
    return Mlp.init((7, *SURROGATE_HIDDEN, 2), seed, activation="tanh", head="linear",
                    in_shift=shift, in_scale=scale)


def build_backbone(bounds: ParamBounds, in_dim: int = 64, seed: int = 1) -> Mlp:
    return Mlp.init((in_dim, *BACKBONE_HIDDEN, 7), seed, activation="relu", head="range_sigmoid",
                    head_lo=bounds.lo, head_hi=bounds.hi)


def predict_volumes(phi_m: Mlp, thetas) -> np.ndarray:
    """Surrogate (V_ED, V_ES) in ml."""
    return forward(phi_m, thetas) * VOLUME_SCALE


def ef_mae(pred_volumes, true_volumes) -> float:
    """Mean absolute EF error in percentage points."""
    pred, true = np.atleast_2d(pred_volumes), np.atleast_2d(true_volumes)
    return float(100.0 * np.mean(np.abs(ef_from_volumes(pred[:, 0], pred[:, 1])
                                        - ef_from_volumes(true[:, 0], true[:, 1]))))


@dataclass
class SurrogateResult:
    net: Mlp
    history: list[float]
    metrics: dict


def pretrain_surrogate(dataset: PretextDataset, config: TrainConfig = PRETRAIN_CONFIG,
                       eval_set: PretextDataset | None = None,
                       bounds: ParamBounds | None = None) -> SurrogateResult:
    """Fit parameters -> (V_ED, V_ES) on simulated examples."""
    if len(dataset) < MIN_PRETEXT:
        raise ValueError(f"pretext dataset needs >= {MIN_PRETEXT} examples, got {len(dataset)}")
    if bounds is None:
        bounds = ParamBounds.from_dict(dataset.meta["bounds"]) if "bounds" in dataset.meta else ParamBounds()
    net = build_surrogate(bounds, config.seed)
    result = train(net, dataset.thetas, dataset.volumes / VOLUME_SCALE, config)
    train_pred = predict_volumes(result.net, dataset.thetas)
    metrics = {
        "train_ef_mae": ef_mae(train_pred, dataset.volumes),
        "train_volume_mae_ml": np.abs(train_pred - dataset.volumes).mean(axis=0).tolist(),
        "final_loss": result.history[-1],
    }
    if eval_set is not None:
        pred = predict_volumes(result.net, eval_set.thetas)
        metrics["eval_n"] = len(eval_set)
        metrics["eval_ef_mae"] = ef_mae(pred, eval_set.volumes)
        metrics["eval_volume_mae_ml"] = np.abs(pred - eval_set.volumes).mean(axis=0).tolist()
    log.info("surrogate trained: %s", metrics)
    return SurrogateResult(result.net, result.history, metrics)


@dataclass
class TwinPrediction:
    theta_hat: PatientParams
    trajectory: Trajectory
    pv_loop: PvLoop
    edes: EdEs
    ef: float


def _twin_from_trajectory(theta_hat: PatientParams, traj: Trajectory | None) -> TwinPrediction:
    if traj is None:
        raise TwinError("simulation of predicted parameters diverged", theta_hat)
    try:
        edes = ed_es_volumes(traj)
        loop = pv_loop(traj)
    except NonPhysiologicalError as exc:
        raise TwinError(f"predicted twin is non-physiological: {exc}", theta_hat) from exc
    return TwinPrediction(theta_hat, traj, loop, edes, edes.ef)


def predict_thetas(ys, phi_f: Mlp, fixed=None) -> list[PatientParams]:
    raw = np.atleast_2d(forward(phi_f, np.atleast_2d(ys)))
    fixed = dict(FIXED_VALUES if fixed is None else fixed)
    return [PatientParams.from_theta(th, fixed) for th in raw]


def predict_twins(ys, phi_f: Mlp, fixed=None, n_cycles: int = DEFAULT_CYCLES,
                  steps_per_cycle: int = DEFAULT_STEPS, keep: str = "last") -> list[TwinPrediction | TwinError]:
    """Batch form of :func:`predict_twin`; failures are returned in place, not raised."""
    thetas = predict_thetas(ys, phi_f, fixed)
    out: list[TwinPrediction | TwinError] = []
    for th, traj in zip(thetas, simulate_batch(thetas, None, n_cycles, steps_per_cycle, keep=keep)):
        try:
            out.append(_twin_from_trajectory(th, traj))
        except TwinError as exc:
            out.append(exc)
    return out


def predict_twin(y, phi_f: Mlp, fixed=None, n_cycles: int = DEFAULT_CYCLES,
                 steps_per_cycle: int = DEFAULT_STEPS) -> TwinPrediction:
    """Parameters from the backbone, then a fresh forward solve; the surrogate is not used."""
    y = y.y if isinstance(y, Measurement) else np.asarray(y, dtype=float)
    if y.shape != (phi_f.dims[0],):
        raise ValueError(f"measurement has shape {y.shape}, backbone expects ({phi_f.dims[0]},)")
    result = predict_twins(y[None, :], phi_f, fixed, n_cycles, steps_per_cycle, keep="all")[0]
    if isinstance(result, TwinError):
        raise result
    return result


@dataclass
class FinetuneResult:
    net: Mlp
    history: list[float]
    metrics: dict
    test_predictions: list = field(default_factory=list, repr=False)


def finetune_backbone(dataset: FinetuneDataset, phi_m: Mlp, config: TrainConfig = FINETUNE_CONFIG,
                      bounds: ParamBounds | None = None, n_cycles: int = DEFAULT_CYCLES,
                      steps_per_cycle: int = DEFAULT_STEPS) -> FinetuneResult:
    """Train measurement -> parameters through the frozen surrogate on volume labels only."""
    if bounds is None:
        bounds = ParamBounds.from_dict(dataset.meta["bounds"]) if "bounds" in dataset.meta else ParamBounds()
    y_train, l_train, _ = dataset.subset("train")
    y_test, l_test, th_test = dataset.subset("test")
    if len(y_train) == 0 or len(y_test) == 0:
        raise ValueError("finetune dataset needs non-empty train and test splits")
    net = build_backbone(bounds, y_train.shape[1], config.seed)
    result = train(net, y_train, l_train / VOLUME_SCALE, config, frozen_tail=phi_m)
    phi_f = result.net

    theta_hat = np.atleast_2d(forward(phi_f, y_test))
    surrogate_vols = predict_volumes(phi_m, theta_hat)
    twins = predict_twins(y_test, phi_f, bounds.fixed, n_cycles, steps_per_cycle)
    ok = [i for i, t in enumerate(twins) if isinstance(t, TwinPrediction)]
    if not ok:
        raise TrainingError("every test twin failed to simulate")
    resim = np.array([[twins[i].edes.v_ed, twins[i].edes.v_es] for i in ok])
    metrics = {
        "n_train": int(len(y_train)),
        "n_test": int(len(y_test)),
        "final_loss": result.history[-1],
        "test_ef_mae_surrogate": ef_mae(surrogate_vols, l_test),
        "test_ef_mae_resim": ef_mae(resim, l_test[ok]),
        "test_v_ed_mae_resim": float(np.abs(resim[:, 0] - l_test[ok, 0]).mean()),
        "test_v_es_mae_resim": float(np.abs(resim[:, 1] - l_test[ok, 1]).mean()),
        "test_twin_failures": len(twins) - len(ok),
        "theta_within_bounds": bool(np.all((theta_hat >= bounds.lo) & (theta_hat <= bounds.hi))),
        "test_theta_mae": np.abs(theta_hat - th_test).mean(axis=0).tolist(),
    }
    log.info("backbone finetuned: %s", metrics)
    return FinetuneResult(phi_f, result.history, metrics, twins)


@dataclass
class TrialResult:
    ef_baseline: np.ndarray
    ef_lvad: np.ndarray
    omega: float
    min_pump_flow: np.ndarray
    failed: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def delta_ef(self) -> np.ndarray:
        return self.ef_lvad - self.ef_baseline

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.delta_ef)

    @property
    def mean_delta(self) -> float:
        return float(np.mean(self.delta_ef[self.ok]))

    @property
    def spearman(self) -> float:
        ok = self.ok
        return float(spearmanr(self.ef_baseline[ok], self.delta_ef[ok])[0])

    @property
    def backflow_free(self) -> bool:
        return bool(np.all(self.min_pump_flow[self.ok] >= 0))

    def summary(self) -> dict:
        return {
            "omega": self.omega,
            "n_patients": int(len(self.ef_baseline)),
            "n_failed": len(self.failed),
            "mean_ef_baseline": float(np.nanmean(self.ef_baseline)),
            "mean_ef_lvad": float(np.nanmean(self.ef_lvad)),
            "mean_delta_ef": self.mean_delta,
            "spearman_baseline_vs_delta": self.spearman,
            "backflow_free": self.backflow_free,
            **self.meta,
        }


def _as_params(member) -> PatientParams:
    return member.theta_hat if isinstance(member, TwinPrediction) else member


def _final_cycle_ef(trajs) -> np.ndarray:
    out = np.full(len(trajs), np.nan)
    for i, tr in enumerate(trajs):
        if tr is None:
            continue
        try:
            out[i] = ed_es_volumes(tr).ef
        except NonPhysiologicalError:
            pass
    return out


def run_lvad_trial(cohort: Sequence, lvad: LvadParams, n_cycles: int = DEFAULT_CYCLES,
                   steps_per_cycle: int = DEFAULT_STEPS, baseline: np.ndarray | None = None) -> TrialResult:
    """Baseline and pump-assisted simulations with identical solver settings.

    ``baseline`` may carry precomputed baseline EFs (same settings) to skip
    re-simulating the untreated arm during sweeps.
    """
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    params = [_as_params(m) for m in cohort]
    if baseline is None:
        baseline = _final_cycle_ef(simulate_batch(params, None, n_cycles, steps_per_cycle))
    assisted = simulate_batch(params, lvad, n_cycles, steps_per_cycle)
    ef_lvad = _final_cycle_ef(assisted)
    min_flow = np.array([tr.states[:, 5].min() if tr is not None else np.nan for tr in assisted])
    failed = [i for i in range(len(params)) if not (np.isfinite(baseline[i]) and np.isfinite(ef_lvad[i]))]
    if len(failed) > MAX_TRIAL_FAILURE * len(params):
        raise RuntimeError(f"{len(failed)} of {len(params)} trial simulations failed")
    omega = lvad.omega_schedule.level if lvad.omega_schedule.kind == "constant" else lvad.omega_schedule.end
    meta = {"n_cycles": n_cycles, "steps_per_cycle": steps_per_cycle, "schedule": lvad.omega_schedule.kind}
    return TrialResult(np.asarray(baseline, dtype=float), ef_lvad, float(omega), min_flow, failed, meta)


@dataclass
class SweepRow:
    omega: float
    edes: EdEs | None
    ef: float
    loop: PvLoop | None


def omega_sweep(patient: PatientParams, lvad: LvadParams, levels: Sequence[float],
                n_cycles: int = DEFAULT_CYCLES, steps_per_cycle: int = DEFAULT_STEPS) -> list[SweepRow]:
    """One assisted simulation per constant pump speed, ascending in speed."""
    if len(levels) == 0:
        raise ValueError("no omega levels given")
    if any(w < 0 for w in levels):
        raise ParameterError("omega levels must be non-negative")
    rows = []
    for w in sorted(float(x) for x in levels):
        traj = simulate_batch([patient], lvad.with_omega(w), n_cycles, steps_per_cycle)[0]
        try:
            if traj is None:
                raise NonPhysiologicalError("diverged")
            edes = ed_es_volumes(traj)
            rows.append(SweepRow(w, edes, edes.ef, pv_loop(traj)))
        except NonPhysiologicalError:
            log.warning("omega %.0f failed for patient", w)
            rows.append(SweepRow(w, None, float("nan"), None))
    return rows


@dataclass
class Calibration:
    omega: float
    trials: list[TrialResult]


def calibrate_omega(cohort: Sequence, lvad: LvadParams, levels: Sequence[float] = DEFAULT_OMEGA_LEVELS,
                    n_cycles: int = DEFAULT_CYCLES, steps_per_cycle: int = DEFAULT_STEPS) -> Calibration:
    """Smallest constant speed with a positive mean EF gain and no retrograde pump flow.

    At low speeds the unpowered pump branch leaks blood back from the aorta,
    which inflates end-diastolic volume and fakes an EF gain, so forward flow
    throughout the final cycle is required for every patient.
    """
    params = [_as_params(m) for m in cohort]
    baseline = _final_cycle_ef(simulate_batch(params, None, n_cycles, steps_per_cycle))
    trials = []
    for w in sorted(float(x) for x in levels):
        try:
            trial = run_lvad_trial(params, lvad.with_omega(w), n_cycles, steps_per_cycle, baseline)
        except RuntimeError:
            continue
        trials.append(trial)
        if not trial.failed and trial.mean_delta > 0 and trial.backflow_free:
            return Calibration(w, trials)
    raise RuntimeError("no omega level satisfied the calibration conditions")


def low_ef_cohort(n: int = 100, bounds: ParamBounds | None = None, seed: int = 2024,
                  n_cycles: int = DEFAULT_CYCLES, steps_per_cycle: int = DEFAULT_STEPS) -> list[PatientParams]:
    """``n`` synthetic patients whose baseline EF lies below the population median."""
    from .data import sample_params

    candidates = sample_params(4 * n, bounds, seed)
    ef = _final_cycle_ef(simulate_batch(candidates, None, n_cycles, steps_per_cycle))
    median = np.nanmedian(ef)
    chosen = [p for p, e in zip(candidates, ef) if np.isfinite(e) and e < median]
    if len(chosen) < n:
        raise RuntimeError("not enough low-EF candidates")
    return chosen[:n]


def constant_lvad(omega: float, base: LvadParams | None = None) -> LvadParams:
    return (base or LvadParams()).with_omega(OmegaSchedule.constant(omega))
