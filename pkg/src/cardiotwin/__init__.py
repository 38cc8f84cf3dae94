"""Cardiovascular digital twins: lumped-parameter heart model, surrogate-based inversion, LVAD trials."""

from .analysis import EdEs, NonPhysiologicalError, PvLoop, average_pv_loop, ed_es_volumes, ejection_fraction, pv_loop
from .data import ParamBounds, generate_finetune_dataset, generate_pretext_dataset, sample_params
from .identify import identify_trajectory, recover_elastance, recover_static_params
from .model import LvadParams, OmegaSchedule, ParameterError, PatientParams, elastance, rhs5, rhs6
from .nn import Mlp, TrainConfig, loss_and_grad, train
from .pipeline import (
    calibrate_omega,
    finetune_backbone,
    omega_sweep,
    predict_twin,
    pretrain_surrogate,
    run_lvad_trial,
)
from .solver import Trajectory, integrate, simulate_batch, simulate_cycles

__version__ = "0.1.0"

__all__ = [
    "EdEs", "NonPhysiologicalError", "PvLoop", "average_pv_loop", "ed_es_volumes", "ejection_fraction", "pv_loop",
    "ParamBounds", "generate_finetune_dataset", "generate_pretext_dataset", "sample_params",
    "identify_trajectory", "recover_elastance", "recover_static_params",
    "LvadParams", "OmegaSchedule", "ParameterError", "PatientParams", "elastance", "rhs5", "rhs6",
    "Mlp", "TrainConfig", "loss_and_grad", "train",
    "calibrate_omega", "finetune_backbone", "omega_sweep", "predict_twin", "pretrain_surrogate", "run_lvad_trial",
    "Trajectory", "integrate", "simulate_batch", "simulate_cycles",
]
