"""Gradient-guided layer selection for selective LoRA, at desk scale.

Probe per-layer gradient norms on a frozen base, adapt only the top-k% of
layers, and compare against all-layer LoRA with seed-paired statistics.
"""
from .autodiff import Parameter, Tensor, backward, no_grad
from .campaign import CampaignSpec, Ledger, RunRecord, run_campaign, run_compute_matched, run_pair
from .kernels import BACKEND
from .model import LoraPlan, ModelConfig, build_model, inject_lora
from .probe import ProbeConfig, ProbeReport, gradient_probe, select_layers, selection_count
from .stats import paired_t_test, student_t_cdf
from .trainer import TrainConfig, measure_speedup, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "CampaignSpec", "Ledger", "LoraPlan", "ModelConfig", "Parameter", "ProbeConfig",
    "ProbeReport", "RunRecord", "Tensor", "TrainConfig", "backward", "build_model", "gradient_probe",
    "inject_lora", "measure_speedup", "no_grad", "paired_t_test", "run_campaign",
    "run_compute_matched", "run_pair", "select_layers", "selection_count", "student_t_cdf", "train",
]
