"""Attribute-grounded few-shot adaptation of CLIP-style dual encoders.

The package couples a small reverse-mode autodiff engine with toy text and
vision transformers, contextual attribute prompting, anchored prototype
learning, and a synthetic benchmark whose generative factors match the
prompt vocabulary.
"""

from .autodiff import Tensor, Parameter, backward, grad_check
from .bench import ScenarioConfig, generate_scenario
from .config import ExperimentConfig, load_config, parse_config
from .harness import (
    MAIN_METHOD,
    run_adaptation,
    run_ablation,
    run_pretraining,
    run_single,
    sweep_data_fraction,
)
from .metrics import compute_metrics, paired_ttest
from .prompts import DiseaseDescriptor, build_prompt
from .prototypes import LossWeights, total_loss

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Parameter", "backward", "grad_check",
    "ScenarioConfig", "generate_scenario",
    "ExperimentConfig", "load_config", "parse_config",
    "MAIN_METHOD", "run_adaptation", "run_ablation", "run_pretraining",
    "run_single", "sweep_data_fraction",
    "compute_metrics", "paired_ttest",
    "DiseaseDescriptor", "build_prompt",
    "LossWeights", "total_loss",
    "__version__",
]
