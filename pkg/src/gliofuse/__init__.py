"""Multimodal survival fusion: Cox objectives, fusion heads and evaluation tooling."""

__version__ = "0.1.0"

from .cohort import Cohort, SynthConfig, load_cohort, make_folds, synth_generate
from .harness import (BootstrapConfig, ExperimentSpec, bootstrap_ci, controlled_comparison,
                      paired_permutation_test, run_experiment)
from .late_fusion import cox_lasso_fit
from .survival import composite_score, concordance_index, cox_loss, integrated_brier

__all__ = [
    "BootstrapConfig", "Cohort", "ExperimentSpec", "SynthConfig", "bootstrap_ci",
    "composite_score", "concordance_index", "controlled_comparison", "cox_lasso_fit",
    "cox_loss", "integrated_brier", "load_cohort", "make_folds", "paired_permutation_test",
    "run_experiment", "synth_generate",
]
