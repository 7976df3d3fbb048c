"""Generative interventions for causal learning, at colored-MNIST scale."""

from .causal import (
    CausalInterval,
    StrategyBoundInput,
    backdoor_adjust_discrete,
    compare_strategies,
    estimate_log_px_given_z,
    feature_extract,
    intervened_bound,
    linear_iv_estimate,
    natural_bound,
)
from .classify import (
    InterventionalClassifier,
    IRMClassifier,
    NuisanceRegressor,
    correlation_probe,
    evaluate,
    irm_train,
    train_classifier,
)
from .config import ExperimentConfig, parse_config
from .datagen import ColorPalette, LabeledImageSet, ScmDiscrete, ScmLinear, synth_colored_mnist
from .genmodel import CVAE, elbo_loss
from .intervene import InterventionStrategy, LatentBasis, LatentPCA, generate_interventional_set
from .pipeline import ablation_sweep, emit_metrics, run_pipeline

__version__ = "0.1.0"
