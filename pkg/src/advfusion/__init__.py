"""Targeted adversarial examples from robust class features fused in latent space."""

__version__ = "0.1.0"

from .autoencoder import ConvAutoencoder, build_autoencoder, load_autoencoder
from .disentangle import (
    DisentangleSettings,
    NoiseSpec,
    RobustFeature,
    disentangle_robust_features,
    robustness_score,
)
from .ensemble import ClassifierOutput, ModelEnsemble
from .exceptions import (
    AdvFusionError,
    ConfigurationError,
    ConfigValidationError,
    MetricUnavailable,
    MissingArtifactError,
    RobustFeatureRejected,
    TrainingFailure,
    UnsupportedModelError,
)
from .fusion import (
    AttackResult,
    EotLoop,
    FusionWeights,
    optimize_fusion,
    spatial_attention,
)
from .gradcam import gradcam
from .models import ARCHITECTURES, build_model, load_model, save_model
from .physical import (
    SweepReport,
    ViewCondition,
    ViewDistribution,
    eot_batch,
    robustness_sweep,
    simulate_view,
)

__all__ = [
    "ARCHITECTURES",
    "AdvFusionError",
    "AttackResult",
    "ClassifierOutput",
    "ConfigValidationError",
    "ConfigurationError",
    "ConvAutoencoder",
    "DisentangleSettings",
    "EotLoop",
    "FusionWeights",
    "MetricUnavailable",
    "MissingArtifactError",
    "ModelEnsemble",
    "NoiseSpec",
    "RobustFeature",
    "RobustFeatureRejected",
    "SweepReport",
    "TrainingFailure",
    "UnsupportedModelError",
    "ViewCondition",
    "ViewDistribution",
    "build_autoencoder",
    "build_model",
    "disentangle_robust_features",
    "eot_batch",
    "gradcam",
    "load_autoencoder",
    "load_model",
    "optimize_fusion",
    "robustness_score",
    "robustness_sweep",
    "save_model",
    "simulate_view",
    "spatial_attention",
    "__version__",
]
