from .adapter import register_adapter, registered_schemes, resolve_backend, unregister_adapter
from .base import AttentionController, AttentionSite, NoisePredictor
from .concept import (
    ConceptTrainerConfig,
    TrainingPlan,
    concept_eval_loss,
    finetune_adapter,
    load_concept,
    save_concept,
    train_concept_embedding,
)
from .gradcheck import GradientCheckReport, GradientProbe, gradient_check
from .toy import PAD_ID, ToyDenoiser, ToyModelSpec, ToyTokenizer

__all__ = [
    "AttentionController",
    "AttentionSite",
    "ConceptTrainerConfig",
    "GradientCheckReport",
    "GradientProbe",
    "NoisePredictor",
    "PAD_ID",
    "ToyDenoiser",
    "ToyModelSpec",
    "ToyTokenizer",
    "TrainingPlan",
    "concept_eval_loss",
    "finetune_adapter",
    "gradient_check",
    "load_concept",
    "register_adapter",
    "registered_schemes",
    "resolve_backend",
    "save_concept",
    "train_concept_embedding",
    "unregister_adapter",
]
