"""Continual learning with dual prompts on a frozen mini-ViT and a
utility-tracked re-initialization block, plus a class-incremental benchmark
harness."""

from .backbone import Backbone, BackboneConfig, FrozenStore
from .cbp import EfficientCBPBlock, UnitSnapshot
from .harness import (
    AccuracyMatrix,
    DatasetContainer,
    avg_accuracy,
    forgetting,
    generate_synthetic,
    load_container,
    save_container,
    split_class_incremental,
)
from .numeric import InitSpec, Rng, Tensor, gelu, grad_check, layer_norm, sample, softmax
from .prompt import EPromptPool, GPrompt, assemble, matching_loss, select_eprompt
from .trainer import (
    AdamState,
    ContinualModel,
    ExperimentConfig,
    VariantFlags,
    count_trainable,
    evaluate,
    plasticity_probe,
    run_sequence,
    train_task,
    vitb16_config,
)

__version__ = "0.1.0"
