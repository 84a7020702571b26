"""Lifelong generative memory: per-task style modulation of a frozen base GAN."""

__version__ = "0.1.0"

from .modulation import (  # noqa: E402
    ConvLayer,
    FCLayer,
    Style,
    init_source_style,
    layer_stats,
    legacy_modulate,
    madafm_modulate,
    mfilm_modulate,
    modulate,
    normalize,
)
from .models import ArchConfig, BaseModel, build_models  # noqa: E402
from .registry import BlockMask, GroupMask, StyleSet, TaskRegistry, compose, interpolate  # noqa: E402
from .training import TrainHyper, generate, gan_losses, r1_penalty, train_task  # noqa: E402
from .compression import (  # noqa: E402
    EnergyPolicy,
    KnowledgeBase,
    energy_truncate,
    kb_update,
    reconstruct,
    sparsity_penalty,
    train_task_compressed,
)
from .evaluation import FIDEvaluator, forgetting_report, frechet_distance  # noqa: E402
