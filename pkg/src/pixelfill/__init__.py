"""Dilated-convolution image inpainting and extrapolation engine.

A self-contained numpy implementation: explicit forward and backward
kernels, an adversarially trained encoder/decoder generator with a
dilated middle section, deterministic training, and tools to audit the
architecture's receptive fields and parameter counts.
"""

from .errors import DataError, NumericError, UsageError
from .model import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    composite,
    count_parameters,
    discriminator_forward,
    generator_forward,
    receptive_field,
)
from .trainer import (
    TrainConfig,
    create_trainer,
    evaluate,
    load_trainer,
    train_loop,
    train_step,
)

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "NumericError",
    "UsageError",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "build_discriminator",
    "build_generator",
    "composite",
    "count_parameters",
    "discriminator_forward",
    "generator_forward",
    "receptive_field",
    "TrainConfig",
    "create_trainer",
    "evaluate",
    "load_trainer",
    "train_loop",
    "train_step",
    "__version__",
]
