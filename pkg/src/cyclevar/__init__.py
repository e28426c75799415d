"""Unpaired image-to-image translation with a next-scale autoregressive
transformer, softmax-relaxed quantization and cycle/adversarial training."""

from .autograd import GradReport, ShapeError, grad_check
from .config import ConfigError, RunConfig, load_config
from .generation import GenerationConfig, Translator
from .quantizer import Codebook, SRQConfig, srq_quantize
from .tokenizer import ScaleSchedule, Tokenizer
from .training import LossWeights, OptimConfig, TranslatorBundle
from .transformer import NextScaleTransformer

__version__ = "0.1.0"

__all__ = [
    "Codebook",
    "ConfigError",
    "GenerationConfig",
    "GradReport",
    "LossWeights",
    "NextScaleTransformer",
    "OptimConfig",
    "RunConfig",
    "SRQConfig",
    "ScaleSchedule",
    "ShapeError",
    "Tokenizer",
    "Translator",
    "TranslatorBundle",
    "grad_check",
    "load_config",
    "srq_quantize",
]
