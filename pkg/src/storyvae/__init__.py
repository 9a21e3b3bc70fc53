"""Prompt-conditioned story generation with a latent-variable transformer.

Everything is built on a small numpy tensor core with reverse-mode
autodiff: a byte-level BPE tokenizer, shared encoder/decoder stacks with
attention-average pooling and three latent injection routes, diagonal
Gaussian prior/posterior heads, cyclic KL annealing, nucleus sampling,
and perplexity/ROUGE evaluation.
"""

from . import autograd, corpus, evaluation, latent, sampling, training, transformer
from .autograd import ParameterSet, Tensor, backward, grad_check
from .corpus import PromptStoryPair, Vocabulary, build_example, fit_vocabulary, load_corpus, toy_corpus_path
from .latent import DiagonalGaussian, LatentCode, LatentSource, kl_divergence, reparameterize
from .model import LossBreakdown, StoryVAE
from .sampling import SamplerConfig, control_generate, filter_logits, generate
from .training import Trainer, TrainingSchedule, beta_at
from .transformer import ModelConfig

__all__ = [
    "ParameterSet", "Tensor", "backward", "grad_check",
    "PromptStoryPair", "Vocabulary", "build_example", "fit_vocabulary", "load_corpus", "toy_corpus_path",
    "DiagonalGaussian", "LatentCode", "LatentSource", "kl_divergence", "reparameterize",
    "LossBreakdown", "StoryVAE",
    "SamplerConfig", "control_generate", "filter_logits", "generate",
    "Trainer", "TrainingSchedule", "beta_at",
    "ModelConfig",
    "autograd", "corpus", "evaluation", "latent", "sampling", "training", "transformer",
]

__version__ = "0.1.0"
