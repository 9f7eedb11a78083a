"""Referring remote-sensing image segmentation at desk scale.

Prompt modulation with visual context, language-guided multi-scale feature
aggregation with attention-deficit compensation, and a mutual-interaction
decoder, plus the training objective, metrics and verification tooling.
"""

from .config import ModelConfig, RunConfig
from .model import ReferringSegmenter, build_model

__all__ = ["ModelConfig", "RunConfig", "ReferringSegmenter", "build_model"]
__version__ = "0.1.0"
