"""Full referring-segmentation network: encoders, prompt modulation, fusion, decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn

from .capm import PromptBank, encode_with_prompts
from .config import ModelConfig
from .encoders import ImageEncoder, TextEncoder
from .lgfa import AggregationOutput, LanguageGuidedAggregation
from .mid import DecoderState, MutualInteractionDecoder
from .types import FeaturePyramid, TokenFeatures


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, H_1, W_1)
    logits_up: torch.Tensor  # (B, H, W)
    pyramid: FeaturePyramid
    text: TokenFeatures
    aggregation: AggregationOutput
    decoder: DecoderState


class ReferringSegmenter(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config)
        self.text_encoder = TextEncoder(config)
        self.prompts = PromptBank(config)
        self.aggregation = LanguageGuidedAggregation(config)
        self.decoder = MutualInteractionDecoder(config)

    def forward(self, images: torch.Tensor, tokens: Sequence[Sequence[int]]) -> ForwardOutput:
        pyramid = self.image_encoder(images)
        text = encode_with_prompts(tokens, pyramid, self.prompts, self.text_encoder)
        agg = self.aggregation(pyramid, text)
        logits, up, state = self.decoder(agg.fused, text)
        return ForwardOutput(logits, up, pyramid, text, agg, state)


def build_model(config: ModelConfig, dtype=torch.float32) -> ReferringSegmenter:
    """Construct a model whose initial parameters depend only on ``config.seed``."""
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(config.seed)
    try:
        model = ReferringSegmenter(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)
