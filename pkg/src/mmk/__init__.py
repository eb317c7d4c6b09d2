"""Multimodal masked motion generation kit."""

from .data import (
    Condition,
    CorpusRecord,
    Modality,
    MotionSequence,
    SynthSpec,
    load_corpus,
    rearrange_spatial,
    synth_corpus,
    write_corpus,
)
from .masking import AttentionScores, MaskPlan, plan_masks, scaled_attention, top_alpha_mask
from .tokenizer import Codebook, TokenGrid, TokenizerModel, decode, encode, quantize, train_tokenizer
from .generator import DecodeSchedule, GeneratorModel, generate, train_generator, train_step
from .rigging import RiggedCandidate, centroid, passes_stage1, select_optimal, weight_sum_deviation

__all__ = [
    "AttentionScores",
    "Codebook",
    "Condition",
    "CorpusRecord",
    "DecodeSchedule",
    "GeneratorModel",
    "MaskPlan",
    "Modality",
    "MotionSequence",
    "RiggedCandidate",
    "SynthSpec",
    "TokenGrid",
    "TokenizerModel",
    "centroid",
    "decode",
    "encode",
    "generate",
    "load_corpus",
    "passes_stage1",
    "plan_masks",
    "quantize",
    "rearrange_spatial",
    "scaled_attention",
    "select_optimal",
    "synth_corpus",
    "top_alpha_mask",
    "train_generator",
    "train_step",
    "train_tokenizer",
    "weight_sum_deviation",
    "write_corpus",
]
