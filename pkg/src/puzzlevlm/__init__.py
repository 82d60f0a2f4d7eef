"""Caption-enhanced visio-linguistic puzzle solving with routed specialists.

Pipeline: synthetic (or ingested) five-option puzzles are captioned by a
two-stage VQA-then-caption mechanism, encoded by a dual-stream vision front
end (patch tokens + connected-component segment tokens), bridged to a small
causal decoder through learned query tokens, and answered by one of two
specialist models — option-key prediction or numeric value prediction —
selected by a zero-shot category classifier.
"""

from .captioning import (
    CaptionCache,
    CaptionRecord,
    CaptionerBackend,
    HttpCaptioner,
    MockCaptioner,
    enhance,
    generate_caption,
    generate_vqa_pairs,
)
from .core import (
    AnswerKind,
    N_OPTIONS,
    PuzzleInstance,
    SkillCategory,
    answer_kind_for_category,
    normalize_answer,
    select_option_by_value,
)
from .data import (
    ExternalRecord,
    filter_multiple_choice,
    is_multiple_choice,
    load_puzzles,
    make_puzzle_split,
    save_puzzles,
    split_instances,
)
from .decoder import (
    KEY_MODEL,
    VALUE_MODEL,
    DecoderConfig,
    ModelAssembly,
    answer_puzzle,
    build_assembly,
    build_prompt,
    decode_key,
    decode_value,
)
from .estimator import PuzzleSolver
from .evaluation import EvalRecord, EvalReport, eval_report, o_acc, wosa
from .qformer import QFormer, QFormerConfig, attention_core
from .router import RoutingDecision, classify_puzzle, route_and_answer, simulate_routing
from .synth import generate_synthetic_puzzles
from .training import LoraConfig, TrainConfig, fit, lora_wrap, mixed_sampler, train_step
from .vision import (
    RegionDescriptor,
    VisionConfig,
    VisionEncoder,
    VisualFeatureBundle,
    extract_regions,
    fuse,
)

__version__ = "0.1.0"

__all__ = [
    "AnswerKind",
    "CaptionCache",
    "CaptionRecord",
    "CaptionerBackend",
    "DecoderConfig",
    "EvalRecord",
    "EvalReport",
    "ExternalRecord",
    "HttpCaptioner",
    "KEY_MODEL",
    "LoraConfig",
    "MockCaptioner",
    "ModelAssembly",
    "N_OPTIONS",
    "PuzzleInstance",
    "PuzzleSolver",
    "QFormer",
    "QFormerConfig",
    "RegionDescriptor",
    "RoutingDecision",
    "SkillCategory",
    "TrainConfig",
    "VALUE_MODEL",
    "VisionConfig",
    "VisionEncoder",
    "VisualFeatureBundle",
    "answer_kind_for_category",
    "answer_puzzle",
    "attention_core",
    "build_assembly",
    "build_prompt",
    "classify_puzzle",
    "decode_key",
    "decode_value",
    "enhance",
    "eval_report",
    "extract_regions",
    "filter_multiple_choice",
    "fit",
    "fuse",
    "generate_caption",
    "generate_synthetic_puzzles",
    "generate_vqa_pairs",
    "is_multiple_choice",
    "load_puzzles",
    "lora_wrap",
    "make_puzzle_split",
    "mixed_sampler",
    "normalize_answer",
    "o_acc",
    "route_and_answer",
    "save_puzzles",
    "select_option_by_value",
    "simulate_routing",
    "split_instances",
    "train_step",
    "wosa",
]
