"""Toy causal answer decoder and the full model assembly.

The decoder is a small pre-norm causal transformer over a character-level
vocabulary with reserved special tokens: five option keys (OPT_A..OPT_E) read
as a 5-way head, eight category tokens (CAT_0..CAT_7) read by the zero-shot
router, and BOS/EOS/PAD. It consumes the bridge's projected query states as a
soft prefix followed by the tokenized prompt.

Prompt serialization (fixed; documented in the README):
  key role:   "caption: <caption>\n" (omitted when empty)
              "question: <question>\n"
              "options: A) <o1> B) <o2> C) <o3> D) <o4> E) <o5>\n"
              "answer: "
  value role: caption and question blocks as above, then
              "respond with a number.\nanswer: "
The option index is read from the OPT_* logits at the last prompt position;
value answers are decoded greedily over the digit/minus/dot/EOS sub-vocabulary.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .core import N_OPTIONS, PuzzleInstance, SkillCategory, select_option_by_value
from .qformer import FeedForward, MultiHeadAttention, QFormer, QFormerConfig
from .vision import VisionConfig, VisionEncoder

KEY_MODEL = "key_model"
VALUE_MODEL = "value_model"
ROLES = (KEY_MODEL, VALUE_MODEL)


class CharTokenizer:
    """Fixed character vocabulary plus reserved special tokens."""

    PAD = 0
    BOS = 1
    EOS = 2
    OPT = (3, 4, 5, 6, 7)
    CAT = tuple(range(8, 16))
    UNK = 16
    _N_SPECIAL = 17

    _CHARS = string.digits + string.ascii_letters + string.punctuation + " \n"

    def __init__(self) -> None:
        self._char_to_id = {
            ch: self._N_SPECIAL + i for i, ch in enumerate(self._CHARS)
        }
        self._id_to_char = {i: ch for ch, i in self._char_to_id.items()}
        self.vocab_size = self._N_SPECIAL + len(self._CHARS)
        self.value_token_ids = tuple(
            self._char_to_id[ch] for ch in "0123456789-."
        ) + (self.EOS,)

    def encode(self, text: str) -> list[int]:
        return [self._char_to_id.get(ch, self.UNK) for ch in text]

    def decode_chars(self, ids: list[int]) -> str:
        return "".join(self._id_to_char.get(i, "") for i in ids)

    def char_id(self, ch: str) -> int:
        return self._char_to_id[ch]


TOKENIZER = CharTokenizer()


@dataclass
class DecoderConfig:
    vocab_size: int = TOKENIZER.vocab_size
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 640
    ffn_hidden: int = 64

    def __post_init__(self) -> None:
        if self.dim % self.n_heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < CharTokenizer._N_SPECIAL:
            raise ValueError("vocab_size smaller than the reserved special tokens")


class DecoderLayer(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.dim)
        self.attn = MultiHeadAttention(cfg.dim, cfg.dim, cfg.n_heads)
        self.norm_ffn = nn.LayerNorm(cfg.dim)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_hidden)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_attn(x)
        x = x + self.attn(h, h, causal=True)
        return x + self.ffn(self.norm_ffn(x))


class Decoder(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        self.token_embedding = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.pos = nn.Parameter(torch.randn(cfg.max_len, cfg.dim) * 0.02)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.n_layers))
        self.norm_final = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, cfg.vocab_size)

    def forward(self, prefix: torch.Tensor | None, token_ids: list[int]) -> torch.Tensor:
        """Logits (sequence_length, vocab) over prefix rows then token rows."""
        parts = []
        if prefix is not None and prefix.shape[0]:
            parts.append(prefix)
        if token_ids:
            parts.append(self.token_embedding(torch.tensor(token_ids, dtype=torch.long)))
        if not parts:
            raise ValueError("decoder needs at least one input position")
        x = torch.cat(parts, dim=0)
        if x.shape[0] > self.cfg.max_len:
            raise ValueError(f"sequence length {x.shape[0]} exceeds max_len {self.cfg.max_len}")
        x = x + self.pos[: x.shape[0]]
        for layer in self.layers:
            x = layer(x)
        return self.head(self.norm_final(x))


def build_prompt(
    question: str, caption: str, options: list[str], role: str
) -> list[int]:
    """Deterministic prompt token sequence; see the module docstring."""
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    text = ""
    if caption:
        text += f"caption: {caption}\n"
    text += f"question: {question}\n"
    if role == KEY_MODEL:
        letters = "ABCDE"
        enumerated = " ".join(f"{letters[i]}) {opt}" for i, opt in enumerate(options))
        text += f"options: {enumerated}\nanswer: "
    else:
        text += "respond with a number.\nanswer: "
    return [TOKENIZER.BOS] + TOKENIZER.encode(text)


class ModelAssembly(nn.Module):
    """Vision encoder + bridge + decoder under one fixed role."""

    def __init__(
        self,
        vision_cfg: VisionConfig,
        qformer_cfg: QFormerConfig,
        decoder_cfg: DecoderConfig,
        role: str,
    ):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        if qformer_cfg.dim_visual != vision_cfg.dim:
            raise ValueError("qformer dim_visual must equal vision dim")
        if qformer_cfg.dim_out != decoder_cfg.dim:
            raise ValueError("qformer dim_out must equal decoder dim")
        self.vision = VisionEncoder(vision_cfg)
        self.qformer = QFormer(qformer_cfg, decoder_cfg.vocab_size)
        self.decoder = Decoder(decoder_cfg)
        self.role = role

    def prompt_logits(self, image: np.ndarray, instruction_text: str, prompt_ids: list[int]) -> torch.Tensor:
        """Full-sequence logits for a prompt; rows cover the N_q query prefix
        positions followed by the prompt token positions."""
        bundle = self.vision(image)
        instruction = self.qformer.embed_instruction(TOKENIZER.encode(instruction_text))
        prefix = self.qformer(bundle.fused_tokens, instruction)
        return self.decoder(prefix, prompt_ids)

    def option_logits(self, puzzle: PuzzleInstance, caption: str) -> torch.Tensor:
        """The five OPT_* logits at the first generation position."""
        prompt = build_prompt(puzzle.question, caption, puzzle.options, self.role)
        logits = self.prompt_logits(puzzle.image, puzzle.question, prompt)
        return logits[-1, list(TOKENIZER.OPT)]

    def category_logits(self, puzzle: PuzzleInstance, caption: str, prompt_text: str) -> torch.Tensor:
        """The eight CAT_* logits at the first generation position of a
        classification prompt."""
        prompt = [TOKENIZER.BOS] + TOKENIZER.encode(prompt_text)
        logits = self.prompt_logits(puzzle.image, puzzle.question, prompt)
        return logits[-1, list(TOKENIZER.CAT)]


def _first_argmax(values: torch.Tensor) -> int:
    best = 0
    for i in range(1, values.shape[0]):
        if values[i] > values[best]:
            best = i
    return best


def decode_key(
    assembly: ModelAssembly, puzzle: PuzzleInstance, caption: str
) -> tuple[int, torch.Tensor]:
    """Option index (ties -> lowest) and the 5-way softmax distribution."""
    if assembly.role != KEY_MODEL:
        raise ValueError(f"decode_key requires a {KEY_MODEL} assembly")
    logits = assembly.option_logits(puzzle, caption)
    distribution = torch.softmax(logits, dim=0)
    return _first_argmax(logits), distribution


def decode_value(
    assembly: ModelAssembly, puzzle: PuzzleInstance, caption: str, max_len: int = 8
) -> str:
    """Greedy decoding restricted to digits, minus, dot, and EOS."""
    if assembly.role != VALUE_MODEL:
        raise ValueError(f"decode_value requires a {VALUE_MODEL} assembly")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    prompt = build_prompt(puzzle.question, caption, puzzle.options, assembly.role)
    allowed = list(TOKENIZER.value_token_ids)
    generated: list[int] = []
    with torch.no_grad():
        bundle = assembly.vision(puzzle.image)
        instruction = assembly.qformer.embed_instruction(TOKENIZER.encode(puzzle.question))
        prefix = assembly.qformer(bundle.fused_tokens, instruction)
        for _ in range(max_len):
            logits = assembly.decoder(prefix, prompt + generated)
            sub = logits[-1, allowed]
            token = allowed[_first_argmax(sub)]
            if token == TOKENIZER.EOS:
                break
            generated.append(token)
    return TOKENIZER.decode_chars(generated)


def answer_puzzle(assembly: ModelAssembly, puzzle: PuzzleInstance, caption: str) -> int:
    """Option index via the role's decoding path; always valid."""
    if assembly.role == KEY_MODEL:
        return decode_key(assembly, puzzle, caption)[0]
    value = decode_value(assembly, puzzle, caption)
    return select_option_by_value(value, puzzle.options)


def build_assembly(
    vision_cfg: VisionConfig,
    qformer_cfg: QFormerConfig,
    decoder_cfg: DecoderConfig,
    role: str,
    seed: int,
) -> ModelAssembly:
    """Deterministically initialized assembly (seeded torch RNG)."""
    torch.manual_seed(seed)
    return ModelAssembly(vision_cfg, qformer_cfg, decoder_cfg, role)


CATEGORY_TOKEN_ORDER = tuple(SkillCategory)

assert len(CATEGORY_TOKEN_ORDER) == len(TOKENIZER.CAT)
assert N_OPTIONS == len(TOKENIZER.OPT)
