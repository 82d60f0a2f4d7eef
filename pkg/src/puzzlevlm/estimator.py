"""scikit-learn style facade over the full pipeline.

`PuzzleSolver.fit(X)` captions the instances with the scripted backend,
trains the key and value specialists on their answer-kind subsets, and keeps
both assemblies as fitted attributes; `predict(X)` routes each instance
through the zero-shot classifier to the matching specialist. X is a list of
PuzzleInstance; gold labels live inside the instances, so y is accepted only
for interface compatibility.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .captioning import CaptionCache, MockCaptioner, enhance
from .core import AnswerKind, PuzzleInstance
from .data import make_puzzle_split, split_instances
from .decoder import KEY_MODEL, VALUE_MODEL, DecoderConfig, build_assembly
from .qformer import QFormerConfig
from .router import route_and_answer
from .training import LoraConfig, TrainConfig, fit
from .vision import VisionConfig


def _check_instances(X) -> list[PuzzleInstance]:
    if not isinstance(X, (list, tuple)) or not X:
        raise ValueError("X must be a non-empty list of PuzzleInstance")
    for item in X:
        if not isinstance(item, PuzzleInstance):
            raise ValueError(f"X contains a non-PuzzleInstance item: {type(item)!r}")
    return list(X)


class PuzzleSolver(BaseEstimator):
    """Two-specialist puzzle solver with routed inference.

    Parameters mirror the config-file knobs; `image_size` is inferred from the
    training images when left at None.
    """

    def __init__(
        self,
        image_size: int | None = None,
        patch_size: int = 8,
        dim: int = 32,
        n_queries: int = 8,
        epochs: float = 8.0,
        base_lr: float = 1e-3,
        batch_size: int = 16,
        aux_classify_weight: float = 0.5,
        val_fraction: float = 0.2,
        k_probes: int = 3,
        use_lora: bool = False,
        seed: int = 0,
    ):
        self.image_size = image_size
        self.patch_size = patch_size
        self.dim = dim
        self.n_queries = n_queries
        self.epochs = epochs
        self.base_lr = base_lr
        self.batch_size = batch_size
        self.aux_classify_weight = aux_classify_weight
        self.val_fraction = val_fraction
        self.k_probes = k_probes
        self.use_lora = use_lora
        self.seed = seed

    def _caption_all(self, X: list[PuzzleInstance], cache: CaptionCache) -> dict[str, str]:
        backend = MockCaptioner()
        return {p.id: enhance(p, backend, cache, self.k_probes).caption for p in X}

    def fit(self, X, y=None) -> "PuzzleSolver":
        instances = _check_instances(X)
        image_size = self.image_size or instances[0].image.shape[0]
        vision_cfg = VisionConfig(image_size=image_size, patch_size=self.patch_size, dim=self.dim)
        qformer_cfg = QFormerConfig(n_queries=self.n_queries, dim_visual=self.dim)
        decoder_cfg = DecoderConfig()
        train_cfg = TrainConfig(
            base_lr=self.base_lr,
            batch_size=min(self.batch_size, len(instances)),
            epochs=self.epochs,
            seed=self.seed,
            aux_classify_weight=self.aux_classify_weight,
        )
        lora_cfg = LoraConfig(seed=self.seed) if self.use_lora else None

        with tempfile.TemporaryDirectory(prefix="puzzlesolver-") as workdir:
            cache = CaptionCache(Path(workdir) / "captions.jsonl")
            captions = self._caption_all(instances, cache)
            self.models_ = {}
            for role, kind in ((KEY_MODEL, AnswerKind.KEY), (VALUE_MODEL, AnswerKind.VALUE)):
                subset = [p for p in instances if p.answer_kind is kind]
                if not subset:
                    continue
                roots = {p.root_id for p in subset}
                if len(roots) >= 2 and 0 < self.val_fraction < 1:
                    spec = make_puzzle_split(subset, self.val_fraction, self.seed)
                    train_side, val_side = split_instances(subset, spec)
                else:
                    train_side, val_side = subset, []
                assembly = build_assembly(vision_cfg, qformer_cfg, decoder_cfg, role, self.seed)
                fit(
                    assembly,
                    train_side,
                    val_side,
                    captions,
                    train_cfg,
                    lora_cfg,
                    Path(workdir) / f"{role}.ckpt",
                )
                self.models_[role] = assembly
        if KEY_MODEL not in self.models_ or VALUE_MODEL not in self.models_:
            raise ValueError(
                "fit requires at least one key-kind and one value-kind instance"
            )
        self.captioner_ = MockCaptioner()
        self.n_train_ = len(instances)
        return self

    def _captions_for(self, X: list[PuzzleInstance]) -> dict[str, str]:
        with tempfile.TemporaryDirectory(prefix="puzzlesolver-") as workdir:
            cache = CaptionCache(Path(workdir) / "captions.jsonl")
            return {
                p.id: enhance(p, self.captioner_, cache, self.k_probes).caption for p in X
            }

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "models_")
        instances = _check_instances(X)
        captions = self._captions_for(instances)
        answers = [
            route_and_answer(
                self.models_[KEY_MODEL], self.models_[VALUE_MODEL], p, captions[p.id]
            )[1]
            for p in instances
        ]
        return np.asarray(answers, dtype=np.int64)

    def score(self, X, y=None) -> float:
        instances = _check_instances(X)
        predicted = self.predict(instances)
        gold = np.asarray([p.gold_option_index for p in instances])
        return float((predicted == gold).mean())
