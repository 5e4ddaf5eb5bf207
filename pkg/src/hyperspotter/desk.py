"""The laptop-sized recipe: synthetic tone-word corpus, CTC warm start, detector training.

A randomly initialised encoder gives the matched filters nothing phonetic to
match against, so the desk recipe first teaches the encoder to transcribe a
separate pseudo-word corpus (which never contains the held-out keywords),
freezes it, and then trains the hypernet and detector on the small keyword set.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import text
from .checkpoint import Checkpoint
from .config import DESK, DESK_TRAIN, ModelConfig, TrainConfig
from .dataset import ManifestEntry, make_vocabulary, seed_from, split_vocabulary, synth_corpus
from .encoder import pretrain_ctc
from .layers import Params
from .trainer import FeatureCache, Model, TrainResult, init_model, train


@dataclass
class DeskCorpus:
    train_words: list[str]
    held_words: list[str]
    train: list[ManifestEntry]
    held: list[ManifestEntry]
    test: list[ManifestEntry]  # fresh clips of the training keywords
    pretrain: list[ManifestEntry]


def pretrain_vocabulary(exclude, n_words: int = 60, seed: int = 0) -> list[str]:
    banned = set(exclude)
    return [w for w in make_vocabulary(n_words, seed_from("pretrain-vocab", seed)) if w not in banned]


def make_desk_corpus(out_dir, seed: int = 0, n_clips: int = 32, n_keywords: int = 8,
                     n_held: int = 4, held_clips: int = 64, test_clips: int = 64,
                     pretrain_clips: int = 200) -> DeskCorpus:
    out = Path(out_dir)
    words, held = split_vocabulary(n_keywords, n_held, seed)
    base = seed_from("desk", seed) % 2**31
    return DeskCorpus(
        words, held,
        train=synth_corpus(out, n_clips, words, seed=base, name="train.jsonl"),
        held=synth_corpus(out, held_clips, held, seed=base + 1, name="held.jsonl"),
        test=synth_corpus(out, test_clips, words, seed=base + 2, name="test.jsonl"),
        pretrain=synth_corpus(out, pretrain_clips, pretrain_vocabulary(held, seed=seed),
                              seed=base + 3, name="pretrain.jsonl"),
    )


def pretrain_encoder(entries, model_config: ModelConfig, features: FeatureCache, seed: int = 0,
                     steps: int = 400, lr: float = 3e-3, batch_size: int = 8) -> Params:
    """Full model parameters whose encoder part has been CTC-trained on ``entries``."""
    utterances = [(features(e), text.encode_chars(e.text)) for e in entries]
    res = pretrain_ctc(utterances, model_config.encoder, epochs=10**6, lr=lr,
                       batch_size=batch_size, seed=seed, max_steps=steps)
    params = init_model(model_config, seed)
    params.update(res.params)
    return params


@dataclass
class DeskRun:
    corpus: DeskCorpus
    result: TrainResult
    features: FeatureCache
    pretrain_s: float
    train_s: float

    @property
    def checkpoint(self) -> Checkpoint:
        return self.result.checkpoint

    @property
    def model(self) -> Model:
        return Model(self.checkpoint.model_config, self.checkpoint.params)


def run_desk(out_dir, seed: int = 0, model_config: ModelConfig = DESK,
             train_config: TrainConfig = DESK_TRAIN, corpus: Optional[DeskCorpus] = None,
             pretrain_steps: int = 400) -> DeskRun:
    corpus = corpus or make_desk_corpus(out_dir, seed)
    features = FeatureCache()
    t0 = time.perf_counter()
    params = pretrain_encoder(corpus.pretrain, model_config, features, seed, pretrain_steps)
    t1 = time.perf_counter()
    tc = train_config.model_copy(update={"seed": seed})
    result = train(corpus.train, [], model_config, tc, params=params, features=features)
    return DeskRun(corpus, result, features, t1 - t0, time.perf_counter() - t1)
