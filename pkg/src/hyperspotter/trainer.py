"""End-to-end BCE training of the keyword hypernet and detector, optionally the encoder too."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import metrics
from . import numerics as nx
from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig
from .dataset import (
    MAX_SPAN_WORDS,
    Batch,
    ExamplePair,
    ManifestEntry,
    iter_batches,
    keyword_span,
    load_entry_audio,
    seed_from,
)
from .detector import DetectionOutput, detect, init_detector
from .encoder import EncodedSpeech, encode, init_encoder
from .frontend import SAMPLE_RATE, WIN, AudioClip, MelSpectrogram, load_noise, log_mel, mix_noise
from .hypernet import init_hypernet, weights_tensor
from .layers import Params
from .numerics import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class DivergenceError(ArithmeticError):
    """Training loss became NaN or infinite."""


def bce_loss(probs: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise nx.ShapeError(f"probs {probs.shape} and labels {y.shape} differ")
    p = nx.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    one = np.ones_like(y)
    ll = nx.log(p) * y + nx.log(1.0 - p) * (one - y)
    return -(ll.mean())


def init_model(config: ModelConfig, seed: int = 0) -> Params:
    rng = np.random.default_rng(seed)
    params = init_encoder(config.encoder, rng)
    params.update(init_hypernet(config.hypernet, rng))
    params.update(init_detector(config.detector, config.encoder.model_dim, rng))
    return params



def noise_transform(kind: str, snr_db: float, seed: int = 0):
    """A :class:`FeatureCache` transform mixing ``kind`` noise at ``snr_db``.

    Each clip draws its noise from a seed derived from ``seed`` and the clip id,
    so a clip sees the same noise whatever else is being evaluated.
    """
    def transform(clip: AudioClip, entry: ManifestEntry) -> AudioClip:
        clip_seed = seed_from("noise", seed, entry.seed_key)
        noise = load_noise(kind, clip.duration, clip_seed)
        return mix_noise(clip, noise, snr_db, np.random.default_rng(clip_seed))
    return transform

def group(params: Params, prefix: str) -> Params:
    return {k: v for k, v in params.items() if k.startswith(prefix + ".")}


class FeatureCache:
    """Log-mel features per manifest entry, computed once.

    ``transform`` may rewrite the audio first (e.g. noise mixing for the
    robustness harness); it receives the clip and the entry.
    """

    def __init__(self, transform: Optional[Callable[[AudioClip, ManifestEntry], AudioClip]] = None):
        self.transform = transform
        self._mels: dict[str, MelSpectrogram] = {}

    def __call__(self, entry: ManifestEntry) -> MelSpectrogram:
        mel = self._mels.get(entry.id)
        if mel is None:
            clip = load_entry_audio(entry)
            if self.transform is not None:
                clip = self.transform(clip, entry)
            mel = log_mel(clip)
            self._mels[entry.id] = mel
        return mel


@dataclass
class Model:
    config: ModelConfig
    params: Params

    def encode(self, mel: MelSpectrogram, rng=None) -> EncodedSpeech:
        return encode(mel, self.config.encoder, self.params, rng)


def forward_pairs(pairs: Sequence[ExamplePair], model: Model, features: FeatureCache,
                  rng: Optional[np.random.Generator] = None,
                  encoded: Optional[dict[str, EncodedSpeech]] = None,
                  ) -> tuple[Tensor, list[DetectionOutput]]:
    """Logits (E,) for a list of pairs; each distinct clip is encoded once.

    ``encoded`` is a persistent cache of encoder outputs, only valid while
    the encoder is frozen.
    """
    cfg = model.config
    filters = weights_tensor([p.keyword for p in pairs], model.params, cfg.hypernet)
    local: dict[str, EncodedSpeech] = {}
    outs = []
    for i, pair in enumerate(pairs):
        key = pair.clip_id
        z = local.get(key)
        if z is None and encoded is not None:
            z = encoded.get(key)
        if z is None:
            if encoded is not None:
                with nx.no_grad():
                    z = model.encode(features(pair.entry))
                encoded[key] = z
            else:
                z = model.encode(features(pair.entry), rng)
            local[key] = z
        outs.append(detect(z, filters[i], model.params, cfg.detector))
    return nx.stack([o.logit for o in outs]), outs


def batch_loss(batch: Batch, model: Model, features: FeatureCache, rng=None,
               encoded=None) -> tuple[Tensor, Tensor]:
    logits, _ = forward_pairs(batch.pairs, model, features, rng, encoded)
    probs = nx.sigmoid(logits)
    return bce_loss(probs, batch.labels), probs


def score_pairs(pairs: Sequence[ExamplePair], model: Model, features: FeatureCache,
                encoded: Optional[dict[str, EncodedSpeech]] = None, chunk: int = 32) -> np.ndarray:
    scores = []
    with nx.no_grad():
        for start in range(0, len(pairs), chunk):
            logits, _ = forward_pairs(pairs[start:start + chunk], model, features, None,
                                      encoded if encoded is not None else {})
            scores.append(1.0 / (1.0 + np.exp(-logits.data.astype(np.float64))))
    return np.concatenate(scores) if scores else np.zeros(0)


def validation_loss(batches: Sequence[Batch], model: Model, features: FeatureCache,
                    encoded=None) -> float:
    if not batches:
        return float("nan")
    enc = encoded if encoded is not None else {}
    with nx.no_grad():
        losses = [float(batch_loss(b, model, features, None, enc)[0].data) for b in batches]
    return float(np.mean(losses))


@dataclass
class TrainRecord:
    epoch: int
    train_loss: float
    val_loss: float
    elapsed_s: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[TrainRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    hypernet_grad_norms: list[float] = field(default_factory=list)
    best_epoch: int = 0
    steps: int = 0


def write_log(path, history: Sequence[TrainRecord], timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "elapsed_s"])
        for r in history:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                             f"{r.elapsed_s:.3f}" if timing else ""])


def _snapshot(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def train(train_entries: Sequence[ManifestEntry], val_entries: Sequence[ManifestEntry],
          model_config: ModelConfig, train_config: TrainConfig,
          params: Optional[Params] = None, features: Optional[FeatureCache] = None,
          on_epoch: Optional[Callable[[TrainRecord], None]] = None,
          epochs: Optional[int] = None) -> TrainResult:
    """Train hypernet + detector (and the encoder unless frozen) with Adam on BCE.

    Validation loss on deterministic eval batches drives early stopping; the
    returned checkpoint holds the best-validation parameters. ``epochs``
    overrides ``max_epochs`` (used by fine-tuning).
    """
    if len(train_entries) < 2:
        raise ValueError("training needs at least two manifest entries")
    tc = train_config
    rng = np.random.default_rng(tc.seed)
    if params is None:
        params = init_model(model_config, tc.seed)
    model = Model(model_config, params)
    features = features or FeatureCache()
    trainable = {k: v for k, v in params.items()
                 if not (tc.freeze_encoder and k.startswith("encoder."))}
    opt = nx.Adam(trainable, lr=tc.lr)
    frozen_cache: Optional[dict[str, EncodedSpeech]] = {} if tc.freeze_encoder else None
    val_batches = iter_batches(val_entries, tc.batch_size, "eval",
                                max_words=tc.max_span_words) if val_entries else []
    if tc.val_batches is not None:
        val_batches = val_batches[:tc.val_batches]
    hyper_keys = [k for k in trainable if k.startswith("hypernet.")]

    result = TrainResult(Checkpoint(_snapshot(params), model_config))
    best = float("inf")
    t0 = time.perf_counter()
    step = 0
    for epoch in range(1, (epochs or tc.max_epochs) + 1):
        epoch_losses = []
        for batch in iter_batches(train_entries, tc.batch_size, "train", rng,
                                  tc.max_span_words):
            opt.zero_grad()
            drop_rng = None if tc.freeze_encoder else rng
            loss, _ = batch_loss(batch, model, features, drop_rng, frozen_cache)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"loss became {value} at epoch {epoch}, step {step + 1}")
            loss.backward()
            result.hypernet_grad_norms.append(float(np.sqrt(sum(
                float(np.sum(np.square(trainable[k].grad))) for k in hyper_keys
                if trainable[k].grad is not None))))
            opt.step()
            step += 1
            epoch_losses.append(value)
            result.step_losses.append(value)
            if tc.max_steps is not None and step >= tc.max_steps:
                break
        val = validation_loss(val_batches, model, features, frozen_cache) if val_batches \
            else float(np.mean(epoch_losses))
        rec = TrainRecord(epoch, float(np.mean(epoch_losses)), val, time.perf_counter() - t0)
        result.history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        log.info("epoch %d train %.4f val %.4f", epoch, rec.train_loss, rec.val_loss)
        if val < best:
            best = val
            result.best_epoch = epoch
            result.checkpoint = Checkpoint(_snapshot(params), model_config, epoch, val,
                                           _copy_adam(opt.state))
        if tc.max_steps is not None and step >= tc.max_steps:
            break
        if epoch - result.best_epoch >= tc.patience:
            log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
            break
    result.steps = step
    return result


def _copy_adam(state: nx.AdamState) -> nx.AdamState:
    return nx.AdamState(state.lr, state.beta1, state.beta2, state.eps, state.step,
                        {k: v.copy() for k, v in state.m.items()},
                        {k: v.copy() for k, v in state.v.items()})


def finetune(ckpt: Checkpoint, entries: Sequence[ManifestEntry], train_config: TrainConfig,
             val_entries: Sequence[ManifestEntry] = ()) -> TrainResult:
    """One extra epoch on a second manifest, starting from ``ckpt`` with a fresh Adam state."""
    return train(entries, val_entries, ckpt.model_config, train_config,
                 params=_snapshot(ckpt.params), epochs=1)


# -- evaluation ---------------------------------------------------------------------------------

@dataclass
class Evaluation:
    pairs: list[ExamplePair]
    scores: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.pairs])

    def subsets(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """``all`` plus one subset per negative strategy (all positives + those negatives)."""
        labels = self.labels
        prov = np.array([p.provenance for p in self.pairs])
        out = {"all": (self.scores, labels)}
        for strategy in sorted(set(prov[labels == 0])):
            keep = (labels == 1) | (prov == strategy)
            out[strategy] = (self.scores[keep], labels[keep])
        return out

    def report(self, threshold: float = 0.5) -> dict[str, dict[str, float]]:
        return {name: metrics.report(s, y, threshold) for name, (s, y) in self.subsets().items()
                if 0 < y.sum() < len(y)}


def evaluate_entries(entries: Sequence[ManifestEntry], model: Model, features: FeatureCache,
                     batch_size: int = 16, max_words: int = MAX_SPAN_WORDS) -> Evaluation:
    pairs = [p for b in iter_batches(entries, batch_size, "eval", max_words=max_words)
             for p in b.pairs]
    return Evaluation(pairs, score_pairs(pairs, model, features))


def attention_peak_time(out: DetectionOutput, frame_period_s: float, layer: int = -1) -> float:
    """Time (seconds) of the frame receiving the most cross-attention, summed over latents.

    Encoder frame b is centred on mel frame ``b * factor`` (the strided convs
    are padded symmetrically), whose window centre sits half a window in.
    """
    frame = int(np.argmax(out.cross_attention[layer].sum(axis=0)))
    return frame * frame_period_s + 0.5 * WIN / SAMPLE_RATE


def localization_rate(pairs: Sequence[ExamplePair], model: Model, features: FeatureCache) -> float:
    """Fraction of positive pairs whose final-layer attention peak falls in the keyword span."""
    period = model.config.encoder.frame_period_ms / 1000.0
    hits = total = 0
    with nx.no_grad():
        for pair in pairs:
            span = keyword_span(pair.entry, pair.keyword) if pair.label == 1 else None
            if span is None:
                continue
            _, outs = forward_pairs([pair], model, features)
            t = attention_peak_time(outs[0], period)
            hits += span[0] <= t <= span[1]
            total += 1
    if total == 0:
        raise ValueError("no positive pairs with known keyword spans")
    return hits / total
