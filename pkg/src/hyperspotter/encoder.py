"""Speech encoder: Conformer-lite over log-mel frames, plus CTC loss for pretraining.

Any callable producing an :class:`EncodedSpeech` can stand in for the
Conformer; :func:`load_features` imports externally computed encoder outputs
(e.g. from a Whisper encoder) in the ``HSFEAT01`` layout.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .config import EncoderConfig
from .frontend import MelSpectrogram
from .layers import (
    Params,
    attention,
    feed_forward,
    init_attention,
    init_ff,
    init_linear,
    init_norm,
    linear,
    norm,
    param,
    sinusoidal_positions,
)
from .numerics import Tensor
from .text import BLANK, CHARSET

log = logging.getLogger(__name__)

FEAT_MAGIC = b"HSFEAT01"
PREFIX = "encoder"


@dataclass
class EncodedSpeech:
    vectors: Tensor  # B x M
    frame_period_ms: float = 40.0
    attention: list[np.ndarray] = field(default_factory=list)

    @property
    def length(self) -> int:
        return self.vectors.shape[0]


def output_length(n_frames: int, subsample_factor: int = 4) -> int:
    """Each stride-2 conv (kernel 3, padding 1) maps T to ceil(T / 2)."""
    for _ in range(int(math.log2(subsample_factor))):
        n_frames = (n_frames + 1) // 2
    return n_frames


def init_encoder(config: EncoderConfig, rng: np.random.Generator) -> Params:
    M = config.model_dim
    p: Params = {}
    cin = config.n_mels
    for i in range(int(math.log2(config.subsample_factor))):
        p[f"{PREFIX}.sub.{i}.w"] = param(rng.standard_normal((3, cin, M)) / np.sqrt(3 * cin))
        p[f"{PREFIX}.sub.{i}.b"] = param(np.zeros(M))
        cin = M
    init_linear(p, f"{PREFIX}.in_proj", M, M, rng)
    for layer in range(config.n_layers):
        pre = f"{PREFIX}.layers.{layer}"
        for ff in ("ff1", "ff2"):
            init_norm(p, f"{pre}.{ff}.norm", M)
            init_ff(p, f"{pre}.{ff}", M, config.ff_expansion, rng)
        init_norm(p, f"{pre}.attn.norm", M)
        init_attention(p, f"{pre}.attn", M, M, config.n_heads, M // config.n_heads, rng)
        init_norm(p, f"{pre}.conv.norm", M)
        init_linear(p, f"{pre}.conv.pw1", M, 2 * M, rng)
        p[f"{pre}.conv.dw.w"] = param(rng.standard_normal((M, config.conv_kernel)) / np.sqrt(config.conv_kernel))
        p[f"{pre}.conv.dw.b"] = param(np.zeros(M))
        init_norm(p, f"{pre}.conv.dwnorm", M)
        init_linear(p, f"{pre}.conv.pw2", M, M, rng)
        init_norm(p, f"{pre}.out_norm", M)
    return p


def normalize_features(frames: np.ndarray) -> np.ndarray:
    """Per-utterance mean/variance normalisation of each mel channel."""
    mu = frames.mean(axis=0, keepdims=True)
    sd = frames.std(axis=0, keepdims=True)
    return (frames - mu) / (sd + 1e-5)


def _conformer_block(p: Params, pre: str, x: Tensor, config: EncoderConfig,
                     rng: Optional[np.random.Generator]) -> tuple[Tensor, np.ndarray]:
    M, drop = config.model_dim, config.dropout
    x = x + 0.5 * feed_forward(p, f"{pre}.ff1", norm(p, f"{pre}.ff1.norm", x), nx.swish, drop, rng)
    h = norm(p, f"{pre}.attn.norm", x)
    a, weights = attention(p, f"{pre}.attn", h, h, config.n_heads, M // config.n_heads)
    x = x + nx.dropout(a, drop, rng)
    h = linear(p, f"{pre}.conv.pw1", norm(p, f"{pre}.conv.norm", x))
    h = h[:, :M] * nx.sigmoid(h[:, M:])
    h = nx.depthwise_conv1d(h.T, p[f"{pre}.conv.dw.w"]).T + p[f"{pre}.conv.dw.b"]
    h = nx.swish(norm(p, f"{pre}.conv.dwnorm", h))
    x = x + nx.dropout(linear(p, f"{pre}.conv.pw2", h), drop, rng)
    x = x + 0.5 * feed_forward(p, f"{pre}.ff2", norm(p, f"{pre}.ff2.norm", x), nx.swish, drop, rng)
    return norm(p, f"{pre}.out_norm", x), weights


def encode(mel: MelSpectrogram, config: EncoderConfig, params: Params,
           rng: Optional[np.random.Generator] = None) -> EncodedSpeech:
    """Mel frames (T x 80) -> encoded sequence (ceil(T / factor) x M).

    ``rng`` enables dropout (training); leave it None for inference.
    """
    if mel.frames.shape[1] != config.n_mels:
        raise nx.ShapeError(f"expected {config.n_mels} mel channels, got {mel.frames.shape[1]}")
    dtype = params[f"{PREFIX}.in_proj.w"].dtype
    x = Tensor(normalize_features(mel.frames).astype(dtype))
    n_sub = int(math.log2(config.subsample_factor))
    for i in range(n_sub):
        key = f"{PREFIX}.sub.{i}.w"
        if key not in params:
            raise KeyError(f"encoder params missing {key}; config/params mismatch")
        x = nx.relu(nx.conv1d(x, params[key], params[f"{PREFIX}.sub.{i}.b"], stride=2, padding=(1, 1)))
    x = linear(params, f"{PREFIX}.in_proj", x)
    x = x + Tensor(sinusoidal_positions(x.shape[0], config.model_dim, dtype))
    x = nx.dropout(x, config.dropout, rng)
    maps = []
    for layer in range(config.n_layers):
        x, w = _conformer_block(params, f"{PREFIX}.layers.{layer}", x, config, rng)
        maps.append(w)
    return EncodedSpeech(x, config.frame_period_ms, maps)


# -- external features ----------------------------------------------------------------

def save_features(path, vectors: np.ndarray) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    B, M = vectors.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", B, M) + vectors.tobytes())


def load_features(path, frame_period_ms: float = 20.0) -> EncodedSpeech:
    """Read a raw B x M float32 matrix preceded by a 16-byte ``HSFEAT01`` header."""
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:8] != FEAT_MAGIC:
        raise ValueError(f"{path}: missing HSFEAT01 header")
    B, M = struct.unpack("<II", blob[8:16])
    body = blob[16:]
    if len(body) != 4 * B * M:
        raise ValueError(f"{path}: expected {B}x{M} float32 payload, got {len(body)} bytes")
    data = np.frombuffer(body, dtype="<f4").reshape(B, M).astype(np.float32)
    return EncodedSpeech(Tensor(data), frame_period_ms)


# -- CTC ------------------------------------------------------------------------------

def _extended(label: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(label) + 1, blank, dtype=np.int64)
    ext[1::2] = label
    return ext


def ctc_alpha(lp: np.ndarray, label: Sequence[int], blank: int) -> tuple[np.ndarray, float]:
    """Forward recursion in log space. Returns (alpha [T x S], log P(label))."""
    ext = _extended(label, blank)
    T, S = lp.shape[0], len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    alpha = np.full((T, S), -np.inf)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[1:] = np.logaddexp(acc[1:], prev[:-1])
        acc[2:] = np.where(skip[2:], np.logaddexp(acc[2:], prev[:-2]), acc[2:])
        alpha[t] = acc + lp[t, ext]
    total = alpha[-1, -1] if S == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, float(total)


def ctc_beta(lp: np.ndarray, label: Sequence[int], blank: int) -> np.ndarray:
    ext = _extended(label, blank)
    T, S = lp.shape[0], len(ext)
    skip = np.zeros(S, dtype=bool)
    skip[:-2] = (ext[:-2] != blank) & (ext[:-2] != ext[2:])
    beta = np.full((T, S), -np.inf)
    beta[-1, -1] = lp[-1, ext[-1]]
    if S > 1:
        beta[-1, -2] = lp[-1, ext[-2]]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        acc = nxt.copy()
        acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
        acc[:-2] = np.where(skip[:-2], np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
        beta[t] = acc + lp[t, ext]
    return beta


def ctc_loss(log_probs: Tensor, label: Sequence[int], blank: Optional[int] = None) -> Tensor:
    """Negative log-likelihood of ``label`` under CTC; +inf if no alignment fits.

    ``log_probs`` is frames x (V + 1), log-softmax normalised, blank last by
    default. The gradient of an infeasible label is zero.
    """
    lp = log_probs.data.astype(np.float64)
    V1 = lp.shape[1]
    blank = V1 - 1 if blank is None else blank
    label = [int(c) for c in label]
    if any(c == blank or c < 0 or c >= V1 for c in label):
        raise ValueError("label tokens must be non-blank vocabulary ids")
    alpha, logp = ctc_alpha(lp, label, blank)
    out = np.asarray(-logp, dtype=log_probs.dtype)

    def backward(g):
        grad = np.zeros_like(lp)
        if np.isfinite(logp):
            beta = ctc_beta(lp, label, blank)
            ext = _extended(label, blank)
            gamma = np.exp(alpha + beta - lp[:, ext] - logp)
            np.add.at(grad.T, ext, gamma.T)
            grad = -grad
        return ((g * grad).astype(log_probs.dtype),)

    return nx.custom_op(out, (log_probs,), backward)


def greedy_decode(log_probs: np.ndarray, blank: int = BLANK) -> list[int]:
    best = np.asarray(log_probs).argmax(axis=-1)
    out, prev = [], None
    for s in best:
        if s != prev and s != blank:
            out.append(int(s))
        prev = s
    return out


# -- pretraining ------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: Params
    losses: list[float]
    head: Params


def init_ctc_head(config: EncoderConfig, rng: np.random.Generator) -> Params:
    p: Params = {}
    init_linear(p, "ctc_head", config.model_dim, len(CHARSET) + 1, rng)
    return p


def ctc_log_probs(mel: MelSpectrogram, config: EncoderConfig, params: Params, head: Params,
                  rng: Optional[np.random.Generator] = None) -> Tensor:
    z = encode(mel, config, params, rng)
    return nx.log_softmax(linear(head, "ctc_head", z.vectors), axis=-1)


def pretrain_ctc(utterances: Sequence[tuple[MelSpectrogram, list[int]]], config: EncoderConfig,
                 epochs: int = 250, lr: float = 1e-4, batch_size: int = 96, seed: int = 0,
                 params: Optional[Params] = None, max_steps: Optional[int] = None,
                 mel_transform=None) -> PretrainResult:
    """Train the encoder plus a linear CTC head over character targets.

    ``mel_transform(index, rng)`` may return an augmented mel (e.g. noise
    mixed at a random SNR) in place of the stored one.
    """
    if not utterances:
        raise ValueError("pretraining needs at least one utterance")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_encoder(config, rng)
    head = init_ctc_head(config, rng)
    trainable = {**params, **head}
    opt = nx.Adam(trainable, lr=lr)
    losses: list[float] = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(utterances))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            opt.zero_grad()
            total, used = None, 0
            for i in chunk:
                mel, label = utterances[i]
                if mel_transform is not None:
                    mel = mel_transform(int(i), rng)
                loss = ctc_loss(ctc_log_probs(mel, config, params, head, rng), label)
                if not np.isfinite(loss.data):
                    continue
                total = loss if total is None else total + loss
                used += 1
            if total is None:
                continue
            total = total * (1.0 / used)
            total.backward()
            opt.step()
            losses.append(float(total.data))
            step += 1
            if max_steps is not None and step >= max_steps:
                return PretrainResult(params, losses, head)
        log.debug("ctc epoch %d loss %.4f", epoch, losses[-1] if losses else float("nan"))
    return PretrainResult(params, losses, head)
