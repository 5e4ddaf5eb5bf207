"""Perceiver detection network guided by a keyword-specific depthwise convolution.

Pipeline: project z to N channels, add positions, run the keyword filter as a
depthwise matched filter over time (then GELU), and let a learned S x N latent
array cross-attend to the filtered sequence in each of L layers, each followed
by a latent self-attention block. Latents are mean-pooled into one logit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import numerics as nx
from .config import PerceiverConfig
from .encoder import EncodedSpeech
from .hypernet import KeywordFilter
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

PREFIX = "detector"


@dataclass
class DetectionOutput:
    logit: Tensor
    cross_attention: list[np.ndarray] = field(default_factory=list)  # per layer, S x B

    @property
    def probability(self) -> float:
        return float(1.0 / (1.0 + np.exp(-float(self.logit.data))))


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_detector(config: PerceiverConfig, encoder_dim: int, rng: np.random.Generator) -> Params:
    N, S, H, Dh = config.proj_dim, config.latent_size, config.n_heads, config.dim_head
    p: Params = {}
    init_linear(p, f"{PREFIX}.proj", encoder_dim, N, rng)
    p[f"{PREFIX}.latents"] = param(_truncated_normal(rng, (S, N), 0.02))
    for layer in range(config.n_layers):
        pre = f"{PREFIX}.layers.{layer}"
        init_norm(p, f"{pre}.cross.norm_q", N)
        init_attention(p, f"{pre}.cross.attn", N, N, H, Dh, rng)
        init_norm(p, f"{pre}.cross.ff.norm", N)
        init_ff(p, f"{pre}.cross.ff", N, config.ff_mult, rng)
        init_norm(p, f"{pre}.self.norm", N)
        init_attention(p, f"{pre}.self.attn", N, N, H, Dh, rng)
        init_norm(p, f"{pre}.self.ff.norm", N)
        init_ff(p, f"{pre}.self.ff", N, config.ff_mult, rng)
    init_linear(p, f"{PREFIX}.head", N, 1, rng)
    return p


def count_detector_params(config: PerceiverConfig, encoder_dim: int) -> int:
    """Trainable parameters of the detector (the keyword filter is not counted)."""
    N, S = config.proj_dim, config.latent_size
    inner = config.n_heads * config.dim_head
    attn = 3 * (N * inner + inner) + inner * N + N
    ff = N * N * config.ff_mult + N * config.ff_mult + N * config.ff_mult * N + N
    per_layer = (2 * N + attn + 2 * N + ff) + (2 * N + attn + 2 * N + ff)
    return encoder_dim * N + N + S * N + config.n_layers * per_layer + N + 1


def matched_filter(z: Tensor, weights: Tensor, params: Params, config: PerceiverConfig) -> Tensor:
    """Project z (B x M), add positions, depthwise-convolve with the keyword filter."""
    x = linear(params, f"{PREFIX}.proj", z)
    if config.positions:
        x = x + Tensor(sinusoidal_positions(x.shape[0], config.proj_dim, x.dtype))
    filtered = nx.depthwise_conv1d(x.T, weights, stride=1, dilation=1, padding="same")
    return nx.gelu(filtered).T  # B x N


def detect(z: Union[EncodedSpeech, Tensor], filt: Union[KeywordFilter, Tensor], params: Params,
           config: PerceiverConfig) -> DetectionOutput:
    vectors = z.vectors if isinstance(z, EncodedSpeech) else z
    if isinstance(filt, KeywordFilter):
        weights = Tensor(filt.weights.astype(vectors.dtype))
    else:
        weights = filt
    if weights.shape != (config.proj_dim, config.kernel):
        raise nx.ShapeError(
            f"filter is {weights.shape[0]}x{weights.shape[1]}, detector expects "
            f"{config.proj_dim}x{config.kernel}")
    F = matched_filter(vectors, weights, params, config)
    lat = params[f"{PREFIX}.latents"]
    H, Dh = config.n_heads, config.dim_head
    maps = []
    for layer in range(config.n_layers):
        pre = f"{PREFIX}.layers.{layer}"
        # keys see F un-normalised: a per-frame norm would erase the matched-filter magnitude,
        # which is exactly what tells the latents where the keyword is
        a, w = attention(params, f"{pre}.cross.attn", norm(params, f"{pre}.cross.norm_q", lat),
                         F, H, Dh)
        maps.append(w.mean(axis=0))
        lat = lat + a
        lat = lat + feed_forward(params, f"{pre}.cross.ff", norm(params, f"{pre}.cross.ff.norm", lat))
        h = norm(params, f"{pre}.self.norm", lat)
        lat = lat + attention(params, f"{pre}.self.attn", h, h, H, Dh)[0]
        lat = lat + feed_forward(params, f"{pre}.self.ff", norm(params, f"{pre}.self.ff.norm", lat))
    pooled = lat.mean(axis=0, keepdims=True)
    logit = linear(params, f"{PREFIX}.head", pooled).reshape(())
    return DetectionOutput(logit, maps)


def export_attention(out: DetectionOutput, layer: int, path) -> tuple[Path, Path]:
    """Write one layer's S x B cross-attention as CSV and as an 8-bit PGM heatmap."""
    if not 0 <= layer < len(out.cross_attention):
        raise IndexError(f"layer {layer} out of range (detector has {len(out.cross_attention)})")
    mat = np.asarray(out.cross_attention[layer], dtype=np.float64)
    base = Path(path)
    csv_path = base.with_suffix(".csv")
    pgm_path = base.with_suffix(".pgm")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mat:
            writer.writerow([f"{v:.8g}" for v in row])
    lo, hi = mat.min(), mat.max()
    if hi > lo:
        gray = np.round(255.0 * (mat - lo) / (hi - lo))
    else:
        gray = np.full(mat.shape, 128.0)
    S, B = mat.shape
    pgm_path.write_bytes(f"P5\n{B} {S}\n255\n".encode() + gray.astype(np.uint8).tobytes())
    return csv_path, pgm_path


def read_attention_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
