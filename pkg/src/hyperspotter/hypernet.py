"""Keyword encoder: a character LSTM that emits depthwise-conv matched-filter weights.

The generated C x K filter is the only keyword-specific state the detector
needs, so filters can be produced offline and shipped as ``HSKW0001`` files.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .config import HypernetConfig
from .layers import Params, init_linear, linear, param
from .numerics import Tensor
from .text import CHARSET, encode_chars, normalize

PREFIX = "hypernet"
FILTER_MAGIC = b"HSKW0001"
FILTER_VERSION = 1


class FilterFormatError(ValueError):
    """Malformed or corrupted HSKW0001 file."""


@dataclass
class KeywordFilter:
    keyword: str
    weights: np.ndarray  # C x K float32

    @property
    def channels(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel(self) -> int:
        return self.weights.shape[1]


def count_params(config: HypernetConfig, charset_size: int = len(CHARSET)) -> int:
    if config.lstm_layers < 1:
        raise ValueError("need at least one LSTM layer")
    H = config.hidden
    total = charset_size * config.embed_dim
    in_dim = config.embed_dim
    for _ in range(config.lstm_layers):
        total += 4 * H * (in_dim + H) + 4 * H
        in_dim = H
    total += H * config.proj_hidden + config.proj_hidden
    total += config.proj_hidden * config.n_weights + config.n_weights
    return total


def init_hypernet(config: HypernetConfig, rng: np.random.Generator) -> Params:
    H = config.hidden
    p: Params = {f"{PREFIX}.embed": param(rng.standard_normal((len(CHARSET), config.embed_dim)))}
    in_dim = config.embed_dim
    for layer in range(config.lstm_layers):
        pre = f"{PREFIX}.lstm.{layer}"
        bound = 1.0 / np.sqrt(H)
        p[f"{pre}.w_ih"] = param(rng.uniform(-bound, bound, (in_dim, 4 * H)))
        p[f"{pre}.w_hh"] = param(rng.uniform(-bound, bound, (H, 4 * H)))
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0  # forget-gate bias
        p[f"{pre}.b"] = param(b)
        in_dim = H
    init_linear(p, f"{PREFIX}.proj1", H, config.proj_hidden, rng)
    init_linear(p, f"{PREFIX}.proj2", config.proj_hidden, config.n_weights, rng,
                scale=config.out_scale)
    return p


def keyword_ids(keyword: str) -> list[int]:
    text = normalize(keyword)
    if not text:
        raise ValueError("keyword must be non-empty")
    return encode_chars(text)


def weights_tensor(keywords: Sequence[str], params: Params, config: HypernetConfig) -> Tensor:
    """Batched generation: E keywords -> E x C x K filter tensor on the tape.

    Keywords of different lengths share one unrolled LSTM; a per-row mask
    freezes the state of rows that have already ended, so each row's summary
    is its own final hidden state.
    """
    ids = [keyword_ids(k) for k in keywords]
    E = len(ids)
    lengths = np.array([len(i) for i in ids])
    steps = int(lengths.max())
    padded = np.zeros((E, steps), dtype=np.int64)
    for r, seq in enumerate(ids):
        padded[r, :len(seq)] = seq
    table = params[f"{PREFIX}.embed"]
    dtype = table.dtype
    H = config.hidden
    x_seq = [nx.embedding(table, padded[:, t]) for t in range(steps)]
    for layer in range(config.lstm_layers):
        cell = {k: params[f"{PREFIX}.lstm.{layer}.{k}"] for k in ("w_ih", "w_hh", "b")}
        h = Tensor(np.zeros((E, H), dtype=dtype))
        c = Tensor(np.zeros((E, H), dtype=dtype))
        outs = []
        for t in range(steps):
            h_new, c_new = nx.lstm_step(x_seq[t], h, c, cell)
            live = lengths > t
            if live.all():
                h, c = h_new, c_new
            else:
                keep = np.broadcast_to(live[:, None], (E, H)).astype(dtype)
                h = h_new * keep + h * (1.0 - keep)
                c = c_new * keep + c * (1.0 - keep)
            outs.append(h)
        x_seq = outs
    summary = x_seq[-1]
    hidden = nx.relu(linear(params, f"{PREFIX}.proj1", summary))
    flat = linear(params, f"{PREFIX}.proj2", hidden)
    return flat.reshape(E, config.channels, config.kernel)


def generate_weights(keyword: str, params: Params, config: HypernetConfig) -> KeywordFilter:
    with nx.no_grad():
        w = weights_tensor([keyword], params, config)
    return KeywordFilter(normalize(keyword), np.asarray(w.data[0], dtype=np.float32))


def write_filter(path, filt: KeywordFilter) -> None:
    kw = filt.keyword.encode("utf-8")
    C, K = filt.weights.shape
    body = (FILTER_MAGIC + struct.pack("<HHHI", FILTER_VERSION, K, C, len(kw)) + kw
            + np.ascontiguousarray(filt.weights, dtype="<f4").tobytes())
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def read_filter(path) -> KeywordFilter:
    blob = Path(path).read_bytes()
    if len(blob) < 8 + 10 + 4 or blob[:8] != FILTER_MAGIC:
        raise FilterFormatError(f"{path}: not an HSKW0001 filter file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise FilterFormatError(f"{path}: CRC mismatch (file corrupted or truncated)")
    version, K, C, n = struct.unpack("<HHHI", body[8:18])
    if version != FILTER_VERSION:
        raise FilterFormatError(f"{path}: unsupported version {version}")
    kw = body[18:18 + n].decode("utf-8")
    payload = body[18 + n:]
    if len(payload) != 4 * C * K:
        raise FilterFormatError(f"{path}: expected {C}x{K} weights, got {len(payload)} bytes")
    weights = np.frombuffer(payload, dtype="<f4").reshape(C, K).astype(np.float32)
    return KeywordFilter(kw, weights)
