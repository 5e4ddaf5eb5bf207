"""Parameter initialisation and the transformer pieces shared by encoder and detector."""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import numerics as nx
from .numerics import Tensor

Params = dict[str, Tensor]


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=nx.default_dtype()), requires_grad=True)


def init_linear(params: Params, name: str, fan_in: int, fan_out: int,
                rng: np.random.Generator, bias: bool = True, scale: float = 1.0) -> None:
    params[f"{name}.w"] = param(rng.standard_normal((fan_in, fan_out)) * scale / np.sqrt(fan_in))
    if bias:
        params[f"{name}.b"] = param(np.zeros(fan_out))


def init_norm(params: Params, name: str, dim: int) -> None:
    params[f"{name}.g"] = param(np.ones(dim))
    params[f"{name}.b"] = param(np.zeros(dim))


def init_attention(params: Params, name: str, q_dim: int, kv_dim: int, n_heads: int,
                   dim_head: int, rng: np.random.Generator) -> None:
    inner = n_heads * dim_head
    init_linear(params, f"{name}.q", q_dim, inner, rng)
    init_linear(params, f"{name}.k", kv_dim, inner, rng)
    init_linear(params, f"{name}.v", kv_dim, inner, rng)
    init_linear(params, f"{name}.o", inner, q_dim, rng)


def init_ff(params: Params, name: str, dim: int, mult: int, rng: np.random.Generator) -> None:
    init_linear(params, f"{name}.1", dim, dim * mult, rng)
    init_linear(params, f"{name}.2", dim * mult, dim, rng)


def linear(params: Params, name: str, x: Tensor) -> Tensor:
    return nx.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    return nx.layernorm(x, params[f"{name}.g"], params[f"{name}.b"])


def feed_forward(params: Params, name: str, x: Tensor, act=nx.gelu, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> Tensor:
    h = nx.dropout(act(linear(params, f"{name}.1", x)), dropout, rng)
    return nx.dropout(linear(params, f"{name}.2", h), dropout, rng)


def attention(params: Params, name: str, q_in: Tensor, kv_in: Tensor, n_heads: int,
              dim_head: int) -> tuple[Tensor, np.ndarray]:
    """Multi-head scaled dot-product attention.

    Returns the output (Sq x D) and the attention weights, heads x Sq x Sk.
    """
    sq, sk = q_in.shape[0], kv_in.shape[0]

    def heads(x: Tensor, n: int) -> Tensor:
        return x.reshape(n, n_heads, dim_head).transpose(1, 0, 2)

    q = heads(linear(params, f"{name}.q", q_in), sq)
    k = heads(linear(params, f"{name}.k", kv_in), sk)
    v = heads(linear(params, f"{name}.v", kv_in), sk)
    scores = nx.matmul(q, k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dim_head))
    weights = nx.softmax(scores, axis=-1)
    ctx = nx.matmul(weights, v).transpose(1, 0, 2).reshape(sq, n_heads * dim_head)
    return linear(params, f"{name}.o", ctx), weights.data


def sinusoidal_positions(length: int, dim: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


def count(params: Params, prefix: str = "") -> int:
    return sum(p.size for k, p in params.items() if k.startswith(prefix))
