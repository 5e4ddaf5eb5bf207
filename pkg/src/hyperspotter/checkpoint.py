"""Single-file checkpoint container (``HSCK0001``).

Layout: magic | u32 header length | JSON header | u32 record count | records |
CRC32 of everything before it. A record is u16 name length, UTF-8 name,
u8 dtype code (0 float32, 1 float64), u8 ndim, ndim x u32 extents, then the
little-endian payload. Optimizer moments are stored as ``adam.m.<param>`` and
``adam.v.<param>`` records.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .layers import Params
from .numerics import AdamState, Tensor

MAGIC = b"HSCK0001"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    """Corrupted checkpoint or one built for a different model config."""


@dataclass
class Checkpoint:
    params: Params
    model_config: ModelConfig
    epoch: int = 0
    val_loss: float = float("inf")
    adam: Optional[AdamState] = None
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.model_config.fingerprint()


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    nb = name.encode()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: dict[str, np.ndarray] = {k: p.data for k, p in ckpt.params.items()}
    header = {
        "model_config": ckpt.model_config.model_dump(),
        "fingerprint": ckpt.fingerprint,
        "epoch": ckpt.epoch,
        "val_loss": ckpt.val_loss if np.isfinite(ckpt.val_loss) else None,
        "extra": ckpt.extra,
    }
    if ckpt.adam is not None:
        a = ckpt.adam
        header["adam"] = {"lr": a.lr, "beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step}
        for k in a.m:
            arrays[f"adam.m.{k}"] = a.m[k]
            arrays[f"adam.v.{k}"] = a.v[k]
    hb = json.dumps(header, sort_keys=True).encode()
    body = bytearray(MAGIC + struct.pack("<I", len(hb)) + hb + struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        body += _record(name, arrays[name])
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path, expected_fingerprint: Optional[str] = None,
                    include: Optional[Sequence[str]] = None) -> Checkpoint:
    """Read a checkpoint, verifying its CRC and (optionally) the config fingerprint.

    ``include`` restricts which parameter groups are materialised, e.g.
    ``("encoder.", "detector.")`` for on-device detection without the keyword
    encoder.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 20 or blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an HSCK0001 checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: CRC mismatch (file corrupted or truncated)")
    (hlen,) = struct.unpack_from("<I", body, 8)
    header = json.loads(body[12:12 + hlen])
    config = ModelConfig.model_validate(header["model_config"])
    if config.fingerprint() != header["fingerprint"]:
        raise CheckpointError(f"{path}: stored fingerprint does not match stored config")
    if expected_fingerprint is not None and expected_fingerprint != header["fingerprint"]:
        raise CheckpointError(f"{path}: config fingerprint mismatch; checkpoint was built "
                              f"for a different model config")
    pos = 12 + hlen
    (n,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params: Params = {}
    moments: dict[str, np.ndarray] = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nl].decode()
        pos += nl
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES[code]
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64))
        raw = body[pos:pos + nbytes]
        pos += nbytes
        if name.startswith("adam."):
            moments[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
            continue
        if include is not None and not any(name.startswith(p) for p in include):
            continue
        arr = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[name] = Tensor(arr, requires_grad=True)
    adam = None
    if "adam" in header:
        h = header["adam"]
        adam = AdamState(lr=h["lr"], beta1=h["beta1"], beta2=h["beta2"], eps=h["eps"], step=h["step"])
        for key, arr in moments.items():
            kind, pname = key[5], key[7:]
            (adam.m if kind == "m" else adam.v)[pname] = arr
    val = header.get("val_loss")
    return Checkpoint(params, config, header.get("epoch", 0),
                      float("inf") if val is None else float(val), adam, header.get("extra", {}))
