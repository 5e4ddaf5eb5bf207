"""Model and training configuration.

All configs are frozen pydantic models that reject unknown keys, so a JSON run
config is validated before any work happens.
"""

from __future__ import annotations

import hashlib
import json
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EncoderConfig(_Config):
    n_mels: int = Field(80, ge=1)
    n_layers: int = Field(6, ge=1)
    n_heads: int = Field(4, ge=1)
    model_dim: int = Field(144, ge=1)
    conv_kernel: int = Field(3, ge=1)
    subsample_factor: int = 4
    ff_expansion: int = Field(4, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if self.subsample_factor not in (2, 4):
            raise ValueError("subsample_factor must be 2 or 4")
        return self

    @property
    def frame_period_ms(self) -> float:
        return 10.0 * self.subsample_factor


class HypernetConfig(_Config):
    embed_dim: int = Field(161, ge=1)
    lstm_layers: int = Field(4, ge=1)
    hidden: int = Field(256, ge=1)
    proj_hidden: int = Field(512, ge=1)
    channels: int = Field(64, ge=1)
    kernel: int = Field(16, ge=1)
    out_scale: float = Field(1.0, gt=0.0)

    @property
    def n_weights(self) -> int:
        return self.channels * self.kernel


class PerceiverConfig(_Config):
    latent_size: int = Field(16, ge=1)
    proj_dim: int = Field(64, ge=1)
    n_layers: int = Field(4, ge=1, le=5)
    n_heads: int = Field(4, ge=1)
    head_dim: Optional[int] = None
    ff_mult: int = Field(4, ge=1)
    kernel: int = Field(16, ge=1)
    positions: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.proj_dim % self.n_heads:
            raise ValueError("proj_dim must be divisible by n_heads")
        return self

    @property
    def dim_head(self) -> int:
        return self.head_dim or self.proj_dim // self.n_heads


class TrainConfig(_Config):
    lr: float = Field(1e-4, gt=0.0)
    batch_size: int = Field(96, ge=2)
    max_epochs: int = Field(250, ge=1)
    patience: int = Field(40, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    freeze_encoder: bool = False
    seed: int = 0
    val_batches: Optional[int] = Field(None, ge=1)
    max_span_words: int = Field(4, ge=1, le=4)

    @model_validator(mode="after")
    def _check(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self


class ModelConfig(_Config):
    encoder: EncoderConfig = EncoderConfig()
    hypernet: HypernetConfig = HypernetConfig()
    detector: PerceiverConfig = PerceiverConfig()

    @model_validator(mode="after")
    def _check(self):
        if self.hypernet.channels != self.detector.proj_dim:
            raise ValueError("hypernet channels must equal detector proj_dim")
        if self.hypernet.kernel != self.detector.kernel:
            raise ValueError("hypernet kernel must equal detector kernel")
        return self

    def fingerprint(self) -> str:
        blob = json.dumps(self.model_dump(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# paper-scale detector: head/FF widths are not published; these land the
# per-layer parameter growth near the reported ~0.45M.
PAPER = ModelConfig(
    encoder=EncoderConfig(),
    hypernet=HypernetConfig(),
    detector=PerceiverConfig(n_layers=4, head_dim=128, ff_mult=8),
)

DESK = ModelConfig(
    encoder=EncoderConfig(n_layers=2, model_dim=32, n_heads=4, dropout=0.0),
    hypernet=HypernetConfig(embed_dim=16, lstm_layers=1, hidden=64, proj_hidden=64,
                            channels=16, kernel=16),
    detector=PerceiverConfig(latent_size=8, proj_dim=16, n_layers=2, n_heads=4, ff_mult=2,
                             kernel=16),
)

# the desk recipe trains on top of a CTC-pretrained encoder that stays frozen
DESK_TRAIN = TrainConfig(lr=1e-3, batch_size=32, max_epochs=200, patience=100, max_steps=300,
                         freeze_encoder=True, max_span_words=1)
