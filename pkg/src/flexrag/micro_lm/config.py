"""Model hyperparameters."""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..errors import InvalidConfig


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the shared decoder-only model.

    ``n_layers`` is the full decoder depth; ``n_enc_layers`` is how many of
    those layers the compressive encoder copies.
    """

    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    n_enc_layers: int = 2
    window: int = 256
    seed: int = 0
    dtype_train: str = "float32"

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise InvalidConfig("vocab_size must be positive")
        if self.d_model % self.n_heads != 0:
            raise InvalidConfig(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )
        if not (0 <= self.n_enc_layers <= self.n_layers):
            raise InvalidConfig(
                f"n_enc_layers={self.n_enc_layers} outside [0, {self.n_layers}]"
            )
        if self.window < 2:
            raise InvalidConfig("window must be at least 2")
        if self.dtype_train not in ("float32", "float64"):
            raise InvalidConfig(f"unsupported dtype_train {self.dtype_train!r}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.dtype_train)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg
