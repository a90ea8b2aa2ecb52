"""The deployed pair: a frozen downstream model plus its trainable encoder.

The encoder starts as a copy of the downstream model's embeddings and first
``n_enc_layers`` blocks; training moves only the encoder while the
downstream parameters stay frozen bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .micro_lm import (Adam, Checkpoint, MicroLM, ModelConfig, Vocab,
                       load_checkpoint, save_checkpoint)

LM_PREFIX = "lm."
ENC_PREFIX = "enc."


@dataclass
class RagSystem:
    config: ModelConfig
    vocab: Vocab
    lm: MicroLM
    encoder: MicroLM

    @classmethod
    def initialize(cls, config: ModelConfig, vocab: Vocab,
                   stable: bool = False) -> "RagSystem":
        if config.vocab_size != vocab.size:
            config = ModelConfig(**{**config.to_dict(), "vocab_size": vocab.size})
        lm = MicroLM(config, stable=stable)
        enc = lm.truncated_encoder()
        enc.stable = stable
        return cls(config=config, vocab=vocab, lm=lm, encoder=enc)

    def freeze_lm(self) -> None:
        self.lm.freeze_all()

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        out = {LM_PREFIX + k: v for k, v in self.lm.state_arrays().items()}
        out.update({ENC_PREFIX + k: v for k, v in self.encoder.state_arrays().items()})
        return out

    def to_checkpoint(self, stage_tag: str, optimizer: Adam | None = None,
                      rng_state: bytes = b"", meta: dict | None = None) -> Checkpoint:
        opt_state: dict[str, np.ndarray] = {}
        m = dict(meta or {})
        if optimizer is not None:
            opt_state = {ENC_PREFIX + k: v for k, v in optimizer.state_arrays().items()}
            m["adam_t"] = optimizer.t
        return Checkpoint(
            format_version=1, config=self.config,
            parameters={k: v.copy() for k, v in self.parameter_arrays().items()},
            optimizer_state=opt_state, rng_state=rng_state,
            stage_tag=stage_tag, meta=m)

    def save(self, path, stage_tag: str, optimizer: Adam | None = None,
             rng_state: bytes = b"", meta: dict | None = None) -> None:
        save_checkpoint(path, self.to_checkpoint(stage_tag, optimizer, rng_state, meta))

    def load_arrays(self, ckpt: Checkpoint) -> None:
        lm_arrays = {k[len(LM_PREFIX):]: v for k, v in ckpt.parameters.items()
                     if k.startswith(LM_PREFIX)}
        enc_arrays = {k[len(ENC_PREFIX):]: v for k, v in ckpt.parameters.items()
                      if k.startswith(ENC_PREFIX)}
        self.lm.load_state_arrays(lm_arrays)
        self.encoder.load_state_arrays(enc_arrays)

    @classmethod
    def load(cls, path, vocab: Vocab, stable: bool = False) -> tuple["RagSystem", Checkpoint]:
        ckpt = load_checkpoint(path)
        system = cls.initialize(ckpt.config, vocab, stable=stable)
        system.load_arrays(ckpt)
        return system, ckpt

    def restore_optimizer(self, ckpt: Checkpoint, optimizer: Adam) -> None:
        arrays = {k[len(ENC_PREFIX):]: v for k, v in ckpt.optimizer_state.items()
                  if k.startswith(ENC_PREFIX)}
        optimizer.load_state_arrays(arrays, int(ckpt.meta.get("adam_t", 0)))
