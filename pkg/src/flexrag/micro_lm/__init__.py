from .config import ModelConfig
from .vocab import Vocab, build_vocab, tokenize, detokenize, normalize_whitespace
from .model import (MicroLM, Parameter, ForwardResult, matmul,
                    lm_loss, lm_loss_and_grad, aligned_lm_rows)
from .optimizer import Adam, optimizer_step, cosine_lr
from .checkpoint import Checkpoint, save_checkpoint, load_checkpoint, FORMAT_VERSION
from .grad_check import grad_check

__all__ = [
    "ModelConfig", "Vocab", "build_vocab", "tokenize", "detokenize",
    "normalize_whitespace", "MicroLM", "Parameter", "ForwardResult", "matmul",
    "lm_loss", "lm_loss_and_grad", "aligned_lm_rows", "Adam", "optimizer_step",
    "cosine_lr", "Checkpoint", "save_checkpoint", "load_checkpoint",
    "FORMAT_VERSION", "grad_check",
]
