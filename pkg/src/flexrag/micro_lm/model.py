"""Decoder-only transformer in numpy with exact analytic gradients.

Pre-norm blocks, learned absolute positions, untied output head. A forward
pass may receive an injected matrix of prefix embeddings; those rows are
consumed verbatim (no positional term is added to them) and token rows are
numbered consecutively after the prefix. All matrix products go through
:func:`matmul` so tests can instrument operation counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import ContextOverflow, EmptyLossSupport, NoGraph, ShapeError
from .config import ModelConfig


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a, b)


def stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose per-element rounding is independent of the
    operand shapes (BLAS tiles by shape; einsum reduces element-wise), so
    row i of the result is bit-identical no matter how many rows follow it.
    """
    if a.ndim == 2 and b.ndim == 2:
        return np.einsum("ik,kj->ij", a, b)
    if a.ndim == 3 and b.ndim == 3:
        return np.einsum("bik,bkj->bij", a, b)
    return np.matmul(a, b)


@dataclass
class Parameter:
    name: str
    values: np.ndarray
    grad: np.ndarray = field(init=False)
    frozen: bool = False

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.values)


def _layernorm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    return g * xhat + b, (xhat, inv, g)


def _layernorm_backward(dy: np.ndarray, cache):
    xhat, inv, g = cache
    n = xhat.shape[-1]
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


_GELU_C = math.sqrt(2.0 / math.pi)


def _gelu(x: np.ndarray):
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def _gelu_backward(dy: np.ndarray, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax_rows(x: np.ndarray, stable: bool = False) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if stable:
        # Causal rows end in exact zeros, so the running sum at the diagonal
        # is the full denominator; cumsum is sequential, hence its value does
        # not depend on how many masked columns follow.
        s = e.shape[-1]
        diag = np.arange(s)
        denom = np.cumsum(e, axis=-1)[..., diag, diag]
        return e / denom[..., None]
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardResult:
    logits: Optional[np.ndarray]          # (S, vocab) or None without a head
    hidden_states: list[np.ndarray]       # residual stream after each layer
    cache: Optional[dict]


class MicroLM:
    """The shared decoder; also serves, truncated, as the compressive encoder."""

    def __init__(self, config: ModelConfig, depth: int | None = None,
                 include_head: bool = True, init: bool = True,
                 stable: bool = False):
        config.validate()
        self.config = config
        self.depth = config.n_layers if depth is None else depth
        self.include_head = include_head
        self.dtype = config.dtype
        # stable=True trades BLAS speed for rounding that cannot depend on
        # sequence length, making the causality guarantee bit-exact.
        self.stable = stable
        self.params: dict[str, Parameter] = {}
        if init:
            self._init_params()

    def _mm(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if self.stable:
            return stable_matmul(a, b)
        return matmul(a, b)

    # -- parameters -------------------------------------------------------

    def _add(self, name: str, values: np.ndarray) -> None:
        self.params[name] = Parameter(name, values.astype(self.dtype))

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, v = cfg.d_model, cfg.vocab_size
        proj_std = 0.02 / math.sqrt(max(1, 2 * self.depth))
        self._add("tok_emb", rng.normal(0.0, 0.02, (v, d)))
        self._add("pos_emb", rng.normal(0.0, 0.02, (cfg.window, d)))
        for i in range(self.depth):
            p = f"layers.{i}."
            self._add(p + "ln1.g", np.ones(d))
            self._add(p + "ln1.b", np.zeros(d))
            for w in ("wq", "wk", "wv"):
                self._add(p + "attn." + w, rng.normal(0.0, 0.02, (d, d)))
            self._add(p + "attn.wo", rng.normal(0.0, proj_std, (d, d)))
            self._add(p + "ln2.g", np.ones(d))
            self._add(p + "ln2.b", np.zeros(d))
            self._add(p + "mlp.w1", rng.normal(0.0, 0.02, (d, 4 * d)))
            self._add(p + "mlp.b1", np.zeros(4 * d))
            self._add(p + "mlp.w2", rng.normal(0.0, proj_std, (4 * d, d)))
            self._add(p + "mlp.b2", np.zeros(d))
        if self.include_head:
            self._add("final_ln.g", np.ones(d))
            self._add("final_ln.b", np.zeros(d))
            self._add("head.w", rng.normal(0.0, 0.02, (d, v)))

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.grad[...] = 0.0

    def freeze_all(self) -> None:
        for p in self.params.values():
            p.frozen = True

    def trainable(self) -> list[Parameter]:
        return [p for p in self.params.values() if not p.frozen]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            src = arrays[name]
            if src.shape != p.values.shape:
                raise ShapeError(f"{name}: {src.shape} != {p.values.shape}")
            p.values[...] = src.astype(self.dtype)

    def truncated_encoder(self) -> "MicroLM":
        """Copy of the first ``n_enc_layers`` layers plus embeddings, headless."""
        enc = MicroLM(self.config, depth=self.config.n_enc_layers,
                      include_head=False, init=False)
        for name in ["tok_emb", "pos_emb"]:
            enc._add(name, self.params[name].values.copy())
        for i in range(enc.depth):
            for suffix in ("ln1.g", "ln1.b", "attn.wq", "attn.wk", "attn.wv",
                           "attn.wo", "ln2.g", "ln2.b", "mlp.w1", "mlp.b1",
                           "mlp.w2", "mlp.b2"):
                name = f"layers.{i}.{suffix}"
                enc._add(name, self.params[name].values.copy())
        return enc

    # -- forward ----------------------------------------------------------

    def forward(self, tokens, prefix: np.ndarray | None = None,
                want_cache: bool = False) -> ForwardResult:
        cfg = self.config
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
        n_pre = 0
        if prefix is not None:
            prefix = np.asarray(prefix)
            if prefix.ndim != 2 or prefix.shape[1] != cfg.d_model:
                raise ShapeError(
                    f"prefix must be (k, {cfg.d_model}), got {prefix.shape}")
            n_pre = prefix.shape[0]
        total = n_pre + ids.size
        if total > cfg.window:
            raise ContextOverflow(f"{total} rows exceed window {cfg.window}")
        if total == 0:
            raise ShapeError("empty input: no prefix rows and no tokens")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise ShapeError("token id out of range")

        tok = self.params["tok_emb"].values
        pos = self.params["pos_emb"].values
        rows = []
        if n_pre:
            rows.append(prefix.astype(self.dtype))
        if ids.size:
            rows.append(tok[ids] + pos[n_pre:n_pre + ids.size])
        x = np.concatenate(rows, axis=0) if len(rows) > 1 else rows[0].copy()

        h = self.config.d_model // self.config.n_heads
        scale = np.asarray(1.0 / math.sqrt(h), dtype=self.dtype)
        causal = np.tril(np.ones((total, total), dtype=bool))

        hidden = [x]
        layer_caches = []
        for i in range(self.depth):
            p = f"layers.{i}."
            g1 = self.params[p + "ln1.g"].values
            b1 = self.params[p + "ln1.b"].values
            a, ln1_c = _layernorm(x, g1, b1)
            q = self._mm(a, self.params[p + "attn.wq"].values)
            k = self._mm(a, self.params[p + "attn.wk"].values)
            v = self._mm(a, self.params[p + "attn.wv"].values)
            qh = self._split(q)
            kh = self._split(k)
            vh = self._split(v)
            raw = self._mm(qh, kh.transpose(0, 2, 1)) * scale
            masked = np.where(causal, raw, -np.inf)
            attn = _softmax_rows(masked, stable=self.stable)
            ctx = self._mm(attn, vh)
            ctx2 = self._merge(ctx)
            attn_out = self._mm(ctx2, self.params[p + "attn.wo"].values)
            x = x + attn_out
            g2 = self.params[p + "ln2.g"].values
            b2 = self.params[p + "ln2.b"].values
            m, ln2_c = _layernorm(x, g2, b2)
            z = self._mm(m, self.params[p + "mlp.w1"].values) + \
                self.params[p + "mlp.b1"].values
            act, gelu_c = _gelu(z)
            mlp_out = self._mm(act, self.params[p + "mlp.w2"].values) + \
                self.params[p + "mlp.b2"].values
            x = x + mlp_out
            hidden.append(x)
            if want_cache:
                layer_caches.append({
                    "a": a, "ln1": ln1_c, "qh": qh, "kh": kh, "vh": vh,
                    "attn": attn, "ctx2": ctx2, "m": m, "ln2": ln2_c,
                    "act": act, "gelu": gelu_c,
                })

        logits = None
        lnf_c = xf = None
        if self.include_head:
            gf = self.params["final_ln.g"].values
            bf = self.params["final_ln.b"].values
            xf, lnf_c = _layernorm(x, gf, bf)
            logits = self._mm(xf, self.params["head.w"].values)

        cache = None
        if want_cache:
            cache = {
                "ids": ids, "n_pre": n_pre, "hidden": hidden,
                "layers": layer_caches, "lnf": lnf_c, "xf": xf,
            }
        return ForwardResult(logits, hidden, cache)

    def _split(self, x: np.ndarray) -> np.ndarray:
        s = x.shape[0]
        nh = self.config.n_heads
        return x.reshape(s, nh, -1).transpose(1, 0, 2)

    def _merge(self, x: np.ndarray) -> np.ndarray:
        nh, s, hd = x.shape
        return x.transpose(1, 0, 2).reshape(s, nh * hd)

    # -- backward ---------------------------------------------------------

    def backward(self, cache: dict | None, dlogits: np.ndarray | None = None,
                 d_last_hidden: np.ndarray | None = None) -> np.ndarray:
        """Accumulate parameter gradients; return d(input rows), shape (S, d).

        Exactly one of ``dlogits`` (top of the head) or ``d_last_hidden``
        (top of the residual stream) must be given. Frozen parameters keep
        zero gradient; the returned rows let callers keep propagating into
        injected prefixes.
        """
        if cache is None:
            raise NoGraph("backward called without a forward cache")
        if (dlogits is None) == (d_last_hidden is None):
            raise NoGraph("pass exactly one of dlogits / d_last_hidden")

        h = self.config.d_model // self.config.n_heads
        scale = np.asarray(1.0 / math.sqrt(h), dtype=self.dtype)

        if dlogits is not None:
            if not self.include_head:
                raise NoGraph("model has no output head")
            dlogits = dlogits.astype(self.dtype)
            self._acc("head.w", self._mm(cache["xf"].T, dlogits))
            dxf = self._mm(dlogits, self.params["head.w"].values.T)
            dx, dgf, dbf = _layernorm_backward(dxf, cache["lnf"])
            self._acc("final_ln.g", dgf)
            self._acc("final_ln.b", dbf)
        else:
            dx = d_last_hidden.astype(self.dtype).copy()

        for i in reversed(range(self.depth)):
            p = f"layers.{i}."
            lc = cache["layers"][i]
            # MLP branch
            d_mlp_out = dx
            self._acc(p + "mlp.w2", self._mm(lc["act"].T, d_mlp_out))
            self._acc(p + "mlp.b2", d_mlp_out.sum(axis=0))
            d_act = self._mm(d_mlp_out, self.params[p + "mlp.w2"].values.T)
            dz = _gelu_backward(d_act, lc["gelu"])
            self._acc(p + "mlp.w1", self._mm(lc["m"].T, dz))
            self._acc(p + "mlp.b1", dz.sum(axis=0))
            dm = self._mm(dz, self.params[p + "mlp.w1"].values.T)
            dx_ln2, dg2, db2 = _layernorm_backward(dm, lc["ln2"])
            self._acc(p + "ln2.g", dg2)
            self._acc(p + "ln2.b", db2)
            dx = dx + dx_ln2
            # attention branch
            d_attn_out = dx
            self._acc(p + "attn.wo", self._mm(lc["ctx2"].T, d_attn_out))
            d_ctx2 = self._mm(d_attn_out, self.params[p + "attn.wo"].values.T)
            d_ctx = self._split(d_ctx2)
            d_attn = self._mm(d_ctx, lc["vh"].transpose(0, 2, 1))
            d_vh = self._mm(lc["attn"].transpose(0, 2, 1), d_ctx)
            attn = lc["attn"]
            d_masked = attn * (d_attn - (d_attn * attn).sum(axis=-1, keepdims=True))
            d_raw = d_masked * scale
            d_qh = self._mm(d_raw, lc["kh"])
            d_kh = self._mm(d_raw.transpose(0, 2, 1), lc["qh"])
            dq = self._merge(d_qh)
            dk = self._merge(d_kh)
            dv = self._merge(d_vh)
            a = lc["a"]
            self._acc(p + "attn.wq", self._mm(a.T, dq))
            self._acc(p + "attn.wk", self._mm(a.T, dk))
            self._acc(p + "attn.wv", self._mm(a.T, dv))
            da = (self._mm(dq, self.params[p + "attn.wq"].values.T)
                  + self._mm(dk, self.params[p + "attn.wk"].values.T)
                  + self._mm(dv, self.params[p + "attn.wv"].values.T))
            dx_ln1, dg1, db1 = _layernorm_backward(da, lc["ln1"])
            self._acc(p + "ln1.g", dg1)
            self._acc(p + "ln1.b", db1)
            dx = dx + dx_ln1

        ids = cache["ids"]
        n_pre = cache["n_pre"]
        d_tok_rows = dx[n_pre:]
        if ids.size:
            pe = self.params["pos_emb"]
            if not pe.frozen:
                pe.grad[n_pre:n_pre + ids.size] += d_tok_rows
            te = self.params["tok_emb"]
            if not te.frozen:
                np.add.at(te.grad, ids, d_tok_rows)
        return dx

    def _acc(self, name: str, grad: np.ndarray) -> None:
        p = self.params[name]
        if not p.frozen:
            p.grad += grad


# -- loss ------------------------------------------------------------------


def lm_loss_and_grad(logits: np.ndarray, targets, mask=None):
    """Mean NLL over masked-in positions and its gradient wrt logits."""
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ShapeError(
            f"logits {logits.shape} do not align with {targets.size} targets")
    if mask is None:
        mask = np.ones(targets.size, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool).reshape(-1)
        if mask.size != targets.size:
            raise ShapeError("mask length differs from targets length")
    n_in = int(mask.sum())
    if n_in == 0:
        raise EmptyLossSupport("all positions masked out of the loss")

    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    se = e.sum(axis=-1, keepdims=True)
    logp = shifted - np.log(se)
    rows = np.arange(targets.size)
    nll = -logp[rows, targets]
    loss = float(nll[mask].mean(dtype=np.float64))

    dlogits = e / se
    dlogits[rows, targets] -= 1.0
    dlogits[~mask] = 0.0
    dlogits /= n_in
    return loss, dlogits


def lm_loss(logits: np.ndarray, targets, mask=None) -> float:
    loss, _ = lm_loss_and_grad(logits, targets, mask)
    return loss


def aligned_lm_rows(logits: np.ndarray, n_prefix: int, tokens) -> tuple[np.ndarray, np.ndarray]:
    """Select logit rows that predict each token of the suffix.

    With a prefix, the last prefix row predicts the first token, so every
    token is a target; without one, the first token has no predictor.
    """
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if n_prefix > 0:
        return logits[n_prefix - 1: n_prefix + ids.size - 1], ids
    return logits[: ids.size - 1], ids[1:]
