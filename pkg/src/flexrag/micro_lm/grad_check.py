"""Central-difference verification of the analytic gradients."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgument
from .model import MicroLM, aligned_lm_rows, lm_loss_and_grad


def _loss_of(model: MicroLM, tokens, prefix) -> float:
    res = model.forward(tokens, prefix=prefix)
    rows, targets = aligned_lm_rows(res.logits, 0 if prefix is None else len(prefix), tokens)
    loss, _ = lm_loss_and_grad(rows, targets)
    return loss


def grad_check(model: MicroLM, sample, epsilon: float,
               coords_per_param: int = 6, seed: int = 0,
               check_prefix: bool = True) -> float:
    """Worst relative error, analytic vs numeric, over sampled coordinates.

    ``sample`` is ``(tokens, prefix)`` where prefix may be None; the checked
    loss is next-token NLL over the tokens. Relative error uses the
    denominator ``max(|analytic|, |numeric|, 1)`` so near-zero gradients are
    compared absolutely. Requires a float64 model.
    """
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    if model.dtype != np.float64:
        raise InvalidArgument("grad_check needs a float64 model")
    tokens, prefix = sample
    targets_exist = (prefix is not None and len(tokens) >= 1) or len(tokens) >= 2
    if not targets_exist:
        raise InvalidArgument("sample too short to form a next-token loss")

    checked = model.trainable()
    if not checked and not (check_prefix and prefix is not None):
        return 0.0

    model.zero_grads()
    n_pre = 0 if prefix is None else len(prefix)
    res = model.forward(tokens, prefix=prefix, want_cache=True)
    rows, targets = aligned_lm_rows(res.logits, n_pre, tokens)
    _, drows = lm_loss_and_grad(rows, targets)
    dlogits = np.zeros_like(res.logits)
    if n_pre > 0:
        dlogits[n_pre - 1: n_pre + len(targets) - 1] = drows
    else:
        dlogits[: len(targets)] = drows
    d_input = model.backward(res.cache, dlogits=dlogits)

    rng = np.random.default_rng(seed)
    worst = 0.0

    def rel(a: float, n: float) -> float:
        return abs(a - n) / max(abs(a), abs(n), 1.0)

    for p in checked:
        flat_idx = rng.choice(p.values.size,
                              size=min(coords_per_param, p.values.size),
                              replace=False)
        for i in flat_idx:
            orig = p.values.flat[i]
            p.values.flat[i] = orig + epsilon
            up = _loss_of(model, tokens, prefix)
            p.values.flat[i] = orig - epsilon
            down = _loss_of(model, tokens, prefix)
            p.values.flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, rel(p.grad.flat[i], numeric))

    if check_prefix and prefix is not None and n_pre:
        d_prefix = d_input[:n_pre]
        pref = np.array(prefix, dtype=np.float64)
        flat_idx = rng.choice(pref.size, size=min(coords_per_param, pref.size),
                              replace=False)
        for i in flat_idx:
            orig = pref.flat[i]
            pref.flat[i] = orig + epsilon
            up = _loss_of(model, tokens, pref)
            pref.flat[i] = orig - epsilon
            down = _loss_of(model, tokens, pref)
            pref.flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            worst = max(worst, rel(d_prefix.flat[i], numeric))

    return worst
