"""Importance estimation, stepped ratio allocation, and down-sampling.

Keep fractions and budgets are exact rationals so the budget identity
``sum(w_g * n_g) = alpha * n`` solves without float drift. Down-sampling is
window-final: inside every sampling window the last (causally most
informed) row survives. Tie-breaks in importance ranking go to the earlier
token. The user-facing "Nx" compression ratio maps to keep fraction 1/N.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .encoder import Chunk, CompressiveEmbeddings, chunk_context, encode_context
from .errors import (BudgetTooSmall, EmptyContext, InfeasibleAllocation,
                     InvalidArgument)
from .micro_lm import MicroLM, Vocab
from .retrieval import RelevanceScorer

RatioLike = "str | float | int | Fraction"


def parse_ratio(value) -> Fraction:
    """Keep fraction in (0, 1]; "8x" means keep 1/8."""
    if isinstance(value, str):
        s = value.strip().lower()
        if s.endswith("x"):
            try:
                factor = Fraction(s[:-1])
            except (ValueError, ZeroDivisionError):
                raise InvalidArgument(f"invalid ratio {value!r}")
            if factor <= 0:
                raise InvalidArgument(f"invalid ratio {value!r}")
            alpha = 1 / factor
        else:
            try:
                alpha = Fraction(s)
            except (ValueError, ZeroDivisionError):
                raise InvalidArgument(f"invalid ratio {value!r}")
    elif isinstance(value, Fraction):
        alpha = value
    elif isinstance(value, (int, float)):
        alpha = Fraction(value).limit_denominator(10 ** 9)
    else:
        raise InvalidArgument(f"invalid ratio {value!r}")
    if not (0 < alpha <= 1):
        raise InvalidArgument(f"keep fraction {alpha} outside (0, 1]")
    return alpha


def parse_hp_config(value: str) -> tuple[Fraction, Fraction]:
    """"PROPORTION:RATIO", e.g. "1/16:1x" = top 1/16 of units kept fully."""
    try:
        prop_s, ratio_s = value.split(":")
        proportion = Fraction(prop_s.strip())
    except (ValueError, ZeroDivisionError):
        raise InvalidArgument(f"invalid hp_config {value!r}")
    if not (0 < proportion < 1):
        raise InvalidArgument(f"hp proportion {proportion} outside (0, 1)")
    return proportion, parse_ratio(ratio_s)


def round_half_up(x: Fraction) -> int:
    return int((Fraction(x) + Fraction(1, 2)).__floor__())


# -- sentences ---------------------------------------------------------------


@dataclass
class SentenceSpan:
    sentence_id: int
    doc_id: str
    token_start: int          # global token index, half-open interval
    token_end: int
    text: str

    @property
    def n_tokens(self) -> int:
        return self.token_end - self.token_start


_BOUNDARY = re.compile(r"[.!?]+(?:\s+|$)")
_WORD = re.compile(r"\S+")


def split_sentences(text: str, vocab: Vocab, window: int,
                    doc_id: str = "") -> list[SentenceSpan]:
    """Split on terminal punctuation followed by whitespace; spans longer
    than window/4 tokens are force-split at word boundaries. Span texts
    concatenate back to the input."""
    max_span = max(1, window // 4)
    cuts = [0]
    for m in _BOUNDARY.finditer(text):
        if m.end() < len(text):
            cuts.append(m.end())
    cuts.append(len(text))
    pieces = [text[a:b] for a, b in zip(cuts, cuts[1:]) if b > a]

    spans: list[SentenceSpan] = []
    tok_at = 0
    for piece in pieces:
        for sub in _force_split(piece, vocab, max_span):
            n = len(vocab.tokenize(sub))
            spans.append(SentenceSpan(
                sentence_id=len(spans), doc_id=doc_id,
                token_start=tok_at, token_end=tok_at + n, text=sub))
            tok_at += n
    return spans


def _force_split(piece: str, vocab: Vocab, max_span: int) -> list[str]:
    if len(vocab.tokenize(piece)) <= max_span:
        return [piece]
    words = list(_WORD.finditer(piece))
    subs: list[str] = []
    start = 0
    count = 0
    for w in words:
        n = len(vocab.tokenize(w.group()))
        if count and count + n > max_span:
            subs.append(piece[start: w.start()])
            start = w.start()
            count = 0
        count += n
    subs.append(piece[start:])
    return [s for s in subs if s]


# -- importance --------------------------------------------------------------


@dataclass
class ImportanceScores:
    granularity: str            # "token" | "sentence"
    unit_ids: list[int]
    scores: list[float]


def token_importance(lm: MicroLM, task_prompt: list[int],
                     context: list[int]) -> ImportanceScores:
    """Per-token probability under the frozen model given the task prompt
    and the token's in-chunk prefix. Long contexts are scored chunk by
    chunk with the prompt re-prepended."""
    context = list(context)
    if not context:
        raise EmptyContext("no context tokens to score")
    prompt = list(task_prompt)
    window = lm.config.window
    room = window - len(prompt)
    if room < 1:
        raise InvalidArgument("task prompt alone fills the model window")

    scores: list[float] = []
    for start in range(0, len(context), room):
        piece = context[start: start + room]
        logits = lm.forward(prompt + piece).logits
        m = logits.max(axis=-1, keepdims=True)
        e = np.exp(logits - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        for j, tok in enumerate(piece):
            row = len(prompt) + j - 1
            if row < 0:
                scores.append(1.0 / lm.config.vocab_size)
            else:
                scores.append(float(probs[row, tok]))
    return ImportanceScores("token", list(range(len(context))), scores)


def sentence_importance(scorer: RelevanceScorer, task_prompt: str,
                        sentences: list[SentenceSpan]) -> ImportanceScores:
    if not sentences:
        raise EmptyContext("no sentences to score")
    ids = [s.sentence_id for s in sentences]
    scores = [scorer.score(task_prompt, s.text) for s in sentences]
    return ImportanceScores("sentence", ids, scores)


# -- allocation ---------------------------------------------------------------


@dataclass
class AllocationGroup:
    unit_ids: list[int]
    keep_fraction: Fraction
    quota: int
    n_tokens: int


@dataclass
class PriorityAllocation:
    """Groups in ascending priority; quotas sum to the budget."""
    granularity: str
    groups: list[AllocationGroup]
    budget: int
    alpha: Fraction


def allocate(scores: ImportanceScores, proportions, keep_fractions,
             alpha, unit_sizes=None) -> PriorityAllocation:
    """Partition ranked units into priority groups and solve the one
    unspecified keep fraction from the budget identity.

    ``proportions`` and ``keep_fractions`` are listed in ascending priority;
    at most one keep fraction is None. Quotas are per-group floors with the
    remainder going to the highest-priority groups first.
    """
    alpha = parse_ratio(alpha)
    proportions = [Fraction(p) for p in proportions]
    g = len(proportions)
    if g < 1 or abs(sum(proportions) - 1) > 0:
        raise InvalidArgument("group proportions must sum to 1")
    if len(keep_fractions) != g:
        raise InvalidArgument("one keep fraction per group required")
    unknown = [i for i, w in enumerate(keep_fractions) if w is None]
    if len(unknown) > 1:
        raise InvalidArgument("at most one keep fraction may be unspecified")
    fractions: list[Fraction | None] = [
        None if w is None else parse_ratio(w) for w in keep_fractions]

    units = list(scores.unit_ids)
    if unit_sizes is None:
        sizes = [1] * len(units)
    else:
        sizes = [int(s) for s in unit_sizes]
    if len(sizes) != len(units):
        raise InvalidArgument("unit_sizes must align with unit_ids")
    n = sum(sizes)
    if n == 0:
        raise EmptyContext("no tokens to allocate")
    if alpha * n < g:
        raise BudgetTooSmall(f"budget {float(alpha * n):.2f} < {g} groups")
    budget = min(n, round_half_up(alpha * n))

    order = sorted(range(len(units)), key=lambda i: (-scores.scores[i], i))

    # fill highest-priority groups first from the top of the ranking
    member_ids: list[list[int]] = [[] for _ in range(g)]
    group_tokens = [0] * g
    cursor = 0
    for gi in range(g - 1, 0, -1):
        target = round_half_up(proportions[gi] * n)
        while cursor < len(order) and group_tokens[gi] < target:
            u = order[cursor]
            member_ids[gi].append(units[u])
            group_tokens[gi] += sizes[u]
            cursor += 1
    while cursor < len(order):
        u = order[cursor]
        member_ids[0].append(units[u])
        group_tokens[0] += sizes[u]
        cursor += 1

    # solve the unspecified fraction exactly
    if unknown:
        ui = unknown[0]
        if group_tokens[ui] == 0:
            raise InfeasibleAllocation("unspecified group received no tokens")
        given = sum(fractions[i] * group_tokens[i] for i in range(g) if i != ui)
        w = (alpha * n - given) / group_tokens[ui]
        if w <= 0:
            raise InfeasibleAllocation(
                f"solved keep fraction {float(w):.4f} is not positive")
        if w > 1:
            if (w - 1) * group_tokens[ui] > g:
                raise InfeasibleAllocation(
                    "clamping the solved fraction to 1 breaks the budget")
            w = Fraction(1)
        fractions[ui] = w
    realized = sum(fractions[i] * group_tokens[i] for i in range(g))
    if abs(realized - alpha * n) > g:
        raise InfeasibleAllocation("keep fractions violate the budget identity")
    for lo, hi in zip(fractions, fractions[1:]):
        if hi < lo:
            raise InfeasibleAllocation("keep fractions must ascend with priority")

    quotas = [int((fractions[i] * group_tokens[i]).__floor__()) for i in range(g)]
    rem = budget - sum(quotas)
    # hand out the remainder: highest priority first, fractional groups first
    for require_frac in (True, False):
        for i in range(g - 1, -1, -1):
            if rem <= 0:
                break
            if require_frac and fractions[i] * group_tokens[i] - quotas[i] <= 0:
                continue
            if quotas[i] < group_tokens[i]:
                add = 1 if require_frac else min(rem, group_tokens[i] - quotas[i])
                quotas[i] += add
                rem -= add
        if rem <= 0:
            break
    while rem < 0:
        for i in range(g):
            if rem >= 0:
                break
            if quotas[i] > 0:
                took = min(quotas[i], -rem)
                quotas[i] -= took
                rem += took

    groups = [AllocationGroup(member_ids[i], fractions[i], quotas[i],
                              group_tokens[i]) for i in range(g)]
    return PriorityAllocation(scores.granularity, groups, budget, alpha)


# -- down-sampling -------------------------------------------------------------


@dataclass
class CompressedContext:
    rows: np.ndarray
    kept_global_indices: np.ndarray
    alpha: Fraction

    def __len__(self) -> int:
        return int(self.rows.shape[0])


def window_final_positions(m: int, quota: int) -> list[int]:
    """Last index of each of ``quota`` near-equal windows over 0..m-1."""
    if quota <= 0:
        return []
    if quota >= m:
        return list(range(m))
    return [(j + 1) * m // quota - 1 for j in range(quota)]


def interval_positions(m: int, r: int) -> list[int]:
    """Window-final rule at a fixed interval r, keeping a partial tail row."""
    kept = list(range(r - 1, m, r))
    if m % r != 0:
        kept.append(m - 1)
    return kept


def uniform_downsample(embeddings: CompressiveEmbeddings,
                       alpha) -> CompressedContext:
    alpha = parse_ratio(alpha)
    L = len(embeddings)
    r = max(1, round_half_up(1 / alpha))
    kept = np.asarray(interval_positions(L, r), dtype=np.int64)
    sub = embeddings.select(kept)
    return CompressedContext(sub.rows, sub.global_token_index.astype(np.int64),
                             alpha)


def downsample(embeddings: CompressiveEmbeddings,
               allocation: PriorityAllocation) -> CompressedContext:
    """Keep ``quota`` window-final rows inside each priority group; output
    rows stay in source order and total exactly the budget."""
    L = len(embeddings)
    order = np.argsort(embeddings.global_token_index, kind="stable")
    by_global = {int(embeddings.global_token_index[i]): int(i) for i in order}

    kept_globals: list[int] = []
    for grp in allocation.groups:
        if allocation.granularity == "token":
            positions = sorted(int(u) for u in grp.unit_ids)
        else:
            members = set(int(u) for u in grp.unit_ids)
            positions = sorted(
                int(gt) for gt, sid in zip(embeddings.global_token_index,
                                           embeddings.sentence_id)
                if int(sid) in members)
        if grp.quota > len(positions):
            raise InfeasibleAllocation(
                f"quota {grp.quota} exceeds group of {len(positions)} tokens")
        kept_globals.extend(positions[j]
                            for j in window_final_positions(len(positions), grp.quota))
    kept_globals.sort()
    if len(kept_globals) != allocation.budget:
        raise InfeasibleAllocation(
            f"kept {len(kept_globals)} rows, budget {allocation.budget}")
    rows_idx = np.asarray([by_global[gt] for gt in kept_globals], dtype=np.int64)
    sub = embeddings.select(rows_idx)
    return CompressedContext(sub.rows, np.asarray(kept_globals, dtype=np.int64),
                             allocation.alpha)


# -- end-to-end compressor -----------------------------------------------------


@dataclass
class AssembledContext:
    tokens: list[int]
    chunks: list[Chunk]
    sentence_ids: np.ndarray | None
    spans: list[SentenceSpan]


def assemble_context(docs, vocab: Vocab, window: int,
                     with_sentences: bool) -> AssembledContext:
    """Tokenize and chunk retrieved docs in order; per-doc chunking keeps
    every chunk inside one document."""
    tokens: list[int] = []
    chunks: list[Chunk] = []
    spans: list[SentenceSpan] = []
    sids: list[int] = []
    for doc_id, text in docs:
        if with_sentences:
            local = split_sentences(text, vocab, window, doc_id=doc_id)
            doc_tokens: list[int] = []
            for sp in local:
                stoks = vocab.tokenize(sp.text)
                gid = len(spans)
                spans.append(SentenceSpan(
                    sentence_id=gid, doc_id=doc_id,
                    token_start=len(tokens) + len(doc_tokens),
                    token_end=len(tokens) + len(doc_tokens) + len(stoks),
                    text=sp.text))
                sids.extend([gid] * len(stoks))
                doc_tokens.extend(stoks)
        else:
            doc_tokens = vocab.tokenize(text)
            sids.extend([-1] * len(doc_tokens))
        if not doc_tokens:
            continue
        chunks.extend(chunk_context(doc_tokens, window, doc_id=doc_id,
                                    global_base=len(tokens)))
        tokens.extend(doc_tokens)
    if not tokens:
        raise EmptyContext("retrieved documents contain no tokens")
    sentence_ids = np.asarray(sids, dtype=np.int32) if with_sentences else None
    return AssembledContext(tokens, chunks, sentence_ids, spans)


class ContextCompressor:
    """phi: encode retrieved docs, estimate importance, down-sample to the
    requested budget."""

    def __init__(self, encoder: MicroLM, lm: MicroLM, vocab: Vocab,
                 scorer: RelevanceScorer | None = None):
        self.encoder = encoder
        self.lm = lm
        self.vocab = vocab
        self.scorer = scorer or RelevanceScorer()

    def compress(self, docs, alpha, estimator: str = "none",
                 task_prompt: str = "", hp_config: str = "1/16:1x") -> CompressedContext:
        alpha = parse_ratio(alpha)
        if estimator not in ("none", "token", "sentence"):
            raise InvalidArgument(f"unknown estimator {estimator!r}")
        ctx = assemble_context(docs, self.vocab, self.encoder.config.window,
                               with_sentences=(estimator == "sentence"))
        emb = encode_context(self.encoder, ctx.chunks,
                             sentence_ids=ctx.sentence_ids)
        L = len(emb)
        k = min(L, round_half_up(alpha * L))
        if k >= L:
            return CompressedContext(emb.rows,
                                     emb.global_token_index.astype(np.int64),
                                     alpha)
        if estimator == "none":
            kept = np.asarray(window_final_positions(L, k), dtype=np.int64)
            sub = emb.select(kept)
            return CompressedContext(sub.rows,
                                     sub.global_token_index.astype(np.int64),
                                     alpha)

        proportion, w_hp = parse_hp_config(hp_config)
        if estimator == "token":
            prompt_ids = self.vocab.tokenize(task_prompt)
            scores = token_importance(self.lm, prompt_ids, ctx.tokens)
            sizes = None
        else:
            scores = sentence_importance(self.scorer, task_prompt, ctx.spans)
            sizes = [sp.n_tokens for sp in ctx.spans]
        alloc = allocate(scores, [1 - proportion, proportion], [None, w_hp],
                         alpha, unit_sizes=sizes)
        return downsample(emb, alloc)


def compress(encoder: MicroLM, lm: MicroLM, vocab: Vocab, docs, alpha,
             estimator: str = "none", task_prompt: str = "",
             hp_config: str = "1/16:1x",
             scorer: RelevanceScorer | None = None) -> CompressedContext:
    return ContextCompressor(encoder, lm, vocab, scorer).compress(
        docs, alpha, estimator=estimator, task_prompt=task_prompt,
        hp_config=hp_config)
