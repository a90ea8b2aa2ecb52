"""Two-stage encoder training with the downstream model frozen.

Stage 1 runs two-stream language modeling: every chunk of a sample is
encoded once up front, then each chunk's tokens are scored conditioned on
the uniformly down-sampled embeddings of all preceding chunks. Stage 2
fine-tunes on QA samples, masking the loss to answer tokens. A dynamic
keep fraction is drawn per sample; selective estimators are inference-only.
Per-step RNG is derived from (seed, stage, step), so interrupted runs
resume bit-exactly from any checkpoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .compression import assemble_context, interval_positions, parse_ratio, round_half_up
from .encoder import chunk_context, encode_context
from .errors import InvalidConfig, InvalidSample
from .micro_lm import Adam, MicroLM, aligned_lm_rows, cosine_lr, lm_loss_and_grad
from .micro_lm.checkpoint import Checkpoint, load_checkpoint
from .system import RagSystem

DEFAULT_RATIO_POOL = (Fraction(1), Fraction(1, 2), Fraction(1, 4), Fraction(1, 8))


@dataclass
class PretrainSample:
    id: str
    tokens: list[int]

    def __post_init__(self) -> None:
        if len(self.tokens) < 2:
            raise InvalidSample(f"pretrain sample {self.id!r} shorter than 2 tokens")


@dataclass
class QASample:
    id: str
    question: str
    answers: list[str]
    retrieved_docs: list[tuple[str, str]] = field(default_factory=list)
    gold_doc_id: str | None = None

    def __post_init__(self) -> None:
        if not self.answers:
            raise InvalidSample(f"QA sample {self.id!r} has no answers")


@dataclass
class TrainConfig:
    stage: str = "both"                  # pretrain | finetune | both
    steps_pretrain: int = 200
    steps_finetune: int = 200
    batch_size: int = 4
    ratio_pool: tuple = DEFAULT_RATIO_POOL
    seed: int = 0
    checkpoint_every: int = 100
    lr: float = 1e-3
    lr_min_frac: float = 0.1
    chunk_tokens: int | None = None      # pretrain chunk size; window//4 if unset

    def validate(self) -> None:
        if self.stage not in ("pretrain", "finetune", "both"):
            raise InvalidConfig(f"unknown stage {self.stage!r}")
        if not self.ratio_pool:
            raise InvalidConfig("ratio_pool is empty")
        for r in self.ratio_pool:
            parse_ratio(r)
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise InvalidConfig("batch_size and checkpoint_every must be >= 1")

    def stages(self) -> list[tuple[str, int]]:
        out = []
        if self.stage in ("pretrain", "both"):
            out.append(("pretrain", self.steps_pretrain))
        if self.stage in ("finetune", "both"):
            out.append(("finetune", self.steps_finetune))
        return out


def load_pretrain_jsonl(path, vocab, window: int) -> list[PretrainSample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            toks = vocab.tokenize(str(rec["text"]))[:window]
            if len(toks) >= 2:
                out.append(PretrainSample(str(rec["id"]), toks))
    return out


def load_qa_jsonl(path) -> list[QASample]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            docs = [(str(d["doc_id"]), str(d["text"])) for d in rec.get("docs", [])]
            out.append(QASample(str(rec["id"]), str(rec["question"]),
                                [str(a) for a in rec["answers"]], docs,
                                rec.get("gold_doc_id")))
    return out


def sample_dynamic_ratio(rng: np.random.Generator, ratio_pool=DEFAULT_RATIO_POOL) -> Fraction:
    if not ratio_pool:
        raise InvalidConfig("ratio_pool is empty")
    return parse_ratio(ratio_pool[int(rng.integers(len(ratio_pool)))])


def _step_rng(seed: int, stream: int, step: int) -> np.random.Generator:
    # stream 0 is base-model training; encoder stages use stage_index + 1
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(stream, step))
    return np.random.default_rng(ss)


# -- training steps -----------------------------------------------------------


def pretrain_step(system: RagSystem, sample: PretrainSample, ratio,
                  chunk_tokens: int | None = None, train: bool = True) -> float:
    """Two-stream LM loss; gradients reach only encoder parameters."""
    ratio = parse_ratio(ratio)
    window = system.config.window
    chunk_tokens = chunk_tokens or max(2, window // 4)
    chunks = chunk_context(sample.tokens, chunk_tokens, doc_id=sample.id)
    enc_res = [system.encoder.forward(c.tokens, want_cache=train) for c in chunks]
    enc_rows = [r.hidden_states[-1] for r in enc_res]
    r_int = max(1, round_half_up(1 / ratio))

    counts = [max(0, len(chunks[0].tokens) - 1)]
    counts += [len(c.tokens) for c in chunks[1:]]
    total = sum(counts)
    if total == 0:
        raise InvalidSample(f"sample {sample.id!r} yields no LM targets")

    d_enc = [np.zeros_like(rows) for rows in enc_rows] if train else None
    loss_sum = 0.0
    for i, chunk in enumerate(chunks):
        if i == 0:
            prefix, kept = None, None
        else:
            stacked = np.concatenate(enc_rows[:i], axis=0)
            kept = interval_positions(stacked.shape[0], r_int)
            prefix = stacked[kept]
        if counts[i] == 0:
            continue
        res = system.lm.forward(chunk.tokens, prefix=prefix, want_cache=train)
        n_pre = 0 if prefix is None else prefix.shape[0]
        rows, targets = aligned_lm_rows(res.logits, n_pre, chunk.tokens)
        loss_i, drows = lm_loss_and_grad(rows, targets)
        loss_sum += loss_i * counts[i]
        if not train:
            continue
        dlogits = np.zeros_like(res.logits)
        scalef = counts[i] / total
        if n_pre > 0:
            dlogits[n_pre - 1: n_pre + len(targets) - 1] = drows * scalef
        else:
            dlogits[: len(targets)] = drows * scalef
        d_input = system.lm.backward(res.cache, dlogits=dlogits)
        if n_pre > 0:
            d_prefix = d_input[:n_pre]
            offsets = np.cumsum([0] + [rows_.shape[0] for rows_ in enc_rows[:i]])
            for kidx, grad_row in zip(kept, d_prefix):
                j = int(np.searchsorted(offsets, kidx, side="right") - 1)
                d_enc[j][kidx - offsets[j]] += grad_row

    if train:
        for j, dj in enumerate(d_enc):
            if np.any(dj):
                system.encoder.backward(enc_res[j].cache, d_last_hidden=dj)
    return loss_sum / total


def finetune_step(system: RagSystem, sample: QASample, ratio,
                  train: bool = True) -> float:
    """Answer-token NLL given the compressed context and the question."""
    ratio = parse_ratio(ratio)
    vocab = system.vocab
    window = system.config.window

    tok_seq = ([vocab.q_id] + vocab.tokenize(sample.question) + [vocab.a_id]
               + vocab.tokenize(sample.answers[0]) + [vocab.eos_id])
    n_ans = len(vocab.tokenize(sample.answers[0])) + 1      # answer + eos
    if len(tok_seq) > window:
        raise InvalidSample(f"sample {sample.id!r} question+answer exceeds window")

    prefix = None
    kept = None
    ctx = None
    enc_res = None
    if sample.retrieved_docs:
        ctx = assemble_context(sample.retrieved_docs, vocab, window,
                               with_sentences=False)
        if train:
            emb, caches = encode_context(system.encoder, ctx.chunks,
                                         want_caches=True)
            enc_res = caches
        else:
            emb = encode_context(system.encoder, ctx.chunks)
        r_int = max(1, round_half_up(1 / ratio))
        kept = interval_positions(len(emb), r_int)
        room = window - len(tok_seq)
        kept = kept[:room]
        prefix = emb.rows[kept] if kept else None

    res = system.lm.forward(tok_seq, prefix=prefix, want_cache=train)
    n_pre = 0 if prefix is None else prefix.shape[0]
    rows, targets = aligned_lm_rows(res.logits, n_pre, tok_seq)
    mask = np.zeros(len(targets), dtype=bool)
    mask[len(targets) - n_ans:] = True
    loss, drows = lm_loss_and_grad(rows, targets, mask)
    if not train:
        return loss

    dlogits = np.zeros_like(res.logits)
    if n_pre > 0:
        dlogits[n_pre - 1: n_pre + len(targets) - 1] = drows
    else:
        dlogits[: len(targets)] = drows
    d_input = system.lm.backward(res.cache, dlogits=dlogits)
    if n_pre > 0:
        d_rows_full = np.zeros((sum(len(c.tokens) for c in ctx.chunks),
                                system.config.d_model), dtype=d_input.dtype)
        d_rows_full[kept] = d_input[:n_pre]
        at = 0
        for cache, chunk in zip(enc_res, ctx.chunks):
            n = len(chunk.tokens)
            dj = d_rows_full[at: at + n]
            if np.any(dj):
                system.encoder.backward(cache, d_last_hidden=dj)
            at += n
    return loss


# -- the workflow --------------------------------------------------------------


_STAGE_TAGS = {"pretrain": "pretrained", "finetune": "finetuned"}


def _scan_checkpoints(out_dir: Path) -> list[tuple[int, int, Path]]:
    found = []
    for p in sorted(out_dir.glob("ckpt-*.fxrg")):
        try:
            ck = load_checkpoint(p)
        except Exception:
            continue
        prog = ck.meta.get("progress", {})
        found.append((int(prog.get("stage_index", -1)),
                      int(prog.get("step", -1)), p))
    return sorted(found)


def run_training(system: RagSystem, config: TrainConfig, datasets: dict,
                 checkpoints_dir, resume: bool = False,
                 log_path=None) -> Checkpoint:
    """Run the enabled stages in order; emit per-step loss log and tagged
    checkpoints. With ``resume=True`` the latest checkpoint in the
    directory is loaded and training continues bit-exactly."""
    config.validate()
    stages = config.stages()
    for stage, _ in stages:
        key = "pretrain" if stage == "pretrain" else "qa"
        if not datasets.get(key):
            raise InvalidConfig(f"stage {stage!r} enabled but dataset {key!r} missing")

    out_dir = Path(checkpoints_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_file = Path(log_path) if log_path else out_dir / "loss_log.csv"
    new_log = not log_file.exists()

    system.freeze_lm()
    optimizer = Adam(system.encoder.trainable())
    chunk_tokens = config.chunk_tokens or max(2, system.config.window // 4)

    start_stage, start_step = 0, 0
    if resume:
        ckpts = _scan_checkpoints(out_dir)
        if ckpts:
            stage_idx, step, path = ckpts[-1]
            ck = load_checkpoint(path)
            system.load_arrays(ck)
            system.restore_optimizer(ck, optimizer)
            start_stage, start_step = stage_idx, step

    rng_note = json.dumps({"seed": config.seed}).encode()
    final_ckpt: Checkpoint | None = None
    with open(log_file, "a", encoding="utf-8") as log:
        if new_log:
            log.write("step,stage,ratio,loss\n")
        for stage_index, (stage, n_steps) in enumerate(stages):
            if stage_index < start_stage:
                continue
            tag = _STAGE_TAGS[stage]
            data = datasets["pretrain" if stage == "pretrain" else "qa"]
            first_step = start_step if stage_index == start_stage else 0
            for step in range(first_step, n_steps):
                rng = _step_rng(config.seed, stage_index + 1, step)
                idx = rng.integers(0, len(data), size=config.batch_size)
                system.encoder.zero_grads()
                for bi in idx:
                    ratio = sample_dynamic_ratio(rng, config.ratio_pool)
                    if stage == "pretrain":
                        loss = pretrain_step(system, data[int(bi)], ratio,
                                             chunk_tokens=chunk_tokens)
                    else:
                        loss = finetune_step(system, data[int(bi)], ratio)
                    log.write(f"{step},{stage},{float(ratio):.6g},{loss:.6f}\n")
                for p in system.encoder.trainable():
                    p.grad /= config.batch_size
                lr = cosine_lr(config.lr, step, n_steps, config.lr_min_frac)
                optimizer.step(lr)
                done = step + 1
                if done % config.checkpoint_every == 0 and done < n_steps:
                    meta = {"progress": {"stage_index": stage_index, "step": done}}
                    system.save(out_dir / f"ckpt-{stage}-{done:06d}.fxrg", tag,
                                optimizer, rng_note, meta)
            meta = {"progress": {"stage_index": stage_index + 1, "step": 0}}
            system.save(out_dir / f"ckpt-{stage}-final.fxrg", tag,
                        optimizer, rng_note, meta)
            final_ckpt = system.to_checkpoint(tag, optimizer, rng_note, meta)
    assert final_ckpt is not None
    return final_ckpt


# -- base model training (plumbing) --------------------------------------------


def train_base_lm(model: MicroLM, samples: list, steps: int,
                  batch_size: int = 4, lr: float = 1e-3, seed: int = 0,
                  lr_min_frac: float = 0.1) -> list[float]:
    """Next-token training of the full model; used to make the downstream
    model competent before it is frozen.

    Each sample is a token list or a ``(tokens, mask)`` pair; a mask limits
    the loss to chosen positions (e.g. answer tokens of a QA demo).
    """
    optimizer = Adam(model.trainable())
    losses = []
    for step in range(steps):
        rng = _step_rng(seed, 0, step)
        idx = rng.integers(0, len(samples), size=batch_size)
        model.zero_grads()
        batch_loss = 0.0
        for bi in idx:
            item = samples[int(bi)]
            toks, mask = item if isinstance(item, tuple) else (item, None)
            toks = toks[: model.config.window]
            m = None
            if mask is not None:
                m = np.asarray(mask[1: len(toks)], dtype=bool)
                if not m.any():      # window truncation ate the masked tail
                    continue
            res = model.forward(toks, want_cache=True)
            rows, targets = aligned_lm_rows(res.logits, 0, toks)
            loss, drows = lm_loss_and_grad(rows, targets, m)
            dlogits = np.zeros_like(res.logits)
            dlogits[: len(targets)] = drows
            model.backward(res.cache, dlogits=dlogits)
            batch_loss += loss
        for p in model.trainable():
            p.grad /= batch_size
        optimizer.step(cosine_lr(lr, step, steps, lr_min_frac))
        losses.append(batch_loss / batch_size)
    return losses


def qa_demo_tokens(vocab, docs_text: str, question: str,
                   answer: str) -> tuple[list[int], np.ndarray]:
    """Raw-token QA demonstration with an answer-only loss mask."""
    head = vocab.tokenize(docs_text) + [vocab.q_id] + vocab.tokenize(question) \
        + [vocab.a_id]
    tail = vocab.tokenize(answer) + [vocab.eos_id]
    toks = head + tail
    mask = np.zeros(len(toks), dtype=bool)
    mask[len(head):] = True
    return toks, mask
