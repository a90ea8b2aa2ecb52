"""QA metrics, the end-to-end evaluation runner, and the cost model.

EM follows the KILT convention (normalized string equality against any
gold); F1 is the LongBench-style max token-overlap over golds. The FLOPs
model counts dense-matmul operations exactly as the forward pass performs
them, so an instrumented run of the real model reproduces it.
"""

from __future__ import annotations

import json
import re
import string
import time
from collections import Counter
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

from .compression import ContextCompressor, parse_ratio, round_half_up
from .encoder import chunk_context
from .errors import FlexRagError, InvalidSample
from .micro_lm import ModelConfig
from .retrieval import Corpus, LexicalIndex, RelevanceScorer
from .system import RagSystem
from .training import QASample


# -- metrics -------------------------------------------------------------------


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in string.punctuation)
    s = re.sub(r"\b(a|an|the)\b", " ", s)
    return " ".join(s.split())


def exact_match(prediction: str, golds: list[str]) -> int:
    if not golds:
        raise InvalidSample("exact_match needs at least one gold answer")
    norm = normalize_answer(prediction)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds: list[str]) -> float:
    if not golds:
        raise InvalidSample("f1_score needs at least one gold answer")
    return max(_f1_single(prediction, g) for g in golds)


# -- generation ------------------------------------------------------------------


def fit_prefix(rows: np.ndarray | None, window: int, reserved: int):
    """Drop tail rows so reserved token positions still fit the window."""
    if rows is None:
        return None
    room = max(0, window - reserved)
    if rows.shape[0] > room:
        rows = rows[:room]
    return rows if rows.shape[0] else None


def greedy_decode(system: RagSystem, prefix: np.ndarray | None,
                  question: str, max_new_tokens: int = 16) -> str:
    vocab = system.vocab
    toks = [vocab.q_id] + vocab.tokenize(question) + [vocab.a_id]
    prefix = fit_prefix(prefix, system.config.window,
                        len(toks) + max_new_tokens)
    gen: list[int] = []
    n_pre = 0 if prefix is None else prefix.shape[0]
    for _ in range(max_new_tokens):
        if n_pre + len(toks) + len(gen) >= system.config.window:
            break
        logits = system.lm.forward(toks + gen, prefix=prefix).logits
        nxt = int(np.argmax(logits[-1]))
        if nxt == vocab.eos_id:
            break
        gen.append(nxt)
    return vocab.detokenize(gen)


# -- evaluation -------------------------------------------------------------------


@dataclass
class CompressSettings:
    estimator: str = "none"          # none | token | sentence
    ratio: str = "8x"
    hp_config: str = "1/16:1x"

    @property
    def alpha(self) -> Fraction:
        return parse_ratio(self.ratio)


@dataclass
class EvalReport:
    dataset_id: str
    config: dict
    records: list[dict]
    aggregates: dict
    runtime: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        # deterministic content only; wall times live in the csv
        return {"dataset_id": self.dataset_id, "config": self.config,
                "aggregates": self.aggregates,
                "records": [{k: r[k] for k in
                             ("id", "prediction", "em", "f1", "error")}
                            for r in self.records]}


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jpath = out / "report.json"
    with open(jpath, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, sort_keys=True, indent=1)
    cpath = out / "report.csv"
    with open(cpath, "w", encoding="utf-8") as f:
        f.write("id,em,f1,wall_ms,error\n")
        for r in report.records:
            em = "" if r["em"] is None else r["em"]
            f1 = "" if r["f1"] is None else f"{r['f1']:.6f}"
            f.write(f"{r['id']},{em},{f1},{r['wall_ms']:.3f},{r['error']}\n")
    return jpath, cpath


def evaluate_qa(system: RagSystem, dataset: list[QASample],
                index: LexicalIndex | None = None,
                corpus: Corpus | None = None,
                settings: CompressSettings | None = None,
                top_k: int = 5, max_new_tokens: int = 16,
                scorer: RelevanceScorer | None = None,
                out_dir=None, dataset_id: str = "dataset",
                closed_book: bool = False) -> EvalReport:
    """Retrieve, compress, generate, and score each sample; per-sample
    failures are recorded instead of aborting the run."""
    if not dataset:
        raise InvalidSample("empty evaluation dataset")
    settings = settings or CompressSettings()
    compressor = ContextCompressor(system.encoder, system.lm, system.vocab,
                                   scorer=scorer)
    doc_texts = {}
    if corpus is not None:
        doc_texts = {d: t for d, _ti, t in corpus.documents}

    records = []
    t_start = time.perf_counter()
    for sample in sorted(dataset, key=lambda s: s.id):
        t0 = time.perf_counter()
        rec = {"id": sample.id, "prediction": "", "em": None, "f1": None,
               "error": "", "wall_ms": 0.0, "compressed_len": 0}
        try:
            docs = [] if closed_book else list(sample.retrieved_docs)
            if not docs and not closed_book and index is not None:
                hits = index.search(sample.question, top_k)
                docs = [(d, doc_texts.get(d, "")) for d, _s in hits]
                docs = [(d, t) for d, t in docs if t]
            prefix = None
            if docs:
                compressed = compressor.compress(
                    docs, settings.alpha, estimator=settings.estimator,
                    task_prompt=sample.question, hp_config=settings.hp_config)
                prefix = compressed.rows
                rec["compressed_len"] = len(compressed)
            pred = greedy_decode(system, prefix, sample.question,
                                 max_new_tokens=max_new_tokens)
            rec["prediction"] = pred
            rec["em"] = exact_match(pred, sample.answers)
            rec["f1"] = round(f1_score(pred, sample.answers), 6)
        except FlexRagError as e:
            rec["error"] = f"{type(e).__name__}: {e}"
        rec["wall_ms"] = (time.perf_counter() - t0) * 1000.0
        records.append(rec)

    scored = [r for r in records if r["error"] == ""]
    aggregates = {
        "n": len(records), "n_scored": len(scored),
        "em": round(100.0 * float(np.mean([r["em"] for r in scored])), 4) if scored else 0.0,
        "f1": round(100.0 * float(np.mean([r["f1"] for r in scored])), 4) if scored else 0.0,
    }
    runtime = {"total_s": time.perf_counter() - t_start}
    report = EvalReport(dataset_id=dataset_id,
                        config={"settings": asdict(settings), "top_k": top_k,
                                "max_new_tokens": max_new_tokens,
                                "closed_book": closed_book,
                                "model": system.config.to_dict()},
                        records=records, aggregates=aggregates, runtime=runtime)
    if out_dir is not None:
        write_report(report, out_dir)
    return report


# -- cost model --------------------------------------------------------------------


def _layer_matmul_flops(s: int, d: int) -> int:
    proj = 4 * 2 * s * d * d            # q, k, v, o projections
    scores = 2 * 2 * s * s * d          # QK^T plus attention-times-V
    mlp = 2 * 2 * s * d * 4 * d         # both MLP projections
    return proj + scores + mlp


def flops_estimate(config: ModelConfig, context_len: int, question_len: int,
                   answer_len: int, alpha) -> tuple[int, int]:
    """(online, offline) dense-matmul FLOPs for one query.

    Offline encodes the context in window-sized chunks through the first
    n_enc_layers; online runs the full depth plus the output head over the
    compressed prefix, question, and answer.
    """
    alpha = parse_ratio(alpha)
    d, v = config.d_model, config.vocab_size
    offline = 0
    if context_len > 0:
        remaining = context_len
        while remaining > 0:
            s = min(config.window, remaining)
            offline += config.n_enc_layers * _layer_matmul_flops(s, d)
            remaining -= s
    k = round_half_up(alpha * context_len)
    s_online = k + question_len + answer_len
    online = config.n_layers * _layer_matmul_flops(s_online, d)
    online += 2 * s_online * d * v      # output head
    return online, offline


@dataclass
class CostReport:
    """Per-ratio cost rows, ordered by keep fraction descending."""
    rows: list[dict]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            f.write("alpha,online_flops,offline_flops,wall_ms_median,em\n")
            for r in self.rows:
                em = "" if r.get("em") is None else f"{r['em']:.4f}"
                f.write(f"{r['alpha']:.6g},{r['online_flops']},"
                        f"{r['offline_flops']},{r['wall_ms_median']:.3f},{em}\n")
        return path


def benchmark_walltime(system: RagSystem, context_len: int, question_len: int,
                       answer_len: int, alphas, repetitions: int = 5,
                       warmup: int = 1, seed: int = 0,
                       ems: dict | None = None) -> CostReport:
    """Median online wall time per keep fraction on one fixed workload."""
    rng = np.random.default_rng(seed)
    cfg = system.config
    q_and_a = rng.integers(0, cfg.vocab_size,
                           size=question_len + answer_len).tolist()
    alphas = sorted((parse_ratio(a) for a in alphas), reverse=True)
    rows = []
    for alpha in alphas:
        k = round_half_up(alpha * context_len)
        prefix = rng.normal(0.0, 0.5, size=(k, cfg.d_model)).astype(cfg.dtype)
        if k + len(q_and_a) > cfg.window:
            raise InvalidSample(
                f"workload needs window >= {k + len(q_and_a)}")
        times = []
        for rep in range(warmup + repetitions):
            t0 = time.perf_counter()
            system.lm.forward(q_and_a, prefix=prefix if k else None)
            dt = (time.perf_counter() - t0) * 1000.0
            if rep >= warmup:
                times.append(dt)
        online, offline = flops_estimate(cfg, context_len, question_len,
                                         answer_len, alpha)
        rows.append({
            "alpha": float(alpha), "online_flops": online,
            "offline_flops": offline,
            "wall_ms_median": float(np.median(times)),
            "em": None if not ems else ems.get(float(alpha)),
        })
    return CostReport(rows)
