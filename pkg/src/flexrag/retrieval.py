"""Corpus ingestion, a BM25 inverted index with persistence, and the
relevance oracle used for sentence importance."""

from __future__ import annotations

import json
import math
import string
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicateId, EmptyCorpus, InvalidArgument, IoError
from .micro_lm import MicroLM, Vocab

INDEX_MAGIC = b"FXIX"
INDEX_VERSION = 1

_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def search_tokens(text: str) -> list[str]:
    """Lowercase, punctuation to spaces, whitespace split."""
    return text.lower().translate(_PUNCT_TABLE).split()


@dataclass
class Corpus:
    documents: list[tuple[str, str, str]]   # (doc_id, title, text)
    manifest: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = set()
        for doc_id, _, _ in self.documents:
            if doc_id in seen:
                raise DuplicateId(f"duplicate doc_id {doc_id!r}")
            seen.add(doc_id)
        if not self.manifest:
            import hashlib
            self.manifest = {
                d: hashlib.sha256(t.encode("utf-8")).hexdigest()
                for d, _, t in self.documents
            }

    def __len__(self) -> int:
        return len(self.documents)

    def text_of(self, doc_id: str) -> str:
        for d, _, t in self.documents:
            if d == doc_id:
                return t
        raise KeyError(doc_id)


def load_corpus_jsonl(path) -> Corpus:
    docs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            docs.append((str(rec["doc_id"]), str(rec.get("title", "")),
                         str(rec["text"])))
    return Corpus(docs)


class LexicalIndex:
    """Okapi BM25 with the +1 idf variant (always positive)."""

    def __init__(self, k1: float = 1.2, b: float = 0.75):
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[str, int]]] = {}
        self.doc_lengths: dict[str, int] = {}
        self.avg_doc_len = 0.0

    @property
    def n_docs(self) -> int:
        return len(self.doc_lengths)

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        n = self.n_docs
        return math.log((n - df + 0.5) / (df + 0.5) + 1.0)

    def score(self, doc_id: str, query_terms: list[str]) -> float:
        dl = self.doc_lengths[doc_id]
        norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len)
        total = 0.0
        for term in query_terms:
            plist = self.postings.get(term)
            if not plist:
                continue
            tf = 0
            for d, f in plist:
                if d == doc_id:
                    tf = f
                    break
            if tf == 0:
                continue
            total += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm)
        return total

    def search(self, query: str, top_k: int) -> list[tuple[str, float]]:
        """At most top_k (doc_id, score); non-increasing, ties by doc_id."""
        if top_k < 1:
            raise InvalidArgument("top_k must be >= 1")
        terms = search_tokens(query)
        candidates: dict[str, float] = {}
        for term in set(terms):
            mult = terms.count(term)
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for doc_id, tf in plist:
                dl = self.doc_lengths[doc_id]
                norm = self.k1 * (1.0 - self.b + self.b * dl / self.avg_doc_len)
                part = idf * tf * (self.k1 + 1.0) / (tf + norm)
                candidates[doc_id] = candidates.get(doc_id, 0.0) + mult * part
        ranked = sorted(candidates.items(), key=lambda kv: (-kv[1], kv[0]))
        return ranked[:top_k]

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        doc_ids = sorted(self.doc_lengths)
        doc_pos = {d: i for i, d in enumerate(doc_ids)}
        parts = [INDEX_MAGIC, struct.pack("<I", INDEX_VERSION),
                 struct.pack("<dd", self.k1, self.b),
                 struct.pack("<I", len(doc_ids))]
        for d in doc_ids:
            raw = d.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack("<I", self.doc_lengths[d]))
        terms = sorted(self.postings)
        parts.append(struct.pack("<I", len(terms)))
        for t in terms:
            raw = t.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            plist = self.postings[t]
            parts.append(struct.pack("<I", len(plist)))
            for doc_id, tf in plist:
                parts.append(struct.pack("<II", doc_pos[doc_id], tf))
        try:
            with open(path, "wb") as f:
                f.write(b"".join(parts))
        except OSError as e:
            raise IoError(f"cannot write index {path}: {e}") from e

    @classmethod
    def load(cls, path) -> "LexicalIndex":
        try:
            with open(path, "rb") as f:
                data = f.read()
        except OSError as e:
            raise IoError(f"cannot read index {path}: {e}") from e
        if data[:4] != INDEX_MAGIC:
            raise IoError(f"{path}: not an index file")
        (version,) = struct.unpack("<I", data[4:8])
        if version != INDEX_VERSION:
            raise IoError(f"{path}: index version {version} != {INDEX_VERSION}")
        k1, b = struct.unpack("<dd", data[8:24])
        idx = cls(k1=k1, b=b)
        off = 24
        (n_docs,) = struct.unpack("<I", data[off: off + 4]); off += 4
        doc_ids = []
        for _ in range(n_docs):
            (nlen,) = struct.unpack("<I", data[off: off + 4]); off += 4
            d = data[off: off + nlen].decode("utf-8"); off += nlen
            (dl,) = struct.unpack("<I", data[off: off + 4]); off += 4
            idx.doc_lengths[d] = dl
            doc_ids.append(d)
        (n_terms,) = struct.unpack("<I", data[off: off + 4]); off += 4
        for _ in range(n_terms):
            (nlen,) = struct.unpack("<I", data[off: off + 4]); off += 4
            t = data[off: off + nlen].decode("utf-8"); off += nlen
            (np_,) = struct.unpack("<I", data[off: off + 4]); off += 4
            plist = []
            for _ in range(np_):
                pos, tf = struct.unpack("<II", data[off: off + 8]); off += 8
                plist.append((doc_ids[pos], tf))
            idx.postings[t] = plist
        total = sum(idx.doc_lengths.values())
        idx.avg_doc_len = total / max(1, len(idx.doc_lengths))
        return idx


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> LexicalIndex:
    if len(corpus) == 0:
        raise EmptyCorpus("cannot index an empty corpus")
    idx = LexicalIndex(k1=k1, b=b)
    postings: dict[str, list[tuple[str, int]]] = {}
    for doc_id, title, text in corpus.documents:
        terms = search_tokens(title + " " + text if title else text)
        idx.doc_lengths[doc_id] = len(terms)
        for term, tf in Counter(terms).items():
            postings.setdefault(term, []).append((doc_id, tf))
    for term in postings:
        postings[term].sort(key=lambda p: p[0])
    idx.postings = postings
    idx.avg_doc_len = sum(idx.doc_lengths.values()) / len(idx.doc_lengths)
    return idx


# -- relevance oracle --------------------------------------------------------


def _tfidf_pair_vectors(a_terms: list[str], b_terms: list[str]):
    """tf-idf over the two-text mini collection (smooth idf, as in common
    vectorizers): idf = ln((1+N)/(1+df)) + 1 with N=2."""
    vocab = sorted(set(a_terms) | set(b_terms))
    ca, cb = Counter(a_terms), Counter(b_terms)
    va = np.zeros(len(vocab))
    vb = np.zeros(len(vocab))
    for i, t in enumerate(vocab):
        df = int(t in ca) + int(t in cb)
        idf = math.log(3.0 / (1.0 + df)) + 1.0
        va[i] = ca.get(t, 0) * idf
        vb[i] = cb.get(t, 0) * idf
    return va, vb


@dataclass
class RelevanceScorer:
    """M(query, sentence): lexical tf-idf cosine by default, or cosine of
    mean-pooled final-layer states of a frozen model."""

    mode: str = "lexical_cosine"
    model: MicroLM | None = None
    vocab: Vocab | None = None

    def score(self, text_a: str, text_b: str) -> float:
        if self.mode == "lexical_cosine":
            ta, tb = search_tokens(text_a), search_tokens(text_b)
            if not ta or not tb:
                return 0.0
            va, vb = _tfidf_pair_vectors(ta, tb)
            na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
            if na == 0.0 or nb == 0.0:
                return 0.0
            return float(va @ vb / (na * nb))
        if self.mode == "toy_embedding":
            if self.model is None or self.vocab is None:
                raise InvalidArgument("toy_embedding mode needs a model and vocab")
            ea = self._embed(text_a)
            eb = self._embed(text_b)
            if ea is None or eb is None:
                return 0.0
            na, nb = float(np.linalg.norm(ea)), float(np.linalg.norm(eb))
            if na == 0.0 or nb == 0.0:
                return 0.0
            return float(ea @ eb / (na * nb))
        raise InvalidArgument(f"unknown relevance mode {self.mode!r}")

    def _embed(self, text: str):
        ids = self.vocab.tokenize(text)[: self.model.config.window]
        if not ids:
            return None
        res = self.model.forward(ids)
        return res.hidden_states[-1].mean(axis=0).astype(np.float64)


def relevance_score(scorer: RelevanceScorer, text_a: str, text_b: str) -> float:
    return scorer.score(text_a, text_b)
