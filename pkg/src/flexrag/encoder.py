"""Chunked context encoding and the offline embedding store.

Retrieved text is split into greedy maximal chunks of the model window, each
chunk is pushed through the first n layers independently (positions restart
at 0 per chunk, so a chunk's rows are a pure function of its tokens), and one
embedding row comes out per input token.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyContext, InvalidArgument, IoError, StaleEntry
from .micro_lm import MicroLM, Vocab

STORE_MAGIC = b"FXEM"
STORE_VERSION = 1


@dataclass
class Chunk:
    doc_id: str
    chunk_index: int
    tokens: list[int]
    global_offset: int


@dataclass
class CompressiveEmbeddings:
    """Per-token encoder outputs with row provenance.

    ``rows[i]`` is the layer-n hidden state of token ``token_ids[i]``;
    ``global_token_index`` is a bijection onto 0..L-1 in source order.
    ``sentence_id`` is -1 where no sentence segmentation was supplied.
    """

    rows: np.ndarray                       # (L, d_model)
    doc_ids: list[str]
    doc_index: np.ndarray                  # (L,) int32, into doc_ids
    chunk_index: np.ndarray                # (L,) int32
    position_in_chunk: np.ndarray          # (L,) int32
    global_token_index: np.ndarray         # (L,) int32
    sentence_id: np.ndarray                # (L,) int32
    token_ids: np.ndarray                  # (L,) int32

    def __len__(self) -> int:
        return int(self.rows.shape[0])

    def row_meta(self, i: int) -> tuple[str, int, int, int, int]:
        return (self.doc_ids[self.doc_index[i]], int(self.chunk_index[i]),
                int(self.position_in_chunk[i]), int(self.global_token_index[i]),
                int(self.sentence_id[i]))

    def select(self, kept: np.ndarray) -> "CompressiveEmbeddings":
        kept = np.asarray(kept, dtype=np.int64)
        return CompressiveEmbeddings(
            rows=self.rows[kept], doc_ids=self.doc_ids,
            doc_index=self.doc_index[kept], chunk_index=self.chunk_index[kept],
            position_in_chunk=self.position_in_chunk[kept],
            global_token_index=self.global_token_index[kept],
            sentence_id=self.sentence_id[kept], token_ids=self.token_ids[kept])


def chunk_context(tokens, window: int, doc_id: str = "",
                  global_base: int = 0) -> list[Chunk]:
    """Greedy maximal chunks; the final chunk holds the remainder."""
    if window < 1:
        raise InvalidArgument("window must be >= 1")
    toks = list(tokens)
    if not toks:
        raise EmptyContext(f"document {doc_id!r} has no tokens")
    out = []
    for ci, start in enumerate(range(0, len(toks), window)):
        piece = toks[start: start + window]
        out.append(Chunk(doc_id=doc_id, chunk_index=ci, tokens=piece,
                         global_offset=global_base + start))
    return out


def encode_context(encoder: MicroLM, chunks: list[Chunk],
                   sentence_ids=None, want_caches: bool = False):
    """Run each chunk through the encoder; one row per token.

    ``sentence_ids`` is an optional per-global-token array aligned with the
    chunks' combined coverage. With ``want_caches`` the per-chunk forward
    caches are returned too, for backpropagation into the encoder.
    """
    if not chunks:
        raise EmptyContext("no chunks to encode")
    blocks, caches = [], []
    for ch in chunks:
        res = encoder.forward(ch.tokens, want_cache=want_caches)
        blocks.append(res.hidden_states[-1])
        caches.append(res.cache)
    rows = np.concatenate(blocks, axis=0)

    doc_ids: list[str] = []
    doc_lookup: dict[str, int] = {}
    L = rows.shape[0]
    doc_index = np.zeros(L, dtype=np.int32)
    chunk_index = np.zeros(L, dtype=np.int32)
    position_in_chunk = np.zeros(L, dtype=np.int32)
    global_token_index = np.zeros(L, dtype=np.int32)
    token_ids = np.zeros(L, dtype=np.int32)
    at = 0
    for ch in chunks:
        n = len(ch.tokens)
        if ch.doc_id not in doc_lookup:
            doc_lookup[ch.doc_id] = len(doc_ids)
            doc_ids.append(ch.doc_id)
        doc_index[at: at + n] = doc_lookup[ch.doc_id]
        chunk_index[at: at + n] = ch.chunk_index
        position_in_chunk[at: at + n] = np.arange(n)
        global_token_index[at: at + n] = ch.global_offset + np.arange(n)
        token_ids[at: at + n] = ch.tokens
        at += n

    if sentence_ids is None:
        sid = np.full(L, -1, dtype=np.int32)
    else:
        sid = np.asarray(sentence_ids, dtype=np.int32)[global_token_index]

    emb = CompressiveEmbeddings(
        rows=rows, doc_ids=doc_ids, doc_index=doc_index,
        chunk_index=chunk_index, position_in_chunk=position_in_chunk,
        global_token_index=global_token_index, sentence_id=sid,
        token_ids=token_ids)
    if want_caches:
        return emb, caches
    return emb


def content_hash(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()


def _pack_embeddings(doc_id: str, doc_hash: bytes, emb: CompressiveEmbeddings) -> bytes:
    rows = np.ascontiguousarray(emb.rows, dtype="<f4")
    L, d = rows.shape
    did = doc_id.encode("utf-8")
    parts = [STORE_MAGIC, struct.pack("<I", STORE_VERSION), doc_hash,
             struct.pack("<II", L, d), rows.tobytes(),
             struct.pack("<I", len(did)), did]
    for arr in (emb.chunk_index, emb.position_in_chunk,
                emb.global_token_index, emb.sentence_id, emb.token_ids):
        parts.append(np.ascontiguousarray(arr, dtype="<i4").tobytes())
    return b"".join(parts)


def stored_size(doc_id: str, L: int, d_model: int) -> int:
    """Exact on-disk byte count of one embedding file."""
    header = 4 + 4 + 32 + 8
    meta = 4 + len(doc_id.encode("utf-8")) + 5 * 4 * L
    return header + L * d_model * 4 + meta


def _unpack_embeddings(data: bytes):
    if data[:4] != STORE_MAGIC:
        raise IoError("not an embedding file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != STORE_VERSION:
        raise IoError(f"embedding format_version {version} != {STORE_VERSION}")
    doc_hash = data[8:40]
    L, d = struct.unpack("<II", data[40:48])
    off = 48
    rows = np.frombuffer(data[off: off + 4 * L * d], dtype="<f4").reshape(L, d).copy()
    off += 4 * L * d
    (nd,) = struct.unpack("<I", data[off: off + 4])
    off += 4
    doc_id = data[off: off + nd].decode("utf-8")
    off += nd
    ints = []
    for _ in range(5):
        ints.append(np.frombuffer(data[off: off + 4 * L], dtype="<i4").copy())
        off += 4 * L
    chunk_index, position_in_chunk, global_token_index, sentence_id, token_ids = ints
    emb = CompressiveEmbeddings(
        rows=rows, doc_ids=[doc_id], doc_index=np.zeros(L, dtype=np.int32),
        chunk_index=chunk_index, position_in_chunk=position_in_chunk,
        global_token_index=global_token_index, sentence_id=sentence_id,
        token_ids=token_ids)
    return doc_hash, emb


@dataclass
class EmbeddingStore:
    """One file per document, keyed and validated by content hash."""

    root: Path
    encoded: int = 0
    cache_hits: int = 0
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoError(f"cannot create store at {self.root}: {e}") from e

    def _path(self, doc_id: str) -> Path:
        key = hashlib.sha256(doc_id.encode("utf-8")).hexdigest()[:24]
        return self.root / f"{key}.fxem"

    def has_current(self, doc_id: str, text: str) -> bool:
        p = self._path(doc_id)
        if not p.exists():
            return False
        with open(p, "rb") as f:
            head = f.read(40)
        return len(head) == 40 and head[8:40] == content_hash(text)

    def put(self, doc_id: str, text: str, emb: CompressiveEmbeddings) -> None:
        try:
            with open(self._path(doc_id), "wb") as f:
                f.write(_pack_embeddings(doc_id, content_hash(text), emb))
        except OSError as e:
            raise IoError(f"cannot write {self._path(doc_id)}: {e}") from e

    def get(self, doc_id: str, text: str) -> CompressiveEmbeddings:
        p = self._path(doc_id)
        if not p.exists():
            raise IoError(f"no stored embeddings for {doc_id!r}")
        with open(p, "rb") as f:
            stored_hash, emb = _unpack_embeddings(f.read())
        if stored_hash != content_hash(text):
            raise StaleEntry(f"{doc_id!r}: stored hash no longer matches document")
        return emb


def precompute_corpus(encoder: MicroLM, corpus, store_path, vocab: Vocab,
                      window: int | None = None) -> EmbeddingStore:
    """Encode every document once; unchanged documents are cache hits.

    ``corpus`` is an iterable of (doc_id, title, text); counters for fresh
    encodes and cache hits are kept on the returned store.
    """
    window = window or encoder.config.window
    store = EmbeddingStore(Path(store_path))
    for doc_id, _title, text in corpus:
        if store.has_current(doc_id, text):
            store.cache_hits += 1
            continue
        tokens = vocab.tokenize(text)
        chunks = chunk_context(tokens, window, doc_id=doc_id)
        emb = encode_context(encoder, chunks)
        store.put(doc_id, text, emb)
        store.encoded += 1
    return store
