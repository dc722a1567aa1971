"""
Retrieval Module
Corpus ingestion, chunking, embedding and cosine top-K retrieval.

This module provides:
- Word-boundary character-window chunking of guideline documents
- A deterministic signed-hashing text embedder (offline default)
- An exact linear-scan index with cosine scoring
- JSON index persistence

Author: ColaCare Research Team
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

logger = logging.getLogger(__name__)

DEFAULT_DIM = 128
DEFAULT_CHUNK_SIZE = 400
DEFAULT_OVERLAP = 100
DEFAULT_K = 16


class IngestionError(ValueError):
    """Raised when a corpus cannot be ingested."""


class RetrievalParameterError(ValueError):
    """Raised for invalid chunking or retrieval parameters."""


class EmbeddingError(ValueError):
    """Raised when text cannot be embedded."""


class Embedder(Protocol):
    """Anything that maps texts to unit-norm vectors of a fixed dimension."""
    dim: int
    name: str

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        ...


class HashEmbedder:
    """
    Signed feature hashing of lowercase unigrams and bigrams, L2-normalized.

    Tokens are maximal runs of letters and digits. Text without tokens maps
    to the first basis vector.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 16:
            raise EmbeddingError(f"Embedding dimension must be >= 16, got {dim}")
        self.dim = dim
        self.name = f"hash-{dim}"
        self._vectorizer = HashingVectorizer(
            n_features=dim,
            lowercase=True,
            token_pattern=r"(?u)[^\W_]+",
            ngram_range=(1, 2),
            alternate_sign=True,
            norm=None,
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        counts = self._vectorizer.transform(list(texts)).toarray().astype(np.float64)
        norms = np.linalg.norm(counts, axis=1, keepdims=True)
        out = np.zeros_like(counts)
        nonzero = norms[:, 0] > 0
        out[nonzero] = counts[nonzero] / norms[nonzero]
        out[~nonzero, 0] = 1.0
        return out


def hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Unit-norm signed-hash embedding of one text."""
    return HashEmbedder(dim).embed([text])[0]


@dataclass
class CorpusChunk:
    chunk_id: str
    doc_title: str
    text: str
    embedding: np.ndarray


@dataclass
class RetrievedEvidence:
    query_digest: str
    hits: List[Tuple[str, float]] = field(default_factory=list)

    @property
    def chunk_ids(self) -> List[str]:
        return [chunk_id for chunk_id, _ in self.hits]

    def to_dict(self):
        return {"query_digest": self.query_digest, "hits": [[c, s] for c, s in self.hits]}

    @classmethod
    def from_dict(cls, data) -> "RetrievedEvidence":
        return cls(query_digest=data["query_digest"], hits=[(c, float(s)) for c, s in data["hits"]])


def _is_space(text: str, i: int) -> bool:
    return 0 <= i < len(text) and text[i].isspace()


def chunk_text(text: str, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP) -> List[str]:
    """
    Fixed-size character windows snapped to word boundaries.

    A text no longer than ``chunk_size`` is one chunk. Otherwise windows start
    at every multiple of (chunk_size - overlap) below len(text); a start inside
    a word moves forward to the next word, and an end inside a word moves back
    to the previous whitespace when the window has one.
    """
    if chunk_size <= 0 or overlap < 0 or overlap >= chunk_size:
        raise RetrievalParameterError(f"Need chunk_size > overlap >= 0, got {chunk_size}/{overlap}")
    text = text.strip()
    if not text:
        return []
    if len(text) <= chunk_size:
        return [text]

    stride = chunk_size - overlap
    chunks = []
    for nominal in range(0, len(text), stride):
        start = nominal
        if start > 0 and not _is_space(text, start - 1):
            while start < len(text) and not text[start].isspace():
                start += 1
        while start < len(text) and text[start].isspace():
            start += 1
        if start >= len(text):
            continue
        end = min(nominal + chunk_size, len(text))
        if end < len(text) and not _is_space(text, end):
            cut = text.rfind(" ", start, end)
            if cut > start:
                end = cut
        piece = text[start:end].strip()
        if piece:
            chunks.append(piece)
    return chunks


def query_digest(query: str) -> str:
    return hashlib.sha256(query.encode("utf-8")).hexdigest()[:16]


class CorpusIndex:
    """Immutable linear-scan index over embedded chunks."""

    def __init__(self, chunks: Sequence[CorpusChunk], dim: int, embedder_name: str = ""):
        if not chunks:
            raise IngestionError("Index needs at least one chunk")
        ids = [c.chunk_id for c in chunks]
        if len(set(ids)) != len(ids):
            raise IngestionError("Duplicate chunk ids in index")
        self.chunks = list(chunks)
        self.dim = dim
        self.embedder_name = embedder_name
        self._matrix = np.vstack([c.embedding for c in self.chunks])
        self._ids = np.array(ids)
        self._by_id: Dict[str, CorpusChunk] = {c.chunk_id: c for c in self.chunks}

    def __len__(self):
        return len(self.chunks)

    def get(self, chunk_id: str) -> CorpusChunk:
        return self._by_id[chunk_id]

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        return np.clip(self._matrix @ query_vector, -1.0, 1.0)

    def save(self, path: str):
        payload = {
            "d": self.dim,
            "embedder": self.embedder_name,
            "chunks": [
                {"chunk_id": c.chunk_id, "doc_title": c.doc_title, "text": c.text,
                 "embedding": [float(v) for v in c.embedding]}
                for c in self.chunks
            ],
        }
        with open(path, "w") as f:
            json.dump(payload, f)
        logger.info(f"Index with {len(self.chunks)} chunks saved to {path}")

    @classmethod
    def load(cls, path: str) -> "CorpusIndex":
        with open(path, "r") as f:
            payload = json.load(f)
        chunks = [
            CorpusChunk(c["chunk_id"], c["doc_title"], c["text"], np.asarray(c["embedding"], dtype=np.float64))
            for c in payload["chunks"]
        ]
        return cls(chunks, dim=int(payload["d"]), embedder_name=payload.get("embedder", ""))


def read_corpus(path: str) -> List[Dict[str, str]]:
    """JSON lines, one {"id", "title", "text"} per line."""
    docs = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"{path}:{line_no}: invalid JSON ({e})") from e
            if not all(k in doc for k in ("id", "title", "text")):
                raise IngestionError(f"{path}:{line_no}: document needs id, title and text")
            docs.append(doc)
    return docs


def build_index(docs: Sequence[Dict[str, str]], embedder: Embedder, chunk_size: int = DEFAULT_CHUNK_SIZE,
                overlap: int = DEFAULT_OVERLAP) -> CorpusIndex:
    if chunk_size <= overlap or overlap < 0:
        raise RetrievalParameterError(f"Need chunk_size > overlap >= 0, got {chunk_size}/{overlap}")
    chunks_meta = []
    for doc in docs:
        for k, piece in enumerate(chunk_text(doc["text"], chunk_size, overlap)):
            chunks_meta.append((f"{doc['id']}#{k:03d}", doc["title"], piece))
    if not chunks_meta:
        raise IngestionError("Corpus produced no chunks")
    embeddings = embedder.embed([text for _, _, text in chunks_meta])
    chunks = [CorpusChunk(cid, title, text, emb) for (cid, title, text), emb in zip(chunks_meta, embeddings)]
    logger.info(f"Ingested {len(docs)} documents into {len(chunks)} chunks (d={embedder.dim})")
    return CorpusIndex(chunks, dim=embedder.dim, embedder_name=getattr(embedder, "name", ""))


def ingest_corpus(path: str, chunk_size: int = DEFAULT_CHUNK_SIZE, overlap: int = DEFAULT_OVERLAP,
                  embedder: Optional[Embedder] = None) -> CorpusIndex:
    """
    Read a JSON-lines corpus, chunk and embed every document.

    Args:
        path: Corpus file
        chunk_size: Window size in characters
        overlap: Overlap between consecutive windows
        embedder: Text embedder (signed hashing by default)

    Returns:
        CorpusIndex: immutable index
    """
    if chunk_size <= overlap or overlap < 0:
        raise RetrievalParameterError(f"Need chunk_size > overlap >= 0, got {chunk_size}/{overlap}")
    docs = read_corpus(path)
    if not docs:
        raise IngestionError(f"{path}: corpus is empty")
    return build_index(docs, embedder or HashEmbedder(), chunk_size, overlap)


def retrieve(index: CorpusIndex, query: str, k: int = DEFAULT_K, embedder: Optional[Embedder] = None) -> RetrievedEvidence:
    """Top-K chunks by cosine similarity; ties broken by chunk_id ascending."""
    if k < 1:
        raise RetrievalParameterError(f"K must be >= 1, got {k}")
    embedder = embedder or HashEmbedder(index.dim)
    if embedder.dim != index.dim:
        raise RetrievalParameterError(f"Embedder dimension {embedder.dim} != index dimension {index.dim}")
    name = getattr(embedder, "name", "")
    if name and index.embedder_name and name != index.embedder_name:
        raise RetrievalParameterError(
            f"Index was embedded with {index.embedder_name}; query embedder is {name}"
        )
    scores = index.scores(embedder.embed([query])[0])
    order = np.lexsort((index._ids, -scores))[:k]
    return RetrievedEvidence(
        query_digest=query_digest(query),
        hits=[(str(index._ids[i]), float(scores[i])) for i in order],
    )


def brute_force_retrieve(index: CorpusIndex, query_vector: np.ndarray, k: int) -> List[Tuple[str, float]]:
    """Exhaustive scan used to cross-check ``retrieve``."""
    scored = []
    for chunk in index.chunks:
        score = float(sum(a * b for a, b in zip(chunk.embedding, query_vector)))
        scored.append((chunk.chunk_id, max(-1.0, min(1.0, score))))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]
