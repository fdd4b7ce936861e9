"""Embedding-based demonstration selection.

Selection is an exact ranking: embed the query, embed every candidate
demonstration, sort by cosine similarity. No approximate index is used;
repositories at this scale do not need one.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Demonstration, Query, Repository
from .errors import DimensionMismatch, EmptyQuerySet, EncoderMismatch
from .gateway import EmbeddingVector, Gateway


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of unit vectors, clipped into [-1, 1]."""
    if a.encoder_id != b.encoder_id:
        raise EncoderMismatch(f"{a.encoder_id!r} vs {b.encoder_id!r}")
    if a.dim != b.dim:
        raise DimensionMismatch(f"{a.dim} vs {b.dim}")
    return float(np.clip(np.dot(a.values, b.values), -1.0, 1.0))


class EmbeddingCache:
    """Thread-safe embedding memo keyed by (encoder id, text digest)."""

    def __init__(self) -> None:
        self._store: dict[tuple[str, str], EmbeddingVector] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(encoder_id: str, text: str) -> tuple[str, str]:
        return encoder_id, hashlib.sha256(text.encode("utf-8")).hexdigest()

    def get(self, encoder_id: str, text: str) -> EmbeddingVector | None:
        with self._lock:
            return self._store.get(self._key(encoder_id, text))

    def put(self, encoder_id: str, text: str, vector: EmbeddingVector) -> None:
        with self._lock:
            self._store[self._key(encoder_id, text)] = vector

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


def embed_text(gateway: Gateway, text: str, cache: EmbeddingCache | None = None) -> EmbeddingVector:
    """Embed through the gateway, consulting the cache first."""
    if cache is not None:
        hit = cache.get(gateway.encoder_id, text)
        if hit is not None:
            return hit
    vector = gateway.embed(text)
    if cache is not None:
        cache.put(vector.encoder_id, text, vector)
    return vector


@dataclass(frozen=True)
class SelectionResult:
    """Top-n demonstrations for one query, best first."""

    query_id: str
    entries: tuple[tuple[Demonstration, float], ...]
    n: int

    @property
    def demonstrations(self) -> tuple[Demonstration, ...]:
        return tuple(demo for demo, _ in self.entries)


def rank_by_embedding(
    query_id: str,
    query_vector: EmbeddingVector,
    repo: Repository,
    n: int,
    gateway: Gateway,
    cache: EmbeddingCache | None = None,
) -> SelectionResult:
    """Rank repository demonstrations against an already-built query vector.

    Order is similarity descending, ties broken by demonstration id
    ascending. ``n`` may be 0, which selects nothing (zero-shot).
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    if n > len(repo):
        raise ValueError(f"n={n} exceeds repository size {len(repo)}")
    if n == 0:
        return SelectionResult(query_id=query_id, entries=(), n=0)
    scored: list[tuple[Demonstration, float]] = []
    for demo in repo.demonstrations:
        vector = embed_text(gateway, demo.code, cache)
        scored.append((demo, cosine_similarity(query_vector, vector)))
    scored.sort(key=lambda pair: (-pair[1], pair[0].id))
    return SelectionResult(query_id=query_id, entries=tuple(scored[:n]), n=n)


def select_top_n(
    query: Query,
    repo: Repository,
    n: int,
    gateway: Gateway,
    cache: EmbeddingCache | None = None,
) -> SelectionResult:
    """Pick the n demonstrations most similar to the query code."""
    query_vector = embed_text(gateway, query.code, cache)
    return rank_by_embedding(query.id, query_vector, repo, n, gateway, cache)


def pooled_query_embedding(
    queries: Sequence[Query],
    gateway: Gateway,
    mode: str = "mean",
    cache: EmbeddingCache | None = None,
) -> EmbeddingVector:
    """Collapse a query set into one retrieval vector.

    ``mean`` averages the unit vectors and renormalizes. ``concat``
    joins them end to end; the result carries a distinct encoder id, so
    it can only be compared against an index built the same way.
    """
    if not queries:
        raise EmptyQuerySet("cannot pool an empty query set")
    vectors = [embed_text(gateway, q.code, cache) for q in queries]
    encoder = vectors[0].encoder_id
    for v in vectors[1:]:
        if v.encoder_id != encoder:
            raise EncoderMismatch("query set spans multiple encoders")
    if mode == "mean":
        stacked = np.stack([v.values for v in vectors])
        return EmbeddingVector.unit(stacked.mean(axis=0), encoder)
    if mode == "concat":
        joined = np.concatenate([v.values for v in vectors])
        return EmbeddingVector.unit(joined, f"{encoder}+concat{len(vectors)}")
    raise ValueError(f"unknown pooling mode {mode!r}")
