"""Chunk embeddings and exact cosine nearest-neighbour search.

The index is a dense float32 matrix scanned in full for every query; the
projects this tool targets have hundreds of chunks, not millions.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .corpus import Chunk
from .serialize import atomic_write

log = logging.getLogger(__name__)

__all__ = [
    "ContextDatabase",
    "INDEX_MAGIC",
    "INDEX_VERSION",
    "DimensionMismatch",
    "EmbeddingProvider",
    "EmptyCorpus",
    "FingerprintMismatch",
    "HttpEmbeddingProvider",
    "IndexFormatError",
    "ProviderFailure",
    "RecordingEmbedder",
    "ReplayEmbedder",
    "RetrievalHit",
    "TokenHashEmbedder",
    "VectorIndex",
    "VectorDbError",
    "ZeroVector",
    "build_index",
    "cosine",
    "query_top_k",
]

INDEX_MAGIC = b"CWESCOUT-IDX"
INDEX_VERSION = 1


class VectorDbError(Exception):
    pass


class DimensionMismatch(VectorDbError):
    pass


class ZeroVector(VectorDbError):
    pass


class EmptyCorpus(VectorDbError):
    pass


class ProviderFailure(VectorDbError):
    pass


class FingerprintMismatch(VectorDbError):
    pass


class IndexFormatError(VectorDbError):
    pass


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine similarity of two equal-length vectors, clamped to [-1, 1]."""
    if len(a) != len(b):
        raise DimensionMismatch(f"dimension mismatch: {len(a)} != {len(b)}")
    # hypot and normalizing first keep tiny but non-zero vectors from underflowing
    na = math.hypot(*a)
    nb = math.hypot(*b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity is undefined for a zero vector")
    value = math.fsum((x / na) * (y / nb) for x, y in zip(a, b))
    return max(-1.0, min(1.0, value))


# -- embedding providers -----------------------------------------------------


class EmbeddingProvider:
    """Speaks the embeddings wire interface.

    ``handle`` takes ``{"model": str, "input": [str, ...]}`` and returns
    ``{"data": [{"index": int, "embedding": [float, ...]}, ...]}``.
    """

    model: str = ""
    batch_size: int = 64

    @property
    def fingerprint(self) -> str:
        raise NotImplementedError

    def handle(self, request: dict) -> dict:
        raise NotImplementedError

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            return np.zeros((0, 0))
        try:
            response = self.handle({"model": self.model, "input": texts})
            data = response["data"]
            vectors: list = [None] * len(texts)
            for item in data:
                vectors[int(item["index"])] = item["embedding"]
        except ProviderFailure:
            raise
        except Exception as exc:
            raise ProviderFailure(f"embedding provider error: {exc}") from exc
        if any(v is None for v in vectors):
            raise ProviderFailure("embedding response is missing entries")
        try:
            arr = np.asarray(vectors, dtype=np.float64)
        except ValueError as exc:
            raise ProviderFailure(f"ragged embedding response: {exc}") from exc
        if arr.ndim != 2 or arr.shape[1] == 0:
            raise ProviderFailure(f"bad embedding shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ProviderFailure("embedding contains non-finite values")
        return arr


_TOKEN_RE = re.compile(r"[a-z0-9_]+")


class TokenHashEmbedder(EmbeddingProvider):
    """Offline bag-of-words embedder for tests and demos.

    Lower-cased word tokens are hashed into ``dim`` buckets and the count
    vector is L2-normalized. It has no semantic knowledge; it only makes
    retrieval deterministic without a network.
    """

    VERSION = 1

    def __init__(self, dim: int = 256):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.model = f"token-hash-{dim}"

    @property
    def fingerprint(self) -> str:
        return f"token-hash/v{self.VERSION}/dim={self.dim}"

    def vector(self, text: str) -> list[float]:
        counts = [0.0] * self.dim
        for tok in _TOKEN_RE.findall(text.lower()):
            h = hashlib.blake2b(tok.encode("utf-8"), digest_size=8).digest()
            counts[int.from_bytes(h, "little") % self.dim] += 1.0
        norm = math.sqrt(sum(c * c for c in counts))
        if norm:
            counts = [c / norm for c in counts]
        return counts

    def handle(self, request: dict) -> dict:
        return {
            "data": [
                {"index": i, "embedding": self.vector(text)}
                for i, text in enumerate(request["input"])
            ]
        }


class HttpEmbeddingProvider(EmbeddingProvider):
    """Embedding service reachable over HTTP (e.g. a local sentence-transformers server)."""

    def __init__(
        self,
        url: str | None = None,
        model: str = "all-MiniLM-L6-v2",
        api_key: str | None = None,
        timeout: float = 60.0,
    ):
        self.url = url or os.environ.get("CWESCOUT_EMBED_URL")
        if not self.url:
            raise ProviderFailure("no embedding endpoint: set CWESCOUT_EMBED_URL")
        self.model = model
        self._api_key = api_key
        self.timeout = timeout

    @property
    def fingerprint(self) -> str:
        return f"http/{self.model}"

    def handle(self, request: dict) -> dict:
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        try:
            resp = requests.post(self.url, json=request, headers=headers, timeout=self.timeout)
            resp.raise_for_status()
            return resp.json()
        except (requests.RequestException, ValueError) as exc:
            raise ProviderFailure(f"embedding request failed: {exc}") from exc


# -- index -------------------------------------------------------------------


@dataclass(frozen=True)
class RetrievalHit:
    chunk_id: int
    score: float
    rank: int


class VectorIndex:
    """Immutable set of (chunk_id, vector) entries ordered by chunk_id."""

    def __init__(self, chunk_ids: Sequence[int], vectors: np.ndarray, provider_fingerprint: str):
        ids = np.asarray(chunk_ids, dtype=np.int64)
        vecs = np.asarray(vectors, dtype=np.float32)
        if vecs.ndim != 2 or len(ids) != vecs.shape[0]:
            raise DimensionMismatch("chunk ids and vectors disagree in length")
        if not np.all(np.isfinite(vecs)):
            raise ValueError("index vectors must be finite")
        order = np.argsort(ids, kind="stable")
        ids, vecs = ids[order], vecs[order]
        if len(ids) > 1 and np.any(ids[1:] == ids[:-1]):
            raise ValueError("duplicate chunk ids in index")
        self.chunk_ids = ids
        self.vectors = vecs
        self.vectors.setflags(write=False)
        self.provider_fingerprint = provider_fingerprint
        norms = np.linalg.norm(vecs.astype(np.float64), axis=1)
        self._norms = norms

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.chunk_ids)

    def entries(self):
        for cid, vec in zip(self.chunk_ids.tolist(), self.vectors):
            yield cid, vec

    def to_bytes(self) -> bytes:
        fp = self.provider_fingerprint.encode("utf-8")
        header = INDEX_MAGIC + struct.pack(
            "<III", INDEX_VERSION, self.dim, len(fp)
        ) + fp + struct.pack("<Q", len(self))
        body = bytearray()
        for cid, vec in self.entries():
            body += struct.pack("<Q", cid)
            body += vec.astype("<f4").tobytes()
        return header + bytes(body)

    @classmethod
    def from_bytes(cls, data: bytes) -> "VectorIndex":
        if not data.startswith(INDEX_MAGIC):
            raise IndexFormatError("not a CWESCOUT index file")
        off = len(INDEX_MAGIC)
        try:
            version, dim, fp_len = struct.unpack_from("<III", data, off)
            off += 12
            if version != INDEX_VERSION:
                raise IndexFormatError(f"unsupported index version {version}")
            fp = data[off:off + fp_len].decode("utf-8")
            off += fp_len
            (count,) = struct.unpack_from("<Q", data, off)
            off += 8
            rec = np.dtype([("id", "<u8"), ("vec", "<f4", (dim,))])
            if len(data) - off != count * rec.itemsize:
                raise IndexFormatError("index file size does not match header")
            arr = np.frombuffer(data, dtype=rec, count=count, offset=off)
        except struct.error as exc:
            raise IndexFormatError(f"truncated index file: {exc}") from exc
        return cls(arr["id"].astype(np.int64), arr["vec"].reshape(count, dim), fp)

    def save(self, path: str | os.PathLike) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "VectorIndex":
        return cls.from_bytes(Path(path).read_bytes())


def build_index(
    chunks: Sequence[Chunk],
    embed_provider: EmbeddingProvider,
    path: str | os.PathLike | None = None,
    max_workers: int = 1,
) -> VectorIndex:
    """Embed every chunk and return the index; persist it to ``path`` if given.

    Any provider failure aborts the build before anything is written.
    """
    if not chunks:
        raise EmptyCorpus("cannot build an index from zero chunks")
    bs = max(1, embed_provider.batch_size)
    batches = [chunks[i:i + bs] for i in range(0, len(chunks), bs)]

    def run(batch):
        return embed_provider.embed([c.text for c in batch])

    if max_workers > 1 and len(batches) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]

    dims = {r.shape[1] for r in results}
    if len(dims) != 1:
        raise ProviderFailure(f"inconsistent embedding dimensions: {sorted(dims)}")
    vectors = np.vstack(results)
    index = VectorIndex([c.chunk_id for c in chunks], vectors, embed_provider.fingerprint)
    if path is not None:
        index.save(path)
    return index


def query_top_k(
    index: VectorIndex,
    query_vector: Sequence[float],
    k: int = 5,
    fingerprint: str | None = None,
) -> list[RetrievalHit]:
    """Return the ``k`` most similar entries, ordered by (score desc, chunk_id asc).

    Stored zero vectors score 0.0. ``fingerprint`` identifies the provider
    that produced ``query_vector`` and must match the index.
    """
    if fingerprint is not None and fingerprint != index.provider_fingerprint:
        raise FingerprintMismatch(
            f"query embedded with {fingerprint!r}, index built with {index.provider_fingerprint!r}"
        )
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query_vector, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != index.dim:
        raise DimensionMismatch(f"query dim {q.shape} != index dim {index.dim}")
    peak = float(np.max(np.abs(q))) if q.size else 0.0
    if peak == 0.0:
        raise ZeroVector("query vector is all zeros")
    # cosine is scale-invariant; a power-of-two rescale is exact and keeps the norm from underflowing
    q = q / 2.0 ** math.frexp(peak)[1]
    qn = float(np.linalg.norm(q))
    if len(index) == 0:
        return []
    dots = index.vectors.astype(np.float64) @ q
    denom = index._norms * qn
    with np.errstate(invalid="ignore", divide="ignore"):
        scores = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    scores = np.clip(scores, -1.0, 1.0)
    order = np.lexsort((index.chunk_ids, -scores))[:k]
    return [
        RetrievalHit(int(index.chunk_ids[i]), float(scores[i]), rank)
        for rank, i in enumerate(order, start=1)
    ]


# -- recording ---------------------------------------------------------------


def _embed_request_hash(request: dict) -> str:
    canon = json.dumps(request, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


class RecordingEmbedder(EmbeddingProvider):
    """Wraps a provider and keeps every request/response pair for a cassette."""

    def __init__(self, inner: EmbeddingProvider):
        self.inner = inner
        self.model = inner.model
        self.batch_size = inner.batch_size
        self.records: dict[str, dict] = {}
        self._lock = threading.Lock()

    @property
    def fingerprint(self) -> str:
        return self.inner.fingerprint

    def handle(self, request: dict) -> dict:
        response = self.inner.handle(request)
        with self._lock:
            self.records[_embed_request_hash(request)] = response
        return response

    def export(self) -> list[dict]:
        return [{"request_hash": h, "response": self.records[h]} for h in sorted(self.records)]


class ReplayEmbedder(EmbeddingProvider):
    """Serves recorded embedding responses by request hash; no network."""

    def __init__(self, records: Sequence[dict], fingerprint: str, model: str = "", batch_size: int = 64):
        self._records = {r["request_hash"]: r["response"] for r in records}
        self._fingerprint = fingerprint
        self.model = model
        self.batch_size = batch_size

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    def handle(self, request: dict) -> dict:
        key = _embed_request_hash(request)
        if key not in self._records:
            raise ProviderFailure(f"embedding request {key[:12]} not in cassette")
        return self._records[key]


# -- context database ----------------------------------------------------------


class ContextDatabase:
    """Chunks of one project, their index, and the embedder that built it."""

    def __init__(self, chunks: Sequence[Chunk], index: VectorIndex, embedder: EmbeddingProvider):
        if index.provider_fingerprint != embedder.fingerprint:
            raise FingerprintMismatch(
                f"index built with {index.provider_fingerprint!r}, embedder is {embedder.fingerprint!r}"
            )
        self.chunks = {c.chunk_id: c for c in chunks}
        missing = set(index.chunk_ids.tolist()) - set(self.chunks)
        if missing:
            raise ValueError(f"index refers to unknown chunk ids {sorted(missing)[:5]}")
        self.index = index
        self.embedder = embedder

    @classmethod
    def build(
        cls,
        chunks: Sequence[Chunk],
        embedder: EmbeddingProvider,
        path: str | os.PathLike | None = None,
    ) -> "ContextDatabase":
        return cls(chunks, build_index(chunks, embedder, path), embedder)

    def search(self, question: str, k: int = 5) -> list[tuple[Chunk, float]]:
        vec = self.embedder.embed([question])[0]
        hits = query_top_k(self.index, vec, k, fingerprint=self.embedder.fingerprint)
        return [(self.chunks[h.chunk_id], h.score) for h in hits]
