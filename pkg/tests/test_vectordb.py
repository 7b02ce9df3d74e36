from __future__ import annotations

import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cwescout.corpus import Chunk
from cwescout.vectordb import (
    INDEX_MAGIC,
    ContextDatabase,
    DimensionMismatch,
    EmbeddingProvider,
    EmptyCorpus,
    FingerprintMismatch,
    IndexFormatError,
    ProviderFailure,
    RecordingEmbedder,
    ReplayEmbedder,
    TokenHashEmbedder,
    VectorIndex,
    ZeroVector,
    build_index,
    cosine,
    query_top_k,
)


def brute_force(index: VectorIndex, query, k):
    """Score every stored entry in pure Python and sort."""
    q = [float(x) for x in query]
    qn = math.sqrt(math.fsum(x * x for x in q))
    scored = []
    for cid, vec in index.entries():
        v = [float(x) for x in vec]
        vn = math.sqrt(math.fsum(x * x for x in v))
        s = 0.0 if vn == 0 else max(-1.0, min(1.0, math.fsum(a * b for a, b in zip(v, q)) / (vn * qn)))
        scored.append((cid, s))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def chunks(*texts):
    return [Chunk(i, "f.c", i * 10 + 1, i * 10 + 10, t) for i, t in enumerate(texts)]


# -- cosine ------------------------------------------------------------------

def test_cosine_examples():
    assert cosine([3.0, -1.0, 2.0], [3.0, -1.0, 2.0]) == pytest.approx(1.0, abs=1e-12)
    assert cosine([1, 0], [0, 1]) == 0.0
    assert abs(cosine([1, 0], [1, 1]) - 0.70710678) < 1e-8
    assert abs(cosine([1, 0], [1, 1]) - 1 / math.sqrt(2)) < 1e-12


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine([1, 2], [1, 2, 3])
    with pytest.raises(ZeroVector):
        cosine([0, 0], [1, 0])


finite = st.floats(-1e3, 1e3, allow_nan=False)
vec_pairs = st.integers(1, 16).flatmap(lambda d: st.tuples(st.lists(finite, min_size=d, max_size=d),
                                                           st.lists(finite, min_size=d, max_size=d)))


@given(vec_pairs, st.floats(1e-3, 1e3))
def test_cosine_symmetry_and_scale_invariance(pair, c):
    a, b = pair
    if not any(a) or not any(b):
        return
    ab = cosine(a, b)
    assert -1.0 <= ab <= 1.0
    assert abs(ab - cosine(b, a)) <= 1e-12
    assert abs(cosine(a, [c * x for x in b]) - ab) <= 1e-9


# -- embedders -----------------------------------------------------------------

def test_token_hash_embedder():
    emb = TokenHashEmbedder()
    assert emb.fingerprint == "token-hash/v1/dim=256"
    vecs = emb.embed(["memcpy(dst, src, n)", "MEMCPY dst src n", "", "other words"])
    assert vecs.shape == (4, 256)
    assert np.linalg.norm(vecs[0]) == pytest.approx(1.0)
    assert np.array_equal(vecs[0], vecs[1])
    assert not vecs[2].any()
    assert np.array_equal(emb.embed(["other words"])[0], vecs[3])


class BrokenEmbedder(EmbeddingProvider):
    fingerprint = "broken"

    def __init__(self, response):
        self.response = response

    def handle(self, request):
        if isinstance(self.response, Exception):
            raise self.response
        return self.response


@pytest.mark.parametrize("response", [
    ConnectionError("down"),
    {"data": []},
    {"data": [{"index": 0, "embedding": [1.0, "x"]}]},
    {"data": [{"index": 0, "embedding": [float("nan")]}]},
    {"nope": 1},
])
def test_provider_failures(response, tmp_path):
    target = tmp_path / "idx"
    with pytest.raises(ProviderFailure):
        build_index(chunks("a"), BrokenEmbedder(response), target)
    assert not target.exists()


def test_inconsistent_batch_dimensions():
    class Ragged(EmbeddingProvider):
        fingerprint = "ragged"
        batch_size = 1
        calls = 0

        def handle(self, request):
            Ragged.calls += 1
            return {"data": [{"index": 0, "embedding": [1.0] * (2 + Ragged.calls)}]}

    with pytest.raises(ProviderFailure):
        build_index(chunks("a", "b"), Ragged())


def test_recording_and_replay_embedder():
    rec = RecordingEmbedder(TokenHashEmbedder(32))
    first = rec.embed(["alpha beta"])
    replay = ReplayEmbedder(rec.export(), rec.fingerprint, rec.model)
    assert np.array_equal(replay.embed(["alpha beta"]), first)
    with pytest.raises(ProviderFailure):
        replay.embed(["unseen"])


# -- build / persist -----------------------------------------------------------

def test_build_three_chunks_is_stable(tmp_path):
    cs = chunks("int a;", "char *p = malloc(n);", "free(p);")
    first = build_index(cs, TokenHashEmbedder(), tmp_path / "one.idx")
    second = build_index(cs, TokenHashEmbedder(), tmp_path / "two.idx")
    assert len(first) == 3 and first.dim == 256
    assert (tmp_path / "one.idx").read_bytes() == (tmp_path / "two.idx").read_bytes()
    assert first.to_bytes().startswith(INDEX_MAGIC)


def test_concurrent_build_matches_sequential():
    cs = [Chunk(i, "f.c", i + 1, i + 1, f"token{i} shared") for i in range(150)]
    emb = TokenHashEmbedder(16)
    assert build_index(cs, emb, max_workers=4).to_bytes() == build_index(cs, emb).to_bytes()


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        build_index([], TokenHashEmbedder())


def test_index_file_layout():
    idx = VectorIndex([7, 3], np.array([[1.0, 0.0], [0.5, 0.25]]), "fp")
    data = idx.to_bytes()
    assert data == (
        b"CWESCOUT-IDX" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + (2).to_bytes(4, "little") + b"fp" + (2).to_bytes(8, "little")
        + (3).to_bytes(8, "little") + np.array([0.5, 0.25], "<f4").tobytes()
        + (7).to_bytes(8, "little") + np.array([1.0, 0.0], "<f4").tobytes()
    )


@pytest.mark.parametrize("data", [b"", b"NOTANINDEX", b"CWESCOUT-IDX\x01\x00", ])
def test_corrupt_index(data):
    with pytest.raises(IndexFormatError):
        VectorIndex.from_bytes(data)


def test_truncated_body_rejected():
    data = VectorIndex([1], np.ones((1, 4)), "fp").to_bytes()
    with pytest.raises(IndexFormatError):
        VectorIndex.from_bytes(data[:-1])


def test_duplicate_ids_rejected():
    with pytest.raises(ValueError):
        VectorIndex([1, 1], np.ones((2, 2)), "fp")


def test_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    idx = VectorIndex(rng.permutation(50), rng.normal(size=(50, 12)), "fp")
    idx.save(tmp_path / "i.idx")
    loaded = VectorIndex.load(tmp_path / "i.idx")
    assert loaded.provider_fingerprint == "fp"
    for _ in range(10):
        q = rng.normal(size=12)
        assert query_top_k(idx, q, 7) == query_top_k(loaded, q, 7)


# -- query -----------------------------------------------------------------------

def test_k_clamped_to_index_size():
    idx = VectorIndex([0, 1], np.eye(2), "fp")
    assert [h.chunk_id for h in query_top_k(idx, [1.0, 1.0], 5)] == [0, 1]


def test_identity_query_ranks_first():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(20, 8)).astype(np.float32)
    idx = VectorIndex(range(20), vecs, "fp")
    hit = query_top_k(idx, vecs[13], 3)[0]
    assert (hit.chunk_id, hit.rank) == (13, 1)
    assert hit.score == pytest.approx(1.0, abs=1e-9)


def test_ties_break_by_chunk_id():
    idx = VectorIndex([9, 2, 5], np.array([[1.0, 0.0], [1.0, 0.0], [2.0, 0.0]]), "fp")
    hits = query_top_k(idx, [3.0, 0.0], 3)
    assert [h.chunk_id for h in hits] == [2, 5, 9]
    assert [h.rank for h in hits] == [1, 2, 3]


def test_zero_vectors():
    idx = VectorIndex([0, 1], np.array([[0.0, 0.0], [0.0, 1.0]]), "fp")
    assert [(h.chunk_id, h.score) for h in query_top_k(idx, [0.0, -1.0], 2)] == [(0, 0.0), (1, -1.0)]
    with pytest.raises(ZeroVector):
        query_top_k(idx, [0.0, 0.0], 1)


def test_query_errors():
    idx = VectorIndex([0], np.ones((1, 3)), "fp")
    with pytest.raises(FingerprintMismatch):
        query_top_k(idx, [1, 1, 1], 1, fingerprint="other")
    with pytest.raises(DimensionMismatch):
        query_top_k(idx, [1, 1], 1)
    with pytest.raises(ValueError):
        query_top_k(idx, [1, 1, 1], 0)


def test_hundred_vectors_match_brute_force():
    rng = random.Random(100)
    vecs = [[rng.gauss(0, 1) for _ in range(32)] for _ in range(100)]
    idx = VectorIndex(range(100), np.array(vecs), "fp")
    q = [rng.gauss(0, 1) for _ in range(32)]
    got = query_top_k(idx, q, 5)
    want = brute_force(idx, q, 5)
    assert [h.chunk_id for h in got] == [cid for cid, _ in want]
    assert all(abs(h.score - s) <= 1e-9 for h, (_, s) in zip(got, want))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 24), st.integers(1, 40))
def test_query_matches_brute_force_property(seed, n, dim, k):
    rng = np.random.default_rng(seed)
    vecs = rng.integers(-3, 4, size=(n, dim)).astype(float)  # small ints make ties common
    ids = rng.permutation(n * 3)[:n]
    idx = VectorIndex(ids, vecs, "fp")
    q = rng.integers(-3, 4, size=dim).astype(float)
    if not q.any():
        q[0] = 1.0
    got = query_top_k(idx, q, k)
    want = brute_force(idx, q, k)
    assert [h.chunk_id for h in got] == [cid for cid, _ in want]
    assert all(abs(h.score - s) <= 1e-9 for h, (_, s) in zip(got, want))
    assert [h.rank for h in got] == list(range(1, len(got) + 1))
    assert all(a.score >= b.score for a, b in zip(got, got[1:]))


# -- context database --------------------------------------------------------------

def test_context_database_search():
    cs = chunks("memcpy(dst, src, n);", "if (len >= BUF_CAP) return -1;", "printf(msg);")
    db = ContextDatabase.build(cs, TokenHashEmbedder())
    (best, score), *_ = db.search("where is len checked against BUF_CAP", k=2)
    assert best.chunk_id == 1 and 0 < score <= 1


def test_context_database_rejects_foreign_index():
    cs = chunks("a b")
    idx = build_index(cs, TokenHashEmbedder(64))
    with pytest.raises(FingerprintMismatch):
        ContextDatabase(cs, idx, TokenHashEmbedder(32))


def test_cosine_of_tiny_vectors():
    assert cosine([1.0], [6e-264]) == 1.0
    assert cosine([1e-200, 0.0], [1e-200, 1e-200]) == pytest.approx(1 / math.sqrt(2), abs=1e-12)


def test_tiny_query_vector_is_not_zero():
    idx = VectorIndex([0, 1], np.array([[1.0, 0.0], [0.0, 1.0]]), "fp")
    assert [h.chunk_id for h in query_top_k(idx, [1e-200, 0.0], 2)] == [0, 1]
