import csv
import json
import math
import random

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from aicollective.embeddings import (
    EmbeddingCache,
    EmbeddingError,
    EmbeddingService,
    RemoteEmbedder,
    content_key,
    distance,
    export_vectors_csv,
    make_test_embedder,
    total_dispersion,
)


def test_test_embedder_unit_norm_and_stable():
    e = make_test_embedder(3072, seed=1)
    a = e.embed(["hello world"])[0]
    assert a.shape == (3072,)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-12)
    b = make_test_embedder(3072, seed=1).embed(["hello world"])[0]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_test_embedder(3072, seed=2).embed(["hello world"])[0])


def test_test_embedder_rejects_dimension_one():
    with pytest.raises(ValueError):
        make_test_embedder(1)


def test_distinct_texts_are_nearly_orthogonal():
    e = make_test_embedder(3072)
    r = random.Random(5)
    words = [f"w{i}" for i in range(500)]
    texts = [" ".join(r.choice(words) for _ in range(60)) for _ in range(2000)]
    vecs = e.embed(texts)
    sims = np.einsum("ij,ij->i", vecs[0::2], vecs[1::2])
    assert len(sims) == 1000
    assert np.max(np.abs(sims)) < 0.2


def test_batch_duplicates_hit_cache():
    calls = []
    base = make_test_embedder(16)

    class Counting:
        model, source, dimension = base.model, "test", 16

        def embed(self, texts):
            calls.append(list(texts))
            return base.embed(texts)

    svc = EmbeddingService(Counting())
    batch = svc.embed_batch(["a", "a"])
    assert np.array_equal(batch.vectors[0], batch.vectors[1])
    assert calls == [["a"]]
    svc.embed_batch(["a"])
    assert calls == [["a"]]


def test_empty_batch():
    batch = EmbeddingService(make_test_embedder(8)).embed_batch([])
    assert len(batch) == 0


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        EmbeddingService(make_test_embedder(8)).embed_batch(["ok", ""])


def test_disk_cache_layout_and_bitwise_reuse(tmp_path):
    e = make_test_embedder(32)
    first = EmbeddingService(e, EmbeddingCache(tmp_path)).embed_batch(["alpha", "beta"])
    key = content_key(e.model, "alpha")
    assert (tmp_path / key[:2] / f"{key}.npy").exists()
    index = [json.loads(line) for line in (tmp_path / "index.jsonl").read_text().splitlines()]
    assert {row["key"] for row in index} == {key, content_key(e.model, "beta")}

    class Refuses:
        model, source = e.model, "test"

        def embed(self, texts):
            raise AssertionError("should have been served from disk")

    again = EmbeddingService(Refuses(), EmbeddingCache(tmp_path)).embed_batch(["alpha", "beta"])
    assert again.vectors.tobytes() == first.vectors.tobytes()


def _remote(handler, **kw):
    return RemoteEmbedder(
        "emb-model",
        "https://emb.invalid/v1",
        api_key="sk-emb",
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        sleep=lambda s: None,
        **kw,
    )


def test_remote_embedder_wire_format():
    seen = []

    def handler(request):
        body = json.loads(request.content)
        seen.append((request.headers["Authorization"], body))
        data = [{"index": i, "embedding": [float(i), 1.0]} for i in reversed(range(len(body["input"])))]
        return httpx.Response(200, json={"data": data})

    vecs = _remote(handler, batch_size=2).embed(["a", "b", "c"])
    assert vecs.tolist() == [[0.0, 1.0], [1.0, 1.0], [0.0, 1.0]]
    assert seen[0] == ("Bearer sk-emb", {"model": "emb-model", "input": ["a", "b"]})
    assert len(seen) == 2


def test_partial_failure_reports_pending_and_keeps_done(tmp_path):
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        body = json.loads(request.content)
        if state["n"] > 1:
            return httpx.Response(503)
        return httpx.Response(200, json={"data": [{"index": i, "embedding": [1.0, 0.0]} for i in range(len(body["input"]))]})

    svc = EmbeddingService(_remote(handler, batch_size=2), EmbeddingCache(tmp_path))
    with pytest.raises(EmbeddingError) as info:
        svc.embed_batch(["a", "b", "c", "d"])
    assert list(info.value.pending) == [2, 3]
    assert svc.cache.get(content_key("emb-model", "a")) is not None


def test_dispersion_examples():
    assert total_dispersion([[0.3, 0.4]] * 5) == 0.0
    assert total_dispersion([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValueError):
        total_dispersion([])
    with pytest.raises(ValueError):
        total_dispersion([[1.0, 0.0], [1.0]])


def test_distance_examples():
    assert distance([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert distance([1.0, 0.0], [0.0, 1.0]) == pytest.approx(1.0, abs=1e-12)
    s = 1 / math.sqrt(2)
    assert distance([1.0, 0.0], [s, s]) == pytest.approx(1 - s, abs=1e-12)
    assert distance([1.0, 0.0], [s, s]) == pytest.approx(0.2929, abs=1e-4)
    assert distance([3.0, 4.0], [0.0, 0.0], "euclidean") == 5.0
    with pytest.raises(ValueError):
        distance([1.0, 0.0], [0.0, 0.0])
    with pytest.raises(ValueError):
        distance([1.0], [1.0, 0.0])


vectors = hnp.arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(2, 8)),
    elements=st.floats(-100, 100, allow_nan=False, allow_infinity=False),
)


@settings(max_examples=300, deadline=None)
@given(vectors, st.floats(-50, 50), st.floats(-20, 20))
def test_dispersion_translation_and_scaling(x, shift, c):
    base = total_dispersion(x)
    assert base >= 0
    tol = 1e-9 * max(1.0, base * max(1.0, c * c))
    assert abs(total_dispersion(x + shift) - base) <= 1e-9 * max(1.0, base, shift * shift)
    assert abs(total_dispersion(c * x) - c * c * base) <= tol
    assert math.isclose(base, oracles.dispersion(x.tolist()), rel_tol=1e-9, abs_tol=1e-9)


@settings(max_examples=300, deadline=None)
@given(vectors)
def test_distance_matches_loop_reference(x):
    a, b = x[0] + 0.5, x[-1] - 0.25
    if np.linalg.norm(a) < 1e-6 or np.linalg.norm(b) < 1e-6:
        return
    d = distance(a, b)
    assert 0.0 <= d <= 2.0
    assert math.isclose(d, oracles.cosine_distance(a.tolist(), b.tolist()), rel_tol=1e-9, abs_tol=1e-12)
    assert math.isclose(d, distance(b, a), abs_tol=1e-15)


def test_vector_csv_export(tmp_path):
    batch = EmbeddingService(make_test_embedder(4)).embed_batch(["x", "y, with comma"])
    out = tmp_path / "v.csv"
    export_vectors_csv(batch, out)
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["text", "v0", "v1", "v2", "v3"]
    assert rows[2][0] == "y, with comma"
    assert [float(v) for v in rows[1][1:]] == batch.vectors[0].tolist()
