"""Text embeddings plus the two geometric quantities the analyses need.

``total_dispersion`` is the mean squared Euclidean distance to the centroid
(the trace of the biased covariance).  ``distance`` defaults to cosine
distance.  Remote vectors are cached by (model, text) content hash, so
re-analysing a finished run costs no requests.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .agents import AgentError, ApiClient

DISPERSION_DEFINITION = "mean squared euclidean distance to centroid"
DISTANCE_METRICS = ("cosine", "euclidean")


class EmbeddingError(AgentError):
    """``pending`` indexes the inputs still lacking a vector; ``completed``
    holds the vectors obtained before the failure, in input order."""

    def __init__(self, message: str, pending: Sequence[int], completed: np.ndarray | None = None):
        super().__init__(message)
        self.pending = list(pending)
        self.completed = completed


class Embedder(Protocol):
    model: str
    source: str

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


@dataclass
class EmbeddingBatch:
    texts: list[str]
    vectors: np.ndarray
    source: str

    def __len__(self) -> int:
        return len(self.texts)


class TestEmbedder:
    """Deterministic stand-in: each text seeds a Gaussian draw, normalised to unit length.

    Identical texts give identical vectors; distinct texts give nearly
    orthogonal ones at high dimension.
    """

    __test__ = False  # not a pytest class
    source = "test"

    def __init__(self, dimension: int = 3072, seed: int = 0):
        if dimension < 2:
            raise ValueError("test embedder dimension must be >= 2")
        self.dimension = dimension
        self.seed = seed
        self.model = f"test-embedder-d{dimension}-s{seed}"

    def _vector(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        v = rng.standard_normal(self.dimension)
        return v / np.linalg.norm(v)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dimension))
        return np.stack([self._vector(t) for t in texts])


def make_test_embedder(dimension: int = 3072, seed: int = 0) -> TestEmbedder:
    return TestEmbedder(dimension, seed)


class RemoteEmbedder(ApiClient):
    """Generic text-embedding endpoint (``POST {base_url}/embeddings``)."""

    source = "remote"

    def __init__(self, model: str, base_url: str, api_key: str | None = None, *, batch_size: int = 64, **kwargs):
        super().__init__(base_url, api_key, **kwargs)
        self.model = model
        self.batch_size = batch_size

    def __repr__(self) -> str:
        return f"RemoteEmbedder(model={self.model!r}, base_url={self.base_url!r})"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out: list[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            chunk = list(texts[start : start + self.batch_size])
            done = np.concatenate(out) if out else None
            try:
                data = self._post("/embeddings", {"model": self.model, "input": chunk})
                rows = sorted(data["data"], key=lambda r: r["index"])
                vecs = np.asarray([r["embedding"] for r in rows], dtype=float)
            except AgentError as exc:
                raise EmbeddingError(str(exc), range(start, len(texts)), done) from exc
            except (KeyError, TypeError, ValueError) as exc:
                raise EmbeddingError(f"malformed embedding response: {exc}", range(start, len(texts)), done) from exc
            if vecs.ndim != 2 or vecs.shape[0] != len(chunk) or not np.all(np.isfinite(vecs)):
                raise EmbeddingError("embedding response does not match request", range(start, len(texts)), done)
            out.append(vecs)
        return np.concatenate(out) if out else np.zeros((0, 0))


def content_key(model: str, text: str) -> str:
    return hashlib.sha256(f"{model}\x00{text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Content-addressed vector store: ``<root>/<key[:2]>/<key>.npy`` plus ``index.jsonl``.

    Without a root the cache lives in memory only.  Reads are lock-free;
    writes are serialised.
    """

    def __init__(self, root: str | os.PathLike | None = None):
        self.root = Path(root) if root is not None else None
        self._mem: dict[str, np.ndarray] = {}
        self._write_lock = threading.Lock()
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        assert self.root is not None
        return self.root / key[:2] / f"{key}.npy"

    def get(self, key: str) -> np.ndarray | None:
        if key in self._mem:
            return self._mem[key]
        if self.root is not None:
            p = self._path(key)
            if p.exists():
                v = np.load(p)
                self._mem[key] = v
                return v
        return None

    def put(self, key: str, vector: np.ndarray, model: str):
        vector = np.asarray(vector, dtype=float)
        with self._write_lock:
            self._mem[key] = vector
            if self.root is None:
                return
            p = self._path(key)
            if p.exists():
                return
            p.parent.mkdir(parents=True, exist_ok=True)
            tmp = p.with_suffix(".tmp.npy")
            np.save(tmp, vector)
            os.replace(tmp, p)
            with open(self.root / "index.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "model": model, "dim": int(vector.shape[0])}) + "\n")


class EmbeddingService:
    def __init__(self, embedder: Embedder, cache: EmbeddingCache | None = None):
        self.embedder = embedder
        self.cache = cache if cache is not None else EmbeddingCache()

    @property
    def model(self) -> str:
        return self.embedder.model

    def embed_batch(self, texts: Sequence[str]) -> EmbeddingBatch:
        texts = list(texts)
        for i, t in enumerate(texts):
            if not t:
                raise ValueError(f"text {i} is empty")
        keys = [content_key(self.embedder.model, t) for t in texts]
        missing: dict[str, str] = {}
        for k, t in zip(keys, texts):
            if self.cache.get(k) is None and k not in missing:
                missing[k] = t
        if missing:
            todo = list(missing.items())
            try:
                vecs = self.embedder.embed([t for _, t in todo])
            except EmbeddingError as exc:
                failed = set(exc.pending)
                got = iter(exc.completed if exc.completed is not None else ())
                done = set()
                for i, (k, _) in enumerate(todo):
                    if i not in failed:
                        v = next(got, None)
                        if v is None:
                            break
                        self.cache.put(k, v, self.embedder.model)
                        done.add(k)
                pending = [i for i, k in enumerate(keys) if k not in done and self.cache.get(k) is None]
                raise EmbeddingError(str(exc), pending) from exc
            for (k, _), v in zip(todo, vecs):
                self.cache.put(k, v, self.embedder.model)
        if not texts:
            return EmbeddingBatch([], np.zeros((0, 0)), self.embedder.source)
        return EmbeddingBatch(texts, np.stack([self.cache.get(k) for k in keys]), self.embedder.source)


def _as_matrix(vectors) -> np.ndarray:
    if isinstance(vectors, np.ndarray):
        if vectors.ndim != 2:
            raise ValueError("expected a 2-D array of vectors")
        return vectors.astype(float, copy=False)
    rows = [np.asarray(v, dtype=float) for v in vectors]
    if not rows:
        return np.zeros((0, 0))
    dims = {r.shape for r in rows}
    if len(dims) != 1 or rows[0].ndim != 1:
        raise ValueError(f"vectors have mismatched dimensions: {sorted(dims)}")
    return np.stack(rows)


def total_dispersion(vectors) -> float:
    """Mean squared Euclidean distance of ``vectors`` to their centroid."""
    x = _as_matrix(vectors)
    if x.shape[0] == 0:
        raise ValueError("total_dispersion needs at least one vector")
    # shifting by a member first keeps identical vectors at exactly zero
    shifted = x - x[0]
    centered = shifted - shifted.mean(axis=0)
    return float(np.mean(np.einsum("ij,ij->i", centered, centered)))


def distance(a, b, metric: str = "cosine") -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if metric == "euclidean":
        return float(np.linalg.norm(a - b))
    if metric != "cosine":
        raise ValueError(f"unknown distance metric {metric!r}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero vector")
    if np.array_equal(a, b):
        return 0.0
    return float(max(0.0, 1.0 - np.dot(a, b) / (na * nb)))


def export_vectors_csv(batch: EmbeddingBatch, path: str | os.PathLike):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        dim = batch.vectors.shape[1] if len(batch) else 0
        w.writerow(["text", *[f"v{i}" for i in range(dim)]])
        for t, v in zip(batch.texts, batch.vectors):
            w.writerow([t, *(repr(float(x)) for x in v)])
