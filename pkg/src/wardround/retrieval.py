"""Embedding providers and in-context example selection.

The selector embeds the concatenated admission text of the query record,
scores every candidate in the example pool by cosine similarity, and keeps
the top k (k <= 3; retrieval stays exact, no approximate index). Ties break
by ascending record_id so selection is deterministic.
"""

from __future__ import annotations

import hashlib
import math
import os
import time
from dataclasses import dataclass
from typing import Protocol

import requests

from .dataset import (
    ADMISSION_TEXT_FIELDS,
    AdmissionRecord,
    CRITERIA_QUESTIONS,
    DatasetSplit,
    QUESTION_IDS,
    RecordBundle,
)
from .errors import DimMismatch, Transport, ZeroVector
from .llm_client import API_KEY_ENV_VAR, RETRY_ATTEMPTS, RETRY_BACKOFF_S

MAX_ICL_K = 3
STUB_EMBEDDER_DIM = 64

EXAMPLE_BLOCK_HEADER = "参考病例："

_ADMISSION_LABELS = (
    ("主诉", "chief_complaint"),
    ("现病史", "present_history"),
    ("既往史", "past_history"),
    ("体格检查", "physical_exam"),
    ("实验室及辅助检查", "lab_aided_exam"),
)

_ANSWER_LABELS = {
    "Q1": "初步诊断",
    "Q2": "初步诊断依据",
    "Q3": "鉴别诊断",
    "Q4": "最终诊断",
    "Q5": "最终诊断依据",
}


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("embedding vector must have dim >= 1")
        if any(not math.isfinite(v) for v in self.values):
            raise ValueError("embedding vector has non-finite components")

    @property
    def dim(self) -> int:
        return len(self.values)


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity in [-1, 1]. Raises on dim mismatch or zero vectors."""
    if a.dim != b.dim:
        raise DimMismatch(f"dim {a.dim} vs {b.dim}")
    norm_a = math.sqrt(sum(v * v for v in a.values))
    norm_b = math.sqrt(sum(v * v for v in b.values))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("cosine similarity with a zero vector is undefined")
    dot = sum(x * y for x, y in zip(a.values, b.values))
    return max(-1.0, min(1.0, dot / (norm_a * norm_b)))


class EmbeddingProvider(Protocol):
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


class HashingEmbedder:
    """Deterministic feature-hashing bag-of-characters embedder.

    Offline stand-in for a sentence-embedding model: each character hashes to
    a (bucket, sign) pair and the vector accumulates signed counts. Identical
    text always maps to the identical vector, across processes and runs.
    """

    def __init__(self, dim: int = STUB_EMBEDDER_DIM):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._char_cache: dict[str, tuple[int, float]] = {}

    def _bucket(self, ch: str) -> tuple[int, float]:
        cached = self._char_cache.get(ch)
        if cached is None:
            digest = hashlib.blake2b(ch.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            cached = (value % self.dim, 1.0 if (value >> 8) & 1 else -1.0)
            self._char_cache[ch] = cached
        return cached

    def embed(self, text: str) -> EmbeddingVector:
        values = [0.0] * self.dim
        for ch in text:
            idx, sign = self._bucket(ch)
            values[idx] += sign
        return EmbeddingVector(tuple(values))


class LiveEmbedder:
    """OpenAI-compatible embeddings endpoint (POST <base_url>/embeddings)."""

    def __init__(
        self,
        base_url: str,
        model_name: str,
        api_key: str | None = None,
        timeout_s: float = 60.0,
        session: requests.Session | None = None,
        sleep=time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.model_name = model_name
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV_VAR)
        self.timeout_s = timeout_s
        self.session = session or requests.Session()
        self.sleep = sleep
        self.dim = -1  # learned from the first response

    def embed(self, text: str) -> EmbeddingVector:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {"model": self.model_name, "input": text}
        last_detail = "no attempts made"
        for attempt in range(1, RETRY_ATTEMPTS + 1):
            try:
                resp = self.session.post(
                    f"{self.base_url}/embeddings", json=body,
                    headers=headers, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_detail = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        values = tuple(float(v) for v in resp.json()["data"][0]["embedding"])
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise Transport(f"malformed embeddings response: {exc}") from exc
                    vector = EmbeddingVector(values)
                    if self.dim < 0:
                        self.dim = vector.dim
                    return vector
                if resp.status_code < 500:
                    raise Transport(f"HTTP {resp.status_code}: {resp.text[:500]}")
                last_detail = f"HTTP {resp.status_code}"
            if attempt < RETRY_ATTEMPTS:
                self.sleep(RETRY_BACKOFF_S[min(attempt - 1, len(RETRY_BACKOFF_S) - 1)])
        raise Transport(f"embedding retries exhausted ({last_detail})")


@dataclass(frozen=True)
class IclExample:
    source_record_id: str
    similarity: float
    rendered_text: str


def admission_text(record: AdmissionRecord) -> str:
    """The embedded representation: the five admission text fields in schema
    order, newline separated."""
    return "\n".join(getattr(record, name) for name in ADMISSION_TEXT_FIELDS)


def embed_admission(record: AdmissionRecord, provider: EmbeddingProvider) -> EmbeddingVector:
    return provider.embed(admission_text(record))


def render_example(bundle: RecordBundle) -> str:
    """One worked example block: the admission note plus all gold answers."""
    lines = [EXAMPLE_BLOCK_HEADER]
    for label, fieldname in _ADMISSION_LABELS:
        lines.append(f"{label}：{getattr(bundle.admission, fieldname)}")
    for qid in QUESTION_IDS:
        answer = bundle.answer(qid)
        if qid in CRITERIA_QUESTIONS:
            lines.append(f"{_ANSWER_LABELS[qid]}：{answer.criteria_text}")
        else:
            lines.append(f"{_ANSWER_LABELS[qid]}：{'、'.join(answer.entities)}")
    return "\n".join(lines)


class IclSelector:
    """Selects in-context examples from a fixed pool.

    Pool embeddings are computed once and cached in memory keyed by
    record_id; reruns within a process reuse them.
    """

    def __init__(self, pool: DatasetSplit, provider: EmbeddingProvider):
        self.pool = pool
        self.provider = provider
        self._vectors: dict[str, EmbeddingVector] = {}

    def _vector_for(self, bundle: RecordBundle) -> EmbeddingVector:
        vec = self._vectors.get(bundle.record_id)
        if vec is None:
            vec = embed_admission(bundle.admission, self.provider)
            self._vectors[bundle.record_id] = vec
        return vec

    def select(self, query: AdmissionRecord, k: int) -> list[IclExample]:
        if not 0 <= k <= MAX_ICL_K:
            raise ValueError(f"k must be in [0, {MAX_ICL_K}], got {k}")
        if k == 0:
            return []
        query_vec = embed_admission(query, self.provider)
        scored: list[tuple[float, str, RecordBundle]] = []
        for bundle in self.pool.records:
            if bundle.record_id == query.record_id:
                continue
            sim = cosine(query_vec, self._vector_for(bundle))
            scored.append((sim, bundle.record_id, bundle))
        scored.sort(key=lambda item: (-item[0], item[1]))
        return [
            IclExample(
                source_record_id=rid,
                similarity=sim,
                rendered_text=render_example(bundle),
            )
            for sim, rid, bundle in scored[:k]
        ]


def select_icl(
    query: AdmissionRecord,
    pool: DatasetSplit,
    k: int,
    provider: EmbeddingProvider,
) -> list[IclExample]:
    """One-shot selection; pipeline runs hold an IclSelector to reuse the cache."""
    return IclSelector(pool, provider).select(query, k)
