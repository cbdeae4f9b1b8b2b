"""Top-k schema element and in-context example retrieval.

Two embedding backends sit behind one interface: a remote embedding API and a
deterministic character-trigram TF-IDF fallback that needs no network and is
bit-stable across runs and platforms.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import requests

from .dataset import DatabaseSchema
from .errors import ConfigError, RetrievalBackendError


@dataclass(frozen=True)
class SchemaElement:
    db_id: str
    kind: str  # table | column
    qualified_name: str
    descriptor_text: str

    def __post_init__(self):
        if self.kind not in ("table", "column"):
            raise ValueError(f"unknown element kind {self.kind!r}")
        if not self.descriptor_text:
            raise ValueError(f"{self.qualified_name}: descriptor_text must be non-empty")


@dataclass(frozen=True)
class IclExample:
    question: str
    gold_sql: str
    language: str

    def __post_init__(self):
        if not self.gold_sql:
            raise ValueError("ICL example requires non-empty gold_sql")


@dataclass(frozen=True)
class RetrievalConfig:
    schema_top_k: int = 5
    icl_top_m: int = 3

    def __post_init__(self):
        if self.schema_top_k < 1:
            raise ConfigError("schema_top_k must be >= 1")
        if self.icl_top_m < 1:
            raise ConfigError("icl_top_m must be >= 1")


def _render_value(value) -> str:
    if isinstance(value, bytes):
        return value.hex()
    return str(value)


def schema_elements(schema: DatabaseSchema) -> list[SchemaElement]:
    """Flatten a schema into retrievable table and column units."""
    elements = []
    for table in schema.tables:
        col_names = ", ".join(c.name for c in table.columns)
        elements.append(
            SchemaElement(
                db_id=schema.db_id,
                kind="table",
                qualified_name=table.name,
                descriptor_text=f"table {table.name}: columns {col_names}",
            )
        )
        for col in table.columns:
            text = f"column {table.name}.{col.name}"
            if col.declared_type:
                text += f" ({col.declared_type})"
            if col.sample_values:
                rendered = ", ".join(_render_value(v) for v in col.sample_values)
                text += f" e.g. {rendered}"
            elements.append(
                SchemaElement(
                    db_id=schema.db_id,
                    kind="column",
                    qualified_name=f"{table.name}.{col.name}",
                    descriptor_text=text,
                )
            )
    return elements


# ---------------------------------------------------------------------------
# Embedding backends
# ---------------------------------------------------------------------------

def _trigrams(text: str) -> list[str]:
    text = text.lower()
    if len(text) < 3:
        return [text] if text else []
    return [text[i : i + 3] for i in range(len(text) - 2)]


class LexicalSpace:
    """TF-IDF vectors over character trigrams for one fixed corpus."""

    def __init__(self, corpus):
        self.corpus = list(corpus)
        doc_freq: dict[str, int] = {}
        raw_vectors = []
        for text in self.corpus:
            counts: dict[str, int] = {}
            for gram in _trigrams(text):
                counts[gram] = counts.get(gram, 0) + 1
            for gram in counts:
                doc_freq[gram] = doc_freq.get(gram, 0) + 1
            raw_vectors.append(counts)
        n_docs = len(self.corpus)
        self.idf = {
            gram: math.log((n_docs + 1) / (df + 1)) + 1.0 for gram, df in doc_freq.items()
        }
        self._default_idf = math.log(n_docs + 1.0) + 1.0
        self.vectors = [self._weigh(counts) for counts in raw_vectors]

    def _weigh(self, counts: dict[str, int]) -> dict[str, float]:
        vec = {gram: tf * self.idf.get(gram, self._default_idf) for gram, tf in counts.items()}
        norm = math.sqrt(sum(w * w for w in vec.values()))
        if norm > 0.0:
            vec = {gram: w / norm for gram, w in vec.items()}
        return vec

    def scores(self, query_text: str) -> list[float]:
        counts: dict[str, int] = {}
        for gram in _trigrams(query_text):
            counts[gram] = counts.get(gram, 0) + 1
        qvec = self._weigh(counts)
        out = []
        for doc in self.vectors:
            small, large = (qvec, doc) if len(qvec) <= len(doc) else (doc, qvec)
            out.append(sum(w * large[g] for g, w in small.items() if g in large))
        return out

    def to_jsonable(self) -> list[dict]:
        return [
            {gram: repr(w) for gram, w in sorted(vec.items())} for vec in self.vectors
        ]

    def to_payload(self) -> dict:
        return {
            "idf": {gram: repr(w) for gram, w in sorted(self.idf.items())},
            "default_idf": repr(self._default_idf),
            "vectors": self.to_jsonable(),
        }

    @classmethod
    def from_payload(cls, corpus, payload: dict) -> "LexicalSpace":
        space = cls.__new__(cls)
        space.corpus = list(corpus)
        space.idf = {gram: float(w) for gram, w in payload["idf"].items()}
        space._default_idf = float(payload["default_idf"])
        space.vectors = [
            {gram: float(w) for gram, w in vec.items()} for vec in payload["vectors"]
        ]
        return space


class LexicalEmbedder:
    """Deterministic fallback backend; no network, exact arithmetic."""

    backend = "lexical_fallback"

    def build(self, corpus) -> LexicalSpace:
        return LexicalSpace(corpus)

    def restore(self, corpus, payload: dict) -> LexicalSpace:
        return LexicalSpace.from_payload(corpus, payload)


class DenseSpace:
    def __init__(self, corpus, vectors, embed_fn):
        self.corpus = list(corpus)
        self.vectors = vectors
        self._embed_fn = embed_fn

    @staticmethod
    def _cosine(a, b) -> float:
        dot = sum(x * y for x, y in zip(a, b))
        na = math.sqrt(sum(x * x for x in a))
        nb = math.sqrt(sum(y * y for y in b))
        if na == 0.0 or nb == 0.0:
            return 0.0
        return dot / (na * nb)

    def scores(self, query_text: str) -> list[float]:
        qvec = self._embed_fn([query_text])[0]
        return [self._cosine(qvec, v) for v in self.vectors]

    def to_jsonable(self) -> list[list[str]]:
        return [[repr(x) for x in vec] for vec in self.vectors]

    def to_payload(self) -> dict:
        return {"vectors": self.to_jsonable()}


class ApiEmbedder:
    """Remote embedding backend; returns fixed-dimension vectors."""

    backend = "llm_api"

    def __init__(self, endpoint: str, model: str, dimension: int,
                 credential_env: str = "PLANSQL_API_KEY", post=None):
        if dimension < 1:
            raise ConfigError("embedding dimension must be >= 1")
        self.endpoint = endpoint
        self.model = model
        self.dimension = dimension
        self.credential_env = credential_env
        self._post = post or requests.post

    def _embed(self, texts) -> list[list[float]]:
        credential = os.environ.get(self.credential_env)
        if not credential:
            raise ConfigError(
                f"embedding credential not set (environment variable {self.credential_env})"
            )
        try:
            response = self._post(
                self.endpoint,
                json={"model": self.model, "input": list(texts)},
                headers={"Authorization": f"Bearer {credential}"},
                timeout=60,
            )
            response.raise_for_status()
            payload = response.json()
            vectors = [item["embedding"] for item in payload["data"]]
        except Exception as exc:
            raise RetrievalBackendError(f"embedding request failed: {exc}") from exc
        for vec in vectors:
            if len(vec) != self.dimension:
                raise RetrievalBackendError(
                    f"backend returned dimension {len(vec)}, expected {self.dimension}"
                )
        return vectors

    def build(self, corpus) -> DenseSpace:
        corpus = list(corpus)
        return DenseSpace(corpus, self._embed(corpus), self._embed)

    def restore(self, corpus, payload: dict) -> DenseSpace:
        vectors = [[float(x) for x in vec] for vec in payload["vectors"]]
        return DenseSpace(list(corpus), vectors, self._embed)


def make_embedder(backend: str, **kwargs):
    if backend == "lexical_fallback":
        return LexicalEmbedder()
    if backend == "llm_api":
        return ApiEmbedder(**kwargs)
    raise ConfigError(f"unknown embedder backend {backend!r}")


# ---------------------------------------------------------------------------
# Schema index
# ---------------------------------------------------------------------------

@dataclass
class SchemaIndex:
    db_id: str
    backend: str
    elements: list[SchemaElement]
    space: object = field(repr=False)

    def to_jsonable(self) -> dict:
        return {
            "db_id": self.db_id,
            "backend": self.backend,
            "elements": [
                [e.kind, e.qualified_name, e.descriptor_text] for e in self.elements
            ],
            "vectors": self.space.to_jsonable(),
        }


def index_schema(schema: DatabaseSchema, embedder) -> SchemaIndex:
    """Index every table and column of a schema exactly once."""
    elements = schema_elements(schema)
    if not elements:
        raise RetrievalBackendError(f"schema {schema.db_id!r} has no elements to index")
    space = embedder.build([e.descriptor_text for e in elements])
    return SchemaIndex(
        db_id=schema.db_id, backend=embedder.backend, elements=elements, space=space
    )


def retrieve_schema(index: SchemaIndex, query_text: str, k: int) -> list[SchemaElement]:
    """Top-k schema elements by descending similarity, ties by qualified_name.

    The ranking over the full index is total and deterministic, so retrieving
    k' < k returns exactly the first k' items of the k-retrieval.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = index.space.scores(query_text)
    ranked = sorted(
        zip(index.elements, scores), key=lambda pair: (-pair[1], pair[0].qualified_name)
    )
    return [element for element, _ in ranked[:k]]


def retrieve_icl(pool, query_text: str, m: int, embedder=None) -> list[IclExample]:
    """Most similar (question, gold SQL) pairs, never echoing the query itself."""
    if m < 1:
        raise ConfigError("icl_top_m must be >= 1")
    candidates = [ex for ex in pool if ex.question != query_text]
    if not candidates:
        return []
    embedder = embedder or LexicalEmbedder()
    space = embedder.build([ex.question for ex in candidates])
    scores = space.scores(query_text)
    ranked = sorted(
        zip(candidates, scores), key=lambda pair: (-pair[1], pair[0].question)
    )
    return [example for example, _ in ranked[:m]]


# ---------------------------------------------------------------------------
# Optional on-disk index cache
# ---------------------------------------------------------------------------

class SchemaIndexCache:
    """Caches serialized indexes keyed by (db_id, backend, schema content hash).

    Keying on the content hash invalidates entries whenever the schema changes.
    """

    def __init__(self, cache_dir):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def _content_key(schema: DatabaseSchema) -> str:
        payload = json.dumps(
            [[e.kind, e.qualified_name, e.descriptor_text] for e in schema_elements(schema)],
            ensure_ascii=False,
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def _path(self, schema: DatabaseSchema, backend: str) -> Path:
        return self.cache_dir / f"{schema.db_id}-{backend}-{self._content_key(schema)}.json"

    def load(self, schema: DatabaseSchema, embedder) -> SchemaIndex | None:
        path = self._path(schema, embedder.backend)
        if not path.is_file():
            return None
        cached = json.loads(path.read_text(encoding="utf-8"))
        elements = schema_elements(schema)
        space = embedder.restore([e.descriptor_text for e in elements], cached["space"])
        return SchemaIndex(
            db_id=schema.db_id, backend=embedder.backend, elements=elements, space=space
        )

    def store(self, index: SchemaIndex, schema: DatabaseSchema) -> Path:
        path = self._path(schema, index.backend)
        payload = {
            "elements": [
                [e.kind, e.qualified_name, e.descriptor_text] for e in index.elements
            ],
            "space": index.space.to_payload(),
        }
        path.write_text(
            json.dumps(payload, ensure_ascii=False, sort_keys=True), encoding="utf-8"
        )
        return path
