"""Sentence embedding providers used as datastore keys and retrieval queries."""

from __future__ import annotations

import hashlib
import math
from typing import Sequence

import numpy as np

from .corpus import Sentence
from .errors import ConfigurationError

DEFAULT_DIM = 256


def _as_text(sentence) -> str:
    return sentence.text if isinstance(sentence, Sentence) else str(sentence)


def basis_vector(dim: int) -> np.ndarray:
    v = np.zeros(dim, dtype=np.float32)
    v[0] = 1.0
    return v


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


class EmbeddingProvider:
    name = "base"
    dimension = 0
    deterministic = True
    unit_norm = True

    def embed(self, sentence) -> np.ndarray:
        raise NotImplementedError

    def embed_batch(self, sentences: Sequence) -> np.ndarray:
        if len(sentences) == 0:
            return np.zeros((0, self.dimension), dtype=np.float32)
        return np.stack([self.embed(s) for s in sentences])

    def describe(self) -> dict:
        return {"name": self.name, "dimension": self.dimension}


def _hash64(feature: str) -> int:
    return int.from_bytes(hashlib.blake2b(feature.encode("utf-8"), digest_size=8).digest(), "little")


class HashingEmbedder(EmbeddingProvider):
    """Signed feature hashing of word unigrams and character n-grams.

    Character n-grams are taken per word with ``<``/``>`` boundary marks.
    Term counts are damped with log(1 + tf) and the result is L2-normalised.
    The empty sentence maps to the basis vector e0.
    """

    name = "hash"

    def __init__(self, dimension: int = DEFAULT_DIM, ngram_range=(3, 5), use_words: bool = True):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.ngram_range = tuple(ngram_range)
        self.use_words = use_words
        self.name = f"hash{dimension}"
        self._feature_cache: dict[str, tuple[int, float]] = {}

    def features(self, text: str) -> dict[str, int]:
        counts: dict[str, int] = {}
        lo, hi = self.ngram_range
        for word in text.split():
            if self.use_words:
                key = "w:" + word
                counts[key] = counts.get(key, 0) + 1
            padded = "<" + word + ">"
            for n in range(lo, hi + 1):
                for i in range(len(padded) - n + 1):
                    key = "c:" + padded[i : i + n]
                    counts[key] = counts.get(key, 0) + 1
        return counts

    def _bucket(self, feature: str) -> tuple[int, float]:
        hit = self._feature_cache.get(feature)
        if hit is None:
            h = _hash64(feature)
            hit = (h % self.dimension, 1.0 if (h >> 63) & 1 else -1.0)
            if len(self._feature_cache) < 1_000_000:
                self._feature_cache[feature] = hit
        return hit

    def embed(self, sentence) -> np.ndarray:
        text = _as_text(sentence)
        feats = self.features(text)
        if not feats:
            return basis_vector(self.dimension)
        v = np.zeros(self.dimension, dtype=np.float64)
        for feat, tf in sorted(feats.items()):
            idx, sign = self._bucket(feat)
            v[idx] += sign * math.log1p(tf)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return basis_vector(self.dimension)
        return (v / norm).astype(np.float32)

    def describe(self):
        return {"name": self.name, "dimension": self.dimension, "ngram_range": list(self.ngram_range)}


class LearnedEmbedder(EmbeddingProvider):
    """Mean of a trained model's token embeddings, L2-normalised."""

    name = "learned"

    def __init__(self, embedding_matrix, tokenizer):
        mat = np.asarray(embedding_matrix, dtype=np.float64)
        self._matrix = mat
        self.tokenizer = tokenizer
        self.dimension = mat.shape[1]

    @classmethod
    def from_model(cls, model, tokenizer):
        return cls(model.embedding.weight.detach().cpu().double().numpy(), tokenizer)

    def embed(self, sentence) -> np.ndarray:
        text = _as_text(sentence)
        ids = self.tokenizer.encode(text)
        if not ids:
            return basis_vector(self.dimension)
        v = self._matrix[ids].mean(axis=0)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return basis_vector(self.dimension)
        return (v / norm).astype(np.float32)


def get_provider(name: str = "hash256", model=None, tokenizer=None) -> EmbeddingProvider:
    if name.startswith("hash"):
        dim = int(name[4:]) if name[4:] else DEFAULT_DIM
        return HashingEmbedder(dim)
    if name == "learned":
        if model is None or tokenizer is None:
            raise ConfigurationError("the learned embedder needs a trained model and its tokenizer")
        return LearnedEmbedder.from_model(model, tokenizer)
    raise ConfigurationError(f"unknown embedder {name!r}; expected hash<dim> or learned")


def embed(provider: EmbeddingProvider, sentence) -> np.ndarray:
    return provider.embed(sentence)


def embed_batch(provider: EmbeddingProvider, sentences: Sequence) -> np.ndarray:
    return provider.embed_batch(sentences)
