"""Key-value datastore over sentence vectors: exact search and an IVF index."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Sentence, StyledCorpus
from .errors import BuildError, ConfigurationError, DatastoreFormatError, DimensionMismatchError

MAGIC = b"SAPSTORE"
FORMAT_VERSION = 1
METRICS = ("cosine", "l2")


@dataclass(frozen=True)
class Hit:
    id: int
    value: Sentence
    distance: float


@dataclass
class QueryResult:
    hits: list[Hit]
    exhaustive: bool
    short: bool = False

    @property
    def ids(self) -> list[int]:
        return [h.id for h in self.hits]

    @property
    def best(self) -> Hit:
        return self.hits[0]


@dataclass
class IVFIndex:
    centroids: np.ndarray  # (k_c, d) float32
    assignments: np.ndarray  # (n,) int32, centroid id per entry
    nprobe: int = 1
    inverted_lists: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        k_c = len(self.centroids)
        if k_c < 1:
            raise ConfigurationError("IVF index needs at least one centroid")
        if not 1 <= self.nprobe <= k_c:
            raise ConfigurationError(f"nprobe must be in [1, {k_c}], got {self.nprobe}")
        if not self.inverted_lists:
            order = np.argsort(self.assignments, kind="stable")
            bounds = np.searchsorted(self.assignments[order], np.arange(k_c + 1))
            self.inverted_lists = [order[bounds[c] : bounds[c + 1]] for c in range(k_c)]

    @property
    def n_lists(self) -> int:
        return len(self.centroids)


def _pairwise_distance(metric: str, keys: np.ndarray, h: np.ndarray,
                       key_sq: np.ndarray | None = None) -> np.ndarray:
    """Distances from one query to each row; row results do not depend on the other rows."""
    keys = np.asarray(keys, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    if key_sq is None:
        key_sq = np.einsum("ij,ij->i", keys, keys)
    dots = np.einsum("ij,j->i", keys, h)
    h_sq = float(h @ h)
    if metric == "cosine":
        norms = np.sqrt(key_sq) * np.sqrt(h_sq)
        with np.errstate(invalid="ignore", divide="ignore"):
            sim = np.where(norms > 0, dots / np.where(norms > 0, norms, 1.0), 0.0)
        return 1.0 - np.clip(sim, -1.0, 1.0)
    if metric == "l2":
        return np.sqrt(np.maximum(key_sq - 2.0 * dots + h_sq, 0.0))
    raise ConfigurationError(f"unknown metric {metric!r}")


def _select(ids: np.ndarray, dists: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if len(ids) > 4 * k:
        # cheap prefilter; keep every candidate tied with the k-th distance
        kth = np.partition(dists, k - 1)[k - 1]
        keep = dists <= kth
        ids, dists = ids[keep], dists[keep]
    order = np.lexsort((ids, dists))[:k]
    return ids[order], dists[order]


class Datastore:
    """Immutable (key, value) store. Ids are the dense row indices 0..n-1."""

    def __init__(self, keys: np.ndarray, values: Sequence[str], style_id: str = "",
                 metric: str = "cosine", provider: str = "", index: IVFIndex | None = None):
        keys = np.ascontiguousarray(keys, dtype=np.float32)
        if keys.ndim != 2:
            raise BuildError("keys must be a 2-d matrix")
        if len(values) != len(keys):
            raise BuildError("one value per key required")
        if metric not in METRICS:
            raise ConfigurationError(f"metric must be one of {METRICS}")
        if not np.all(np.isfinite(keys)):
            raise BuildError("non-finite key components")
        self.keys = keys
        self.keys.setflags(write=False)
        self.values = [v.text if isinstance(v, Sentence) else str(v) for v in values]
        self.style_id = style_id
        self.metric = metric
        self.provider = provider
        self.index = index
        self._text_ids: dict[str, list[int]] | None = None
        self._keys64 = keys.astype(np.float64)
        self._key_sq = np.einsum("ij,ij->i", self._keys64, self._keys64)

    def __len__(self):
        return len(self.values)

    @property
    def dimension(self) -> int:
        return self.keys.shape[1]

    def value(self, i: int) -> Sentence:
        return Sentence(self.values[i])

    def ids_of_text(self, text: str) -> list[int]:
        if self._text_ids is None:
            table: dict[str, list[int]] = {}
            for i, v in enumerate(self.values):
                table.setdefault(v, []).append(i)
            self._text_ids = table
        return list(self._text_ids.get(text, ()))

    def distances(self, h, ids: np.ndarray | None = None) -> np.ndarray:
        if ids is None:
            return _pairwise_distance(self.metric, self._keys64, h, self._key_sq)
        return _pairwise_distance(self.metric, self._keys64[ids], h, self._key_sq[ids])

    def query(self, h, k: int = 1, exclude_ids: Iterable[int] = (), exact: bool | None = None,
              nprobe: int | None = None) -> QueryResult:
        h = np.asarray(h)
        if h.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"query has shape {h.shape}, store dimension is {self.dimension}"
            )
        if k < 1:
            raise ConfigurationError("k must be >= 1")
        use_index = self.index is not None and not exact
        if use_index:
            probe = nprobe or self.index.nprobe
            if not 1 <= probe <= self.index.n_lists:
                raise ConfigurationError(f"nprobe must be in [1, {self.index.n_lists}]")
            cdist = _pairwise_distance(self.metric, self.index.centroids, h)
            lists = np.lexsort((np.arange(len(cdist)), cdist))[:probe]
            cand = np.sort(np.concatenate([self.index.inverted_lists[c] for c in lists]))
            exhaustive = probe == self.index.n_lists
        else:
            cand = np.arange(len(self))
            exhaustive = True
        excl = np.fromiter((int(i) for i in exclude_ids), dtype=np.int64)
        if len(excl):
            cand = cand[~np.isin(cand, excl)]
        if len(cand) == 0:
            return QueryResult([], exhaustive, short=True)
        dists = self.distances(h, cand)
        ids, ds = _select(cand.astype(np.int64), dists, min(k, len(cand)))
        hits = [Hit(int(i), self.value(int(i)), float(d)) for i, d in zip(ids, ds)]
        return QueryResult(hits, exhaustive, short=len(hits) < k)

    def query_batch(self, queries, k: int = 1, exact: bool | None = None) -> list[QueryResult]:
        return [self.query(q, k, exact=exact) for q in np.asarray(queries)]

    def with_index(self, index: IVFIndex | None) -> "Datastore":
        return Datastore(self.keys, self.values, self.style_id, self.metric, self.provider, index)

    # --- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        n, d = self.keys.shape
        flags = 1 if self.index is not None else 0
        parts = [
            MAGIC,
            struct.pack("<HBBIQ", FORMAT_VERSION, METRICS.index(self.metric), flags, d, n),
        ]
        for s in (self.style_id, self.provider):
            b = s.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
        parts.append(self.keys.astype("<f4").tobytes())
        for v in self.values:
            b = v.encode("utf-8")
            parts.append(struct.pack("<I", len(b)) + b)
        if self.index is not None:
            idx = self.index
            parts.append(struct.pack("<II", idx.n_lists, idx.nprobe))
            parts.append(np.asarray(idx.centroids, dtype="<f4").tobytes())
            parts.append(np.asarray(idx.assignments, dtype="<i4").tobytes())
        body = b"".join(parts)
        return body + struct.pack("<I", zlib.crc32(body))

    def checksum(self) -> str:
        return f"{zlib.crc32(self.to_bytes()):08x}"

    @classmethod
    def from_bytes(cls, data: bytes) -> "Datastore":
        if len(data) < len(MAGIC) + 20:
            raise DatastoreFormatError("datastore file truncated")
        body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) != crc:
            raise DatastoreFormatError("datastore checksum mismatch (corrupt or truncated file)")
        if body[: len(MAGIC)] != MAGIC:
            raise DatastoreFormatError("not a datastore file (bad magic)")
        pos = len(MAGIC)
        version, metric_tag, flags, d, n = struct.unpack_from("<HBBIQ", body, pos)
        pos += struct.calcsize("<HBBIQ")
        if version != FORMAT_VERSION:
            raise DatastoreFormatError(f"unsupported datastore version {version}")

        def read_str():
            nonlocal pos
            (ln,) = struct.unpack_from("<I", body, pos)
            pos += 4
            s = body[pos : pos + ln].decode("utf-8")
            pos += ln
            return s

        style_id = read_str()
        provider = read_str()
        keys = np.frombuffer(body, dtype="<f4", count=n * d, offset=pos).reshape(n, d).astype(np.float32)
        pos += 4 * n * d
        values = [read_str() for _ in range(n)]
        index = None
        if flags & 1:
            k_c, nprobe = struct.unpack_from("<II", body, pos)
            pos += 8
            centroids = np.frombuffer(body, dtype="<f4", count=k_c * d, offset=pos).reshape(k_c, d)
            pos += 4 * k_c * d
            assignments = np.frombuffer(body, dtype="<i4", count=n, offset=pos).astype(np.int32)
            pos += 4 * n
            index = IVFIndex(centroids.astype(np.float32), assignments, nprobe)
        if pos != len(body):
            raise DatastoreFormatError("trailing bytes in datastore file")
        return cls(keys, values, style_id, METRICS[metric_tag], provider, index)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Datastore":
        return cls.from_bytes(Path(path).read_bytes())


def build(corpus: StyledCorpus, provider, metric: str = "cosine") -> Datastore:
    if len(corpus) == 0:
        raise BuildError(f"cannot build a datastore from empty corpus {corpus.style_id!r}")
    keys = provider.embed_batch(corpus.sentences)
    return Datastore(keys, corpus.texts, corpus.style_id, metric, provider.name)


def brute_force_query(keys, h, metric: str, k: int = 1, exclude_ids: Iterable[int] = ()):
    """Reference linear scan returning [(id, distance)]; kept deliberately naive."""
    excluded = set(int(i) for i in exclude_ids)
    rows = []
    h = [float(x) for x in h]
    hn = sum(x * x for x in h) ** 0.5
    for i, r in enumerate(np.asarray(keys, dtype=np.float64)):
        if i in excluded:
            continue
        if metric == "cosine":
            rn = float(np.sqrt(np.dot(r, r)))
            sim = float(np.dot(r, h)) / (rn * hn) if rn > 0 and hn > 0 else 0.0
            d = 1.0 - min(1.0, max(-1.0, sim))
        else:
            d = float(np.sqrt(np.dot(r - h, r - h)))
        rows.append((d, i))
    rows.sort()
    return [(i, d) for d, i in rows[:k]]


# --- k-means / IVF ------------------------------------------------------------

def _normalize_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[i] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centers[i : i + 1])[:, 0])
    return centers


def kmeans(x: np.ndarray, k: int, iters: int = 10, seed: int = 0, spherical: bool = False):
    """Lloyd iterations from k-means++ seeds. Returns (centroids, labels)."""
    x = np.asarray(x, dtype=np.float64)
    if spherical:
        x = _normalize_rows(x)
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(x, k, rng)
    labels = np.argmin(_sq_dists(x, centers), axis=1)
    for _ in range(iters):
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        nonempty = counts > 0
        centers[nonempty] = sums[nonempty] / counts[nonempty, None]
        if spherical:
            centers = _normalize_rows(centers)
        new_labels = np.argmin(_sq_dists(x, centers), axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


def build_ivf(store: Datastore, k_c: int, iters: int = 10, seed: int = 0, nprobe: int = 1) -> IVFIndex:
    n = len(store)
    if k_c < 1 or k_c > n:
        raise ConfigurationError(f"k_c must be in [1, {n}] for a store of size {n}, got {k_c}")
    centers, _ = kmeans(store.keys, k_c, iters, seed, spherical=store.metric == "cosine")
    centers = centers.astype(np.float32)
    # final assignment uses the store metric so lists match what queries probe
    assign = np.empty(n, dtype=np.int32)
    for start in range(0, n, 4096):
        block = store.keys[start : start + 4096].astype(np.float64)
        c = centers.astype(np.float64)
        if store.metric == "cosine":
            d = 1.0 - _normalize_rows(block) @ _normalize_rows(c).T
        else:
            d = _sq_dists(block, c)
        assign[start : start + len(block)] = np.argmin(d, axis=1)
    return IVFIndex(centers, assign, min(nprobe, k_c))
