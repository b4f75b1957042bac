import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from styleap.corpus import Sentence, StyledCorpus
from styleap.datastore import Datastore, build, build_ivf
from styleap.embedder import get_provider
from styleap.errors import BuildError, ConfigurationError, DatastoreFormatError, DimensionMismatchError

from oracles import scan


def random_store(n, d, seed, metric="cosine"):
    rng = np.random.default_rng(seed)
    keys = rng.standard_normal((n, d)).astype(np.float32)
    return Datastore(keys, [f"v{i}" for i in range(n)], "S", metric)


def test_build_order_and_determinism():
    prov = get_provider("hash256")
    c = StyledCorpus("A", [Sentence("one two"), Sentence("three"), Sentence("four five")])
    s = build(c, prov)
    assert len(s) == 3 and s.values == c.texts
    assert s.to_bytes() == build(c, prov).to_bytes()
    one = build(StyledCorpus("A", [Sentence("x")]), prov)
    assert one.query(prov.embed("anything")).best.value.text == "x"
    with pytest.raises(BuildError):
        build(StyledCorpus("A", []), prov)


def test_exact_key_is_first_with_zero_distance():
    s = random_store(50, 8, 1, "l2")
    hit = s.query(s.keys[17]).best
    assert hit.id == 17 and hit.distance == 0.0


def test_ties_break_by_smaller_id():
    keys = np.array([[1, 0], [0, 1], [1, 0], [1, 0]], dtype=np.float32)
    s = Datastore(keys, list("abcd"), metric="l2")
    assert s.query(np.array([1, 0], dtype=np.float32), k=3).ids == [0, 2, 3]
    assert s.query(np.array([1, 0], dtype=np.float32), k=2, exclude_ids={0}).ids == [2, 3]


def test_short_result_and_errors():
    s = random_store(5, 4, 2)
    r = s.query(s.keys[0], k=10, exclude_ids={1})
    assert r.short and len(r.hits) == 4
    with pytest.raises(DimensionMismatchError):
        s.query(np.zeros(3))
    with pytest.raises(ConfigurationError):
        s.query(s.keys[0], k=0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 40), d=st.integers(1, 6), seed=st.integers(0, 10_000), k=st.integers(1, 5),
       metric=st.sampled_from(["cosine", "l2"]), data=st.data())
def test_exact_query_matches_scan(n, d, seed, k, metric, data):
    s = random_store(n, d, seed, metric)
    # duplicate rows force ties
    if n > 3:
        s = Datastore(np.vstack([s.keys, s.keys[:2]]), s.values + ["dup0", "dup1"], "S", metric)
    excl = set(data.draw(st.lists(st.integers(0, len(s) - 1), max_size=3)))
    q = np.random.default_rng(seed + 1).standard_normal(d).astype(np.float32)
    got = s.query(q, k, exclude_ids=excl)
    assert got.ids == scan(s.keys.astype(float).tolist(), q.astype(float).tolist(), metric, k, excl)
    assert not set(got.ids) & excl
    ds = [h.distance for h in got.hits]
    assert ds == sorted(ds)


def test_ivf_degenerate_cases():
    s = random_store(300, 16, 3)
    qs = np.random.default_rng(9).standard_normal((50, 16)).astype(np.float32)
    one = s.with_index(build_ivf(s, 1))
    assert len(one.index.inverted_lists[0]) == 300
    full = s.with_index(build_ivf(s, 8, nprobe=8))
    for q in qs:
        exact = s.query(q, 3).ids
        assert one.query(q, 3).ids == exact
        assert full.query(q, 3).ids == exact
    every = build_ivf(s, 300)
    ids = np.concatenate(every.inverted_lists)
    assert sorted(ids.tolist()) == list(range(300))
    with pytest.raises(ConfigurationError):
        build_ivf(s, 301)


def test_ivf_is_seeded():
    s = random_store(200, 8, 4)
    a, b = build_ivf(s, 10, seed=5), build_ivf(s, 10, seed=5)
    assert np.array_equal(a.centroids, b.centroids) and np.array_equal(a.assignments, b.assignments)


def test_save_load_roundtrip(tmp_path):
    s = random_store(100, 12, 6, "l2").with_index(None)
    p = tmp_path / "s.bin"
    s.save(p)
    back = Datastore.load(p)
    assert np.array_equal(back.keys, s.keys) and back.values == s.values and back.metric == "l2"
    assert back.to_bytes() == s.to_bytes()


def test_corruption_detected(tmp_path):
    s = random_store(20, 4, 7)
    data = bytearray(s.to_bytes())
    data[len(data) // 2] ^= 0xFF
    with pytest.raises(DatastoreFormatError):
        Datastore.from_bytes(bytes(data))
    with pytest.raises(DatastoreFormatError):
        Datastore.from_bytes(bytes(s.to_bytes()[:-9]))


def test_file_size_close_to_raw_matrix():
    n, d = 10_000, 256
    s = Datastore(np.zeros((n, d), dtype=np.float32), [f"s{i}" for i in range(n)])
    values = sum(len(v.encode()) for v in s.values)
    overhead = len(s.to_bytes()) - n * d * 4 - values
    assert 0 < overhead <= 4 * n + 256  # length prefixes plus a fixed header
