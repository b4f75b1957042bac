import random

import numpy as np
import pytest

from styleap.corpus import ParallelPair, Sentence, StyledCorpus, train_tokenizer
from styleap.datastore import build
from styleap.embedder import get_provider
from styleap.errors import BuildError, ConfigurationError
from styleap.prompt_builder import (
    MixConfig, PromptedPair, build_dataset, build_training_pair, join_prompt, read_dataset,
    select_prompt_inference, split_prompt, unsupervised_pool, write_dataset,
)

from oracles import scan

PROV = get_provider("hash256")


def store(*texts, style="A"):
    return build(StyledCorpus(style, [Sentence(t) for t in texts]), PROV)


def pair(s, t, label=None):
    return ParallelPair(Sentence(s), Sentence(t), label)


def test_augmented_format():
    pp = build_training_pair(pair("S", "T"), store("P", "T"), PROV)
    assert pp.augmented_source.text == "P [s] S"
    assert pp.augmented_target.text == "P [s] T"
    assert split_prompt(pp.augmented_target.text) == ("P", "T")


def test_self_exclusion():
    pp = build_training_pair(pair("src", "the target"), store("the target", "other"), PROV)
    assert pp.prompt.text == "other"
    with pytest.raises(BuildError):
        build_training_pair(pair("s", "only"), store("only"), PROV)


def test_toy_store_matches_oracle():
    texts = ["red fox runs", "blue fox sleeps", "green cat runs", "red cat naps", "old dog barks"]
    s = store(*texts)
    for tgt in ["red fox naps", "a cat runs", "dog barks loudly", "blue sleeps"]:
        keys = [PROV.embed(t).astype(float).tolist() for t in texts]
        want = texts[scan(keys, PROV.embed(tgt).astype(float).tolist(), "cosine")[0]]
        assert build_training_pair(pair("x", tgt), s, PROV).prompt.text == want


def test_literal_separator_stays_invertible():
    tok = train_tokenizer([StyledCorpus("x", [Sentence("a [s] b"), Sentence("p q")])], 40, 1)
    pp = build_training_pair(pair("a [s] b", "a [s] b"), store("p q", "a [s] b"), PROV, tokenizer=tok)
    for side in (pp.augmented_source, pp.augmented_target):
        assert list(side.tokens).count(tok.sep_id) == 1
        i = side.tokens.index(tok.sep_id)
        assert tok.decode(side.tokens[i + 1:]) == "a [s] b"
    assert split_prompt(join_prompt("a [s] b", "c [s]")) == ("a [s] b", "c [s]")


def _pairs(n):
    return [pair(f"s{i} w", f"t{i} w") for i in range(n)]


def test_mix_fractions():
    s = store(*[f"t{i} w" for i in range(0, 200)])
    ps = _pairs(100)
    assert build_dataset(ps, s, PROV, mix=MixConfig(0.0)) == ps
    out = build_dataset(ps[:10], s, PROV, mix=MixConfig(1.0))
    assert all(isinstance(x, PromptedPair) for x in out)
    a = build_dataset(ps, s, PROV, mix=MixConfig(0.5, seed=3))
    b = build_dataset(ps, s, PROV, mix=MixConfig(0.5, seed=3))
    chosen = [i for i, x in enumerate(a) if isinstance(x, PromptedPair)]
    assert len(a) == 100 and len(chosen) == 50
    assert chosen == [i for i, x in enumerate(b) if isinstance(x, PromptedPair)]
    assert all(a[i] is ps[i] for i in range(100) if i not in chosen)
    assert all(x.prompt.text != x.target.text for x in a if isinstance(x, PromptedPair))


def test_inference_strategies():
    one = store("only one")
    for strat in ("retrieved_target", "retrieved_source", "random"):
        assert select_prompt_inference(Sentence("q"), one, PROV, strat, source=Sentence("z")).text == "only one"
    s = store(*[f"w{i} v{i % 7}" for i in range(30)])
    for d in ["w3 v3", "zz"]:
        assert select_prompt_inference(Sentence(d), s, PROV, "fixed", fixed_prompt="X").text == "X"
    seq = [select_prompt_inference(Sentence("d"), s, PROV, "random", seed=i).text for i in range(100)]
    assert seq == [select_prompt_inference(Sentence("d"), s, PROV, "random", seed=i).text for i in range(100)]
    assert len(set(seq)) > 5
    assert select_prompt_inference(Sentence("w12 v5"), s, PROV).text == "w12 v5"
    assert select_prompt_inference(Sentence("no"), s, PROV, "retrieved_source", source=Sentence("w4 v4")).text == "w4 v4"
    with pytest.raises(ConfigurationError):
        select_prompt_inference(Sentence("d"), s, PROV, "fixed")


def test_unsupervised_pool():
    a = StyledCorpus("A", [Sentence(t) for t in ("a1", "a2", "a3")])
    b = StyledCorpus("B", [Sentence(t) for t in ("b1", "b2", "b3", "b4")])
    pool = unsupervised_pool([a, b], PROV)
    assert len(pool) == 7 and pool.values == a.texts + b.texts
    assert pool.to_bytes() == unsupervised_pool([a, b], PROV).to_bytes()


def test_pool_retrieves_matching_style(synthetic_task):
    from styleap.evaluation import StyleClassifier
    task = synthetic_task
    clf = StyleClassifier(task.lexicon.markers())
    pool = unsupervised_pool([task.stylized[s] for s in task.spec.styles], PROV)
    for style in task.spec.styles:
        queries = task.test_references[style][:500]
        hits = sum(clf.classify(pool.query(PROV.embed(q)).best.value.text) == style for q in queries)
        assert hits / len(queries) >= 0.8


def test_dataset_file_roundtrip(tmp_path):
    tok = train_tokenizer([StyledCorpus("x", [Sentence("t1 w s1 [s]"), Sentence("t2 s2")])], 60, 1)
    ps = [pair("s1 [s]", "t1 w", "A"), pair("s2", "t2")]
    items = build_dataset(ps, store("t1 w", "t2", "t1"), PROV, mix=MixConfig(0.5, 1), tokenizer=tok)
    p = tmp_path / "d.tsv"
    write_dataset(items, p, {"strategy": "retrieved_target"})
    rows = read_dataset(p, tok)
    assert len(rows) == 2
    for row, it in zip(rows, items):
        want = it.augmented_source.tokens if isinstance(it, PromptedPair) else tok.encode(it.source.text)
        assert tuple(row[0]) == tuple(want)
    assert (tmp_path / "d.tsv.json").exists()
