"""Prompt-augmented training data and prompt selection strategies."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence


from .corpus import (
    SEP, ParallelPair, Sentence, StyledCorpus, TokenizerModel, escape_specials,
    split_unescaped, unescape_specials,
)
from .datastore import Datastore, build
from .errors import BuildError, ConfigurationError

STRATEGIES = ("retrieved_target", "retrieved_source", "random", "fixed", "unsupervised")
INFERENCE_STRATEGIES = ("retrieved_target", "retrieved_source", "random", "fixed")


@dataclass(frozen=True)
class PromptedPair:
    prompt: Sentence
    source: Sentence
    target: Sentence
    augmented_source: Sentence
    augmented_target: Sentence
    strategy: str
    style_label: str | None = None


@dataclass(frozen=True)
class MixConfig:
    prompted_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.prompted_fraction <= 1.0:
            raise ConfigurationError("prompted_fraction must be in [0, 1]")


def join_prompt(prompt: str, payload: str, specials=(SEP,)) -> str:
    """Text form ``prompt [s] payload`` with literal specials escaped on both sides."""
    return f"{escape_specials(prompt, specials)} {SEP} {escape_specials(payload, specials)}"


def split_prompt(text: str, specials=(SEP,)) -> tuple[str, str] | None:
    parts = split_unescaped(text, SEP, specials)
    if len(parts) < 2:
        return None
    head, rest = parts[0], SEP.join(parts[1:])
    return unescape_specials(head.strip(), specials), unescape_specials(rest.strip(), specials)


def augment(prompt: Sentence, payload: Sentence, sep_id: int | None) -> Sentence:
    text = join_prompt(prompt.text, payload.text)
    if sep_id is None:
        return Sentence(text)
    return Sentence(text, tuple(prompt.tokens) + (sep_id,) + tuple(payload.tokens))


def make_prompted(prompt: Sentence, pair: ParallelPair, strategy: str,
                  tokenizer: TokenizerModel | None = None) -> PromptedPair:
    if tokenizer is not None:
        prompt = tokenizer.tokenize(prompt.text) if not prompt.tokens else prompt
        src = pair.source if pair.source.tokens or not pair.source.text else tokenizer.tokenize(pair.source.text)
        trg = pair.target if pair.target.tokens or not pair.target.text else tokenizer.tokenize(pair.target.text)
        sep = tokenizer.sep_id
    else:
        src, trg, sep = pair.source, pair.target, None
    return PromptedPair(prompt, src, trg, augment(prompt, src, sep), augment(prompt, trg, sep),
                        strategy, pair.style_label)


def _self_exclusion(store: Datastore, target_text: str) -> list[int]:
    return store.ids_of_text(target_text)


def _retrieve(store: Datastore, query_vec, exclude) -> Sentence:
    res = store.query(query_vec, k=1, exclude_ids=exclude)
    if not res.hits:
        raise BuildError("datastore too small: nothing left after excluding the query sentence")
    return res.best.value


def build_training_pair(pair: ParallelPair, store: Datastore, provider, strategy: str = "retrieved_target",
                        tokenizer: TokenizerModel | None = None, exclude_self: bool = True,
                        rng: random.Random | None = None, fixed_prompt: str | None = None,
                        query_vec=None) -> PromptedPair:
    """Attach a prompt to one parallel pair.

    Under ``retrieved_target`` (and ``unsupervised``, which is the same rule
    over a pooled store) the query is the pair's target, and store entries
    equal to that target are excluded unless ``exclude_self`` is off.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    if strategy in ("retrieved_target", "unsupervised"):
        h = provider.embed(pair.target) if query_vec is None else query_vec
        exclude = _self_exclusion(store, pair.target.text) if exclude_self else []
        prompt = _retrieve(store, h, exclude)
    elif strategy == "retrieved_source":
        h = provider.embed(pair.source) if query_vec is None else query_vec
        prompt = _retrieve(store, h, [])
    elif strategy == "random":
        rng = rng or random.Random(0)
        prompt = store.value(rng.randrange(len(store)))
    else:
        if fixed_prompt is None:
            raise ConfigurationError("strategy 'fixed' requires fixed_prompt")
        prompt = Sentence(fixed_prompt)
    return make_prompted(prompt, pair, strategy, tokenizer)


def _store_for(stores, label):
    if isinstance(stores, Datastore):
        return stores
    if label in stores:
        return stores[label]
    if None in stores:
        return stores[None]
    raise ConfigurationError(f"no training datastore for style label {label!r}")


def prompted_indices(n: int, mix: MixConfig) -> list[int]:
    k = int(round(mix.prompted_fraction * n))
    rng = random.Random(f"mix:{mix.seed}")
    return sorted(rng.sample(range(n), k))


def build_dataset(pairs: Sequence[ParallelPair], stores: Datastore | Mapping, provider,
                  strategy: str = "retrieved_target", mix: MixConfig = MixConfig(),
                  tokenizer: TokenizerModel | None = None, max_len: int | None = None,
                  exclude_self: bool = True, fixed_prompt: str | None = None) -> list:
    """Mix plain pairs with prompted copies; output keeps input order and size.

    ``stores`` is one datastore or a mapping from style label to datastore
    (key ``None`` is the fallback). A prompted pair whose augmented side is
    longer than ``max_len`` tokens is replaced by its plain pair.
    """
    chosen = prompted_indices(len(pairs), mix)
    chosen_set = set(chosen)
    qvecs = {}
    if strategy in ("retrieved_target", "unsupervised", "retrieved_source") and chosen:
        side = [pairs[i].source if strategy == "retrieved_source" else pairs[i].target for i in chosen]
        vecs = provider.embed_batch(side)
        qvecs = dict(zip(chosen, vecs))
    rng = random.Random(f"prompts:{mix.seed}")
    out = []
    for i, pair in enumerate(pairs):
        if i not in chosen_set:
            out.append(pair)
            continue
        pp = build_training_pair(pair, _store_for(stores, pair.style_label), provider, strategy, tokenizer,
                                 exclude_self, rng, fixed_prompt, qvecs.get(i))
        if max_len is not None and tokenizer is not None and (
            len(pp.augmented_source.tokens) > max_len or len(pp.augmented_target.tokens) > max_len
        ):
            out.append(pair)
            continue
        out.append(pp)
    return out


def select_prompt_inference(draft: Sentence, style_store: Datastore, provider, strategy: str = "retrieved_target",
                            source: Sentence | None = None, fixed_prompt: str | None = None,
                            seed: int = 0) -> Sentence:
    """Choose the inference-time prompt for one request."""
    if len(style_store) == 0:
        raise BuildError("empty style datastore")
    if strategy == "fixed":
        if fixed_prompt is None:
            raise ConfigurationError("strategy 'fixed' requires fixed_prompt")
        return Sentence(fixed_prompt)
    if strategy == "retrieved_target":
        return style_store.query(provider.embed(draft), k=1).best.value
    if strategy == "retrieved_source":
        if source is None:
            raise ConfigurationError("strategy 'retrieved_source' needs the source sentence")
        return style_store.query(provider.embed(source), k=1).best.value
    if strategy == "random":
        return style_store.value(random.Random(f"random-prompt:{seed}").randrange(len(style_store)))
    raise ConfigurationError(f"unknown inference strategy {strategy!r}")


def unsupervised_pool(corpora: Sequence[StyledCorpus], provider, metric: str = "cosine",
                      style_id: str = "pool") -> Datastore:
    """One datastore over the union of the corpora, style labels dropped."""
    if not corpora:
        raise ConfigurationError("unsupervised_pool needs at least one corpus")
    sents = [s for c in corpora for s in c.sentences]
    return build(StyledCorpus(style_id, sents, corpora[0].language), provider, metric)


def training_examples(items: Sequence, tag_ids: Mapping | None = None) -> list[tuple[tuple, tuple]]:
    """Token-id (src, tgt) pairs for the trainer.

    With ``tag_ids`` each labelled pair is prefixed by its style tag on the
    source side (the tag-tuning comparator); unlabelled pairs stay plain.
    """
    out = []
    for it in items:
        if isinstance(it, PromptedPair):
            out.append((it.augmented_source.tokens, it.augmented_target.tokens))
            continue
        src = tuple(it.source.tokens)
        if tag_ids is not None and it.style_label in tag_ids:
            src = (tag_ids[it.style_label],) + src
        out.append((src, tuple(it.target.tokens)))
    return out


# --- augmented dataset files -------------------------------------------------------

def write_dataset(items: Sequence, path, meta: dict):
    """TSV of (source, target, label) in escaped text form plus a JSON sidecar."""
    path = Path(path)
    lines = []
    n_prompted = 0
    for it in items:
        if isinstance(it, PromptedPair):
            n_prompted += 1
            src, trg, label = it.augmented_source.text, it.augmented_target.text, it.style_label
        else:
            src = escape_specials(it.source.text, (SEP,))
            trg = escape_specials(it.target.text, (SEP,))
            label = it.style_label
        row = [src, trg] + ([label] if label is not None else [])
        lines.append("\t".join(row) + "\n")
    path.write_text("".join(lines), encoding="utf-8")
    sidecar = dict(meta)
    sidecar.update({"examples": len(items), "prompted": n_prompted})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n",
                                                      encoding="utf-8")


def encode_text(tokenizer: TokenizerModel, text: str) -> tuple[int, ...]:
    """Token ids for escaped dataset text; a genuine ``[s]`` becomes the separator id."""
    parts = split_unescaped(text, SEP, (SEP,))
    ids: list[int] = []
    for i, part in enumerate(parts):
        if i:
            ids.append(tokenizer.sep_id)
        ids.extend(tokenizer.encode(unescape_specials(part, (SEP,))))
    return tuple(ids)


def read_dataset(path, tokenizer: TokenizerModel) -> list[tuple[tuple, tuple, str | None]]:
    from .corpus import _read_lines
    from .errors import CorpusFormatError

    out, bad = [], []
    for n, line in enumerate(_read_lines(path), start=1):
        f = line.split("\t")
        if len(f) not in (2, 3):
            bad.append(n)
            continue
        out.append((encode_text(tokenizer, f[0]), encode_text(tokenizer, f[1]), f[2] if len(f) == 3 else None))
    if bad:
        raise CorpusFormatError(path, bad)
    return out
