"""Two-pass stylized inference and the tag-prefixed comparator path."""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import Sentence, TokenizerModel
from .datastore import Datastore
from .errors import BuildError, ConfigurationError, StyleAPError, UnknownStyleError
from .prompt_builder import INFERENCE_STRATEGIES, select_prompt_inference
from .translator import TranslationModel, translate_ids


def derive_seed(run_seed: int, label: str) -> int:
    """Sub-seed from a run seed and a label, stable across processes."""
    digest = hashlib.blake2b(f"{run_seed}:{label}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


class InvocationCounter:
    """Counts model invocations; safe under concurrent callers."""

    def __init__(self):
        self._lock = threading.Lock()
        self._n = 0

    def increment(self) -> None:
        with self._lock:
            self._n += 1

    @property
    def value(self) -> int:
        with self._lock:
            return self._n

    def reset(self) -> None:
        with self._lock:
            self._n = 0


@dataclass(frozen=True)
class StyledRequest:
    source: Sentence
    style_id: str
    strategy: str = "retrieved_target"
    seed: int = 0
    fixed_prompt: str | None = None


@dataclass(frozen=True)
class StyledResult:
    hypothesis: Sentence
    prompt_used: Sentence
    draft: Sentence
    fallback_used: bool
    raw_output: tuple = ()
    style_id: str = ""
    source: Sentence | None = None

    def to_json(self) -> str:
        return json.dumps({
            "source": self.source.text if self.source is not None else None,
            "draft": self.draft.text,
            "prompt": self.prompt_used.text,
            "hypothesis": self.hypothesis.text,
            "style_id": self.style_id,
            "fallback": self.fallback_used,
        }, ensure_ascii=False, sort_keys=True)


def split_output(ids: Sequence[int], sep_id: int) -> tuple[tuple, tuple, bool]:
    """(prompt_region, hypothesis, fallback) split at the first separator."""
    ids = tuple(ids)
    if sep_id not in ids:
        return (), ids, True
    i = ids.index(sep_id)
    return ids[:i], ids[i + 1:], False


class StyleAPPipeline:
    """Draft, retrieve by draft, re-translate with the prompt, split.

    ``stores`` maps style id to its datastore. Every call to the underlying
    model (one batched decode) bumps ``counter``, so a single request costs
    exactly two invocations.
    """

    def __init__(self, model: TranslationModel, stores: Mapping[str, Datastore], provider,
                 beam: int = 4, max_len: int | None = None, batch_size: int = 256):
        if model.tokenizer is None:
            raise ConfigurationError("pipeline needs a model with an attached tokenizer")
        self.model = model
        self.tokenizer: TokenizerModel = model.tokenizer
        self.stores = dict(stores)
        self.provider = provider
        self.beam = beam
        self.max_len = max_len
        self.batch_size = batch_size
        self.counter = InvocationCounter()

    def _invoke(self, sources: list) -> list:
        self.counter.increment()
        return translate_ids(self.model, sources, self.beam, self.max_len, self.batch_size)

    def _store(self, style_id: str) -> Datastore:
        if style_id not in self.stores:
            raise UnknownStyleError(style_id)
        store = self.stores[style_id]
        if len(store) == 0:
            raise BuildError(f"empty datastore for style {style_id!r}")
        return store

    def _source(self, s) -> Sentence:
        s = s if isinstance(s, Sentence) else Sentence(str(s))
        return s if s.tokens or not s.text else self.tokenizer.tokenize(s.text)

    def drafts(self, sources: Sequence) -> list[Sentence]:
        srcs = [self._source(s) for s in sources]
        outs = self._invoke([list(s.tokens) for s in srcs])
        return [Sentence(self.tokenizer.decode(o), tuple(o)) for o in outs]

    def translate_styled(self, request: StyledRequest) -> StyledResult:
        return self.batch_translate_styled([request])[0]

    def batch_translate_styled(self, requests: Sequence[StyledRequest], drafts: Sequence[Sentence] | None = None
                               ) -> list[StyledResult]:
        """Element-wise equal to ``translate_styled``; two model invocations for the whole batch.

        Precomputed ``drafts`` (one per request) skip the first pass.
        """
        if not requests:
            return []
        errors = []
        for i, r in enumerate(requests):
            try:
                self._store(r.style_id)
                if r.strategy not in INFERENCE_STRATEGIES:
                    raise ConfigurationError(f"unknown inference strategy {r.strategy!r}")
                if r.strategy == "fixed" and r.fixed_prompt is None:
                    raise ConfigurationError("strategy 'fixed' requires fixed_prompt")
            except StyleAPError as e:
                if len(requests) == 1:
                    raise
                errors.append(f"request {i}: {e}")
        if errors:
            raise ConfigurationError("; ".join(errors))
        sources = [self._source(r.source) for r in requests]
        if drafts is None:
            drafts = self.drafts(sources)
        elif len(drafts) != len(requests):
            raise ConfigurationError("one draft per request required")
        prompts = [
            select_prompt_inference(d, self._store(r.style_id), self.provider, r.strategy, source=s,
                                    fixed_prompt=r.fixed_prompt, seed=r.seed)
            for r, s, d in zip(requests, sources, drafts)
        ]
        tok = self.tokenizer
        inputs = [list(tok.encode(p.text)) + [tok.sep_id] + list(s.tokens) for p, s in zip(prompts, sources)]
        outs = self._invoke(inputs)
        results = []
        for r, s, d, p, out in zip(requests, sources, drafts, prompts, outs):
            _, hyp, fallback = split_output(out, tok.sep_id)
            if not fallback:
                hyp = tuple(t for t in hyp if t != tok.sep_id)  # a stray second separator is dropped
            results.append(StyledResult(Sentence(tok.decode(hyp), hyp), p, d, fallback, tuple(out), r.style_id, s))
        return results


def make_requests(sources: Sequence, style_id: str, strategy: str = "retrieved_target", run_seed: int = 0,
                  fixed_prompt: str | None = None) -> list[StyledRequest]:
    """One request per source with per-item seeds derived from the run seed and index."""
    return [
        StyledRequest(s if isinstance(s, Sentence) else Sentence(s), style_id, strategy,
                      derive_seed(run_seed, f"request:{i}"), fixed_prompt)
        for i, s in enumerate(sources)
    ]


def translate_styled(model: TranslationModel, request: StyledRequest, style_store: Datastore, provider,
                     beam: int = 4) -> StyledResult:
    return StyleAPPipeline(model, {request.style_id: style_store}, provider, beam).translate_styled(request)


def batch_translate_styled(model: TranslationModel, requests: Sequence[StyledRequest],
                           stores: Mapping[str, Datastore], provider, beam: int = 4) -> list[StyledResult]:
    return StyleAPPipeline(model, stores, provider, beam).batch_translate_styled(requests)


def translate_tagged(tag_model: TranslationModel, sources: Sequence, style_id: str, beam: int = 4) -> list[Sentence]:
    """Translate with the style tag prepended; the tag id is never emitted."""
    tok = tag_model.tokenizer
    tag = tok.tag_id(style_id)  # raises UnknownStyleError
    srcs = [s if isinstance(s, Sentence) else Sentence(str(s)) for s in sources]
    ids = [[tag] + list(s.tokens or tok.encode(s.text)) for s in srcs]
    outs = translate_ids(tag_model, ids, beam)
    return [Sentence(tok.decode(o), tuple(t for t in o if t != tag)) for o in outs]


def translate_plain(model: TranslationModel, sources: Sequence, beam: int = 4) -> list[Sentence]:
    tok = model.tokenizer
    ids = [list(s.tokens) if isinstance(s, Sentence) and s.tokens else tok.encode(str(getattr(s, "text", s)))
           for s in sources]
    return [Sentence(tok.decode(o), tuple(o)) for o in translate_ids(model, ids, beam)]
