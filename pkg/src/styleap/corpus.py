"""Corpora, special tokens and the greedy longest-match subword tokenizer."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, CorpusFormatError

WORD_START = "▁"
ESCAPE = "\\"

PAD, BOS, EOS, UNK, SEP = "<pad>", "<s>", "</s>", "<unk>", "[s]"

# full-scale values: 32000 / 5 / 256
DEFAULT_MAX_VOCAB = 2000
DEFAULT_MIN_FREQUENCY = 2
DEFAULT_MAX_LEN = 64


@dataclass(frozen=True)
class Sentence:
    text: str
    tokens: tuple[int, ...] = ()

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class ParallelPair:
    source: Sentence
    target: Sentence
    style_label: str | None = None


@dataclass
class StyledCorpus:
    style_id: str
    sentences: list[Sentence]
    language: str = "tgt"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.style_id:
            raise ConfigurationError("style_id must be non-empty")

    def __len__(self):
        return len(self.sentences)

    @property
    def texts(self) -> list[str]:
        return [s.text for s in self.sentences]


def style_tag(style_id: str) -> str:
    return f"<style:{style_id}>"


@dataclass(frozen=True)
class SpecialTokens:
    separator: str = SEP
    pad: str = PAD
    bos: str = BOS
    eos: str = EOS
    unk: str = UNK
    style_tags: dict = field(default_factory=dict)

    def all(self) -> list[str]:
        return [self.pad, self.bos, self.eos, self.unk, self.separator] + [
            self.style_tags[k] for k in sorted(self.style_tags)
        ]


def escape_specials(text: str, specials: Iterable[str]) -> str:
    """Make literal special-token strings in raw text unambiguous."""
    out = text.replace(ESCAPE, ESCAPE + ESCAPE)
    for tok in sorted(set(specials), key=len, reverse=True):
        out = out.replace(tok, ESCAPE + tok)
    return out


def unescape_specials(text: str, specials: Iterable[str]) -> str:
    toks = sorted(set(specials), key=len, reverse=True)
    out = []
    i = 0
    while i < len(text):
        if text[i] == ESCAPE and i + 1 < len(text):
            if text[i + 1] == ESCAPE:
                out.append(ESCAPE)
                i += 2
                continue
            for tok in toks:
                if text.startswith(tok, i + 1):
                    out.append(tok)
                    i += 1 + len(tok)
                    break
            else:
                out.append(text[i])
                i += 1
            continue
        out.append(text[i])
        i += 1
    return "".join(out)


def split_unescaped(text: str, token: str, specials: Iterable[str]) -> list[str]:
    """Split escaped text on genuine (unescaped) occurrences of ``token``."""
    parts, cur = [], []
    i = 0
    while i < len(text):
        if text[i] == ESCAPE and i + 1 < len(text):
            cur.append(text[i : i + 2])
            i += 2
            continue
        if text.startswith(token, i):
            parts.append("".join(cur))
            cur = []
            i += len(token)
            continue
        cur.append(text[i])
        i += 1
    parts.append("".join(cur))
    return parts


class TokenizerModel:
    """Frequency-pruned piece vocabulary with greedy longest-match segmentation.

    Word-initial pieces carry a leading ``▁``; continuation pieces do not.
    Special tokens live in the vocabulary but are never matched against raw text.
    """

    def __init__(self, pieces: Sequence[str], specials: SpecialTokens,
                 min_frequency: int, max_vocab: int):
        self.pieces = list(pieces)
        self.specials = specials
        self.min_frequency = min_frequency
        self.max_vocab = max_vocab
        self.vocab = {p: i for i, p in enumerate(self.pieces)}
        if len(self.vocab) != len(self.pieces):
            raise ConfigurationError("duplicate vocabulary entries")
        special_set = set(specials.all())
        self._special_ids = frozenset(self.vocab[s] for s in special_set)
        self._matchable = {p: i for p, i in self.vocab.items() if p not in special_set}
        self._max_piece = max((len(p) for p in self._matchable), default=1)
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self):
        return len(self.pieces)

    @property
    def pad_id(self):
        return self.vocab[self.specials.pad]

    @property
    def bos_id(self):
        return self.vocab[self.specials.bos]

    @property
    def eos_id(self):
        return self.vocab[self.specials.eos]

    @property
    def unk_id(self):
        return self.vocab[self.specials.unk]

    @property
    def sep_id(self):
        return self.vocab[self.specials.separator]

    @property
    def special_ids(self) -> frozenset:
        return self._special_ids

    def tag_id(self, style_id: str) -> int:
        tag = self.specials.style_tags.get(style_id)
        if tag is None:
            from .errors import UnknownStyleError

            raise UnknownStyleError(style_id)
        return self.vocab[tag]

    def _encode_word(self, word: str) -> tuple[int, ...]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        ids = []
        s = WORD_START + word
        i = 0
        while i < len(s):
            for j in range(min(len(s), i + self._max_piece), i, -1):
                pid = self._matchable.get(s[i:j])
                if pid is not None:
                    ids.append(pid)
                    i = j
                    break
            else:
                ids.append(self.unk_id)
                # a lone word-start marker is never emitted as UNK on its own
                i += 2 if i == 0 else 1
        out = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[word] = out
        return out

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in text.split():
            ids.extend(self._encode_word(word))
        return ids

    def tokenize(self, text: str) -> Sentence:
        return Sentence(text, tuple(self.encode(text)))

    def decode(self, ids: Iterable[int], keep_specials: bool = False) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in self._special_ids:
                if not keep_specials:
                    continue
                piece = WORD_START + self.pieces[i]
            else:
                piece = self.pieces[i]
            out.append(piece)
        return "".join(out).replace(WORD_START, " ").strip()

    def to_json(self) -> str:
        payload = {
            "format": "styleap-tokenizer",
            "version": 1,
            "max_vocab": self.max_vocab,
            "min_frequency": self.min_frequency,
            "rules": {"segmentation": "greedy-longest-match", "word_start": WORD_START},
            "special_tokens": {
                "pad": self.specials.pad,
                "bos": self.specials.bos,
                "eos": self.specials.eos,
                "unk": self.specials.unk,
                "separator": self.specials.separator,
                "style_tags": dict(sorted(self.specials.style_tags.items())),
            },
            "vocabulary": self.pieces,
        }
        return json.dumps(payload, ensure_ascii=False, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, data: str) -> "TokenizerModel":
        obj = json.loads(data)
        if obj.get("format") != "styleap-tokenizer":
            raise ConfigurationError("not a tokenizer model file")
        sp = obj["special_tokens"]
        specials = SpecialTokens(
            separator=sp["separator"], pad=sp["pad"], bos=sp["bos"], eos=sp["eos"],
            unk=sp["unk"], style_tags=dict(sp["style_tags"]),
        )
        return cls(obj["vocabulary"], specials, obj["min_frequency"], obj["max_vocab"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TokenizerModel":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _ranked(counter: Counter, min_count: int) -> list[str]:
    items = [(p, c) for p, c in counter.items() if c >= min_count]
    items.sort(key=lambda pc: (-pc[1], pc[0]))
    return [p for p, _ in items]


def train_tokenizer(corpora: Sequence[StyledCorpus],
                    max_vocab: int = DEFAULT_MAX_VOCAB,
                    min_frequency: int = DEFAULT_MIN_FREQUENCY,
                    style_ids: Iterable[str] = ()) -> TokenizerModel:
    """Build a piece vocabulary from the given corpora.

    Budget order after the special tokens: single characters (coverage),
    whole words with count >= ``min_frequency``, then frequent prefixes and
    continuation pieces of the remaining rare words.
    """
    if not corpora or all(len(c) == 0 for c in corpora):
        raise ConfigurationError("train_tokenizer needs at least one non-empty corpus")
    specials = SpecialTokens(style_tags={s: style_tag(s) for s in sorted(set(style_ids))})
    special_list = specials.all()
    if max_vocab < len(special_list) + 16:
        raise ConfigurationError(
            f"max_vocab={max_vocab} too small; need >= {len(special_list) + 16}"
        )
    words: Counter = Counter()
    for corpus in corpora:
        for sent in corpus.sentences:
            words.update(sent.text.split())

    chars: Counter = Counter()
    for w, c in words.items():
        chars[WORD_START + w[0]] += c
        for ch in w[1:]:
            chars[ch] += c
    whole = Counter({WORD_START + w: c for w, c in words.items() if len(w) > 1})

    pieces = list(special_list)
    seen = set(pieces)

    def take(candidates):
        for p in candidates:
            if len(pieces) >= max_vocab:
                return
            if p not in seen:
                seen.add(p)
                pieces.append(p)

    take(_ranked(chars, 1))
    take(_ranked(whole, min_frequency))

    if len(pieces) < max_vocab:
        sub: Counter = Counter()
        for w, c in words.items():
            if WORD_START + w in seen or len(w) < 3:
                continue
            for i in range(2, len(w)):
                sub[WORD_START + w[:i]] += c
            for i in range(1, len(w) - 1):
                sub[w[i:]] += c
        take(_ranked(sub, min_frequency))
    return TokenizerModel(pieces, specials, min_frequency, max_vocab)


def tokenize(model: TokenizerModel, text: str) -> Sentence:
    return model.tokenize(text)


def tokenize_pairs(model: TokenizerModel, pairs: Iterable[ParallelPair]) -> list[ParallelPair]:
    return [
        ParallelPair(model.tokenize(p.source.text), model.tokenize(p.target.text), p.style_label)
        for p in pairs
    ]


def tokenize_corpus(model: TokenizerModel, corpus: StyledCorpus) -> StyledCorpus:
    return StyledCorpus(
        corpus.style_id, [model.tokenize(s.text) for s in corpus.sentences],
        corpus.language, dict(corpus.metadata),
    )


def length_filter(pairs: Iterable[ParallelPair], max_len: int = DEFAULT_MAX_LEN) -> list[ParallelPair]:
    """Drop pairs where either side has more than ``max_len`` subword tokens."""
    return [p for p in pairs if len(p.source.tokens) <= max_len and len(p.target.tokens) <= max_len]


# --- file formats -----------------------------------------------------------

def _read_lines(path) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    data = path.read_text(encoding="utf-8")
    if not data:
        return []
    lines = data.split("\n")
    if lines[-1] == "":
        lines.pop()
    return lines


def load_parallel_tsv(path) -> list[ParallelPair]:
    pairs, bad = [], []
    for n, line in enumerate(_read_lines(path), start=1):
        fields = line.split("\t")
        if len(fields) not in (2, 3) or not fields[0].strip() or not fields[1].strip():
            bad.append(n)
            continue
        label = fields[2] if len(fields) == 3 and fields[2] != "" else None
        pairs.append(ParallelPair(Sentence(fields[0]), Sentence(fields[1]), label))
    if bad:
        raise CorpusFormatError(path, bad, "expected source<TAB>target[<TAB>style]")
    return pairs


def load_parallel_jsonl(path) -> list[ParallelPair]:
    pairs, bad = [], []
    for n, line in enumerate(_read_lines(path), start=1):
        try:
            obj = json.loads(line)
            src, trg = obj["source"], obj["target"]
            if not isinstance(src, str) or not isinstance(trg, str) or not src.strip() or not trg.strip():
                raise ValueError
        except (ValueError, KeyError, TypeError):
            bad.append(n)
            continue
        pairs.append(ParallelPair(Sentence(src), Sentence(trg), obj.get("style")))
    if bad:
        raise CorpusFormatError(path, bad, "expected {source, target, style?} objects")
    return pairs


def load_monolingual(path, style_id: str, language: str = "tgt") -> StyledCorpus:
    sents, bad = [], []
    for n, line in enumerate(_read_lines(path), start=1):
        if not line.strip() or "\t" in line:
            bad.append(n)
            continue
        sents.append(Sentence(line))
    if bad:
        raise CorpusFormatError(path, bad, "empty sentence or stray tab")
    return StyledCorpus(style_id, sents, language, {"path": str(path)})


def load_manifest(path) -> StyledCorpus:
    path = Path(path)
    obj = json.loads(path.read_text(encoding="utf-8"))
    for key in ("style_id", "path"):
        if key not in obj:
            raise ConfigurationError(f"{path}: manifest missing {key!r}")
    data_path = Path(obj["path"])
    if not data_path.is_absolute():
        data_path = path.parent / data_path
    return load_monolingual(data_path, obj["style_id"], obj.get("language", "tgt"))


def load_corpus(path, format: str = "tsv", style_id: str | None = None, language: str = "tgt"):
    """Load a corpus file. ``format`` is one of tsv, jsonl, mono, manifest."""
    if format == "tsv":
        return load_parallel_tsv(path)
    if format == "jsonl":
        return load_parallel_jsonl(path)
    if format == "mono":
        if not style_id:
            raise ConfigurationError("monolingual corpora need a style_id")
        return load_monolingual(path, style_id, language)
    if format == "manifest":
        return load_manifest(path)
    raise ConfigurationError(f"unknown corpus format {format!r}")


def _check_field(text: str):
    if "\t" in text or "\n" in text or "\r" in text:
        raise ConfigurationError(f"text cannot be serialized (tab/newline): {text[:40]!r}")


def save_parallel_tsv(pairs: Iterable[ParallelPair], path):
    lines = []
    for p in pairs:
        _check_field(p.source.text)
        _check_field(p.target.text)
        row = [p.source.text, p.target.text]
        if p.style_label is not None:
            _check_field(p.style_label)
            row.append(p.style_label)
        lines.append("\t".join(row) + "\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def save_monolingual(corpus: StyledCorpus, path, manifest: bool = True):
    path = Path(path)
    for s in corpus.sentences:
        _check_field(s.text)
    path.write_text("".join(s.text + "\n" for s in corpus.sentences), encoding="utf-8")
    if manifest:
        man = {"style_id": corpus.style_id, "language": corpus.language, "path": path.name}
        path.with_suffix(".json").write_text(json.dumps(man, sort_keys=True) + "\n", encoding="utf-8")


def parallel_sides(pairs: Sequence[ParallelPair]) -> list[StyledCorpus]:
    """Wrap both sides of a parallel corpus as corpora, e.g. for tokenizer training."""
    return [
        StyledCorpus("parallel-src", [p.source for p in pairs], "src"),
        StyledCorpus("parallel-tgt", [p.target for p in pairs], "tgt"),
    ]
