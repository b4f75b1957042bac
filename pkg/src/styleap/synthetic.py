"""Synthetic bilingual two-style task for desk-scale experiments.

Content words of the source and target languages use disjoint letter
inventories, so the only surface overlap across languages is proper names
(copied verbatim) and a short cognate prefix on a closed class of "slot"
lexemes. Each target slot lexeme has a few interchangeable neutral variants
(stem plus a neutral suffix) and one form per style (stem plus a style
suffix); a style's marker lexicon is its set of style forms.

Unstylized targets pick a neutral variant at random for every slot token, so
the variant is not predictable from the source. Stylized monolingual corpora
and the multiway references use the style form of every slot lexeme.
Stylized pairs inside the parallel corpus never contain the style's "weak"
lexemes: their style forms are attested only in the monolingual corpus, and
a model can produce them only by copying from a prompt.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpus import ParallelPair, Sentence, StyledCorpus, save_monolingual, save_parallel_tsv
from .errors import ConfigurationError

GENERAL = "general"

SRC_CONSONANTS = "bdgklmnprstvz"
SRC_VOWELS = "aei"
TGT_CONSONANTS = "cfhjqwxy"
TGT_VOWELS = "ou"
COGNATE_CONSONANTS = "lmn"


@dataclass
class SyntheticTaskSpec:
    seed: int = 0
    n_parallel: int = 5000
    n_stylized: int = 1000  # monolingual sentences per style
    n_test: int = 500
    n_dev: int = 200
    styles: tuple = ("A", "B")
    style_suffixes: tuple = ("th", "sk")
    styled_fraction: float = 0.2  # per style, in the parallel corpus
    weak_slots: int = 0  # per style
    neutral_suffixes: tuple = ("",)
    content_words: int = 60
    slot_words: int = 8
    names: int = 20
    min_len: int = 4
    max_len: int = 9
    max_slots: int = 3
    name_prob: float = 0.3

    def __post_init__(self):
        self.styles = tuple(self.styles)
        self.style_suffixes = tuple(self.style_suffixes)
        self.neutral_suffixes = tuple(self.neutral_suffixes)
        if not self.neutral_suffixes or len(set(self.neutral_suffixes)) != len(self.neutral_suffixes):
            raise ConfigurationError("need at least one distinct neutral suffix")
        if set(self.neutral_suffixes) & set(self.style_suffixes):
            raise ConfigurationError("neutral and style suffixes must differ")
        if len(self.styles) != len(self.style_suffixes) or len(set(self.styles)) != len(self.styles):
            raise ConfigurationError("one distinct suffix per distinct style required")
        if GENERAL in self.styles:
            raise ConfigurationError(f"{GENERAL!r} is reserved for unstylized data")
        if not 0.0 <= self.styled_fraction * len(self.styles) <= 1.0:
            raise ConfigurationError("styled_fraction too large for the number of styles")
        if min(self.n_parallel, self.n_stylized, self.n_test) < 1 or self.n_dev < 0:
            raise ConfigurationError("corpus sizes must be positive")
        if not 0 <= self.weak_slots < self.slot_words:
            raise ConfigurationError("weak_slots must leave at least one strong slot")
        if not 1 <= self.min_len <= self.max_len or self.max_slots < 1:
            raise ConfigurationError("invalid sentence length range")
        if self.slot_words < 1 or self.content_words < 1:
            raise ConfigurationError("need at least one content and one slot word")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


def _words(rng: random.Random, cons: str, vowels: str, count: int, taken: set, syllables=(2, 3), prefix=""):
    out = []
    while len(out) < count:
        n = rng.choice(syllables)
        w = prefix + "".join(rng.choice(cons) + rng.choice(vowels) for _ in range(n))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


@dataclass
class Lexicon:
    src_content: list
    tgt_content: list
    src_slots: list
    tgt_slots: list  # stems
    neutral_slots: list  # per slot, its neutral variants
    styled_slots: dict  # style -> list of forms aligned with tgt_slots
    names: list
    weak: dict = field(default_factory=dict)  # style -> set of weak slot indices

    def translate(self, src_words: list, style: str | None, rng: random.Random | None = None) -> list:
        """Word-by-word translation.

        Unstylized slots take a random neutral variant when ``rng`` is given,
        else the first one.
        """
        content = dict(zip(self.src_content, self.tgt_content))
        slots = {s: i for i, s in enumerate(self.src_slots)}
        out = []
        for w in src_words:
            if w in content:
                out.append(content[w])
            elif w in slots:
                i = slots[w]
                if style and style != GENERAL:
                    out.append(self.styled_slots[style][i])
                else:
                    variants = self.neutral_slots[i]
                    out.append(rng.choice(variants) if rng is not None else variants[0])
            else:
                out.append(w)  # names are copied
        return out

    def markers(self) -> dict:
        return {s: sorted(forms) for s, forms in self.styled_slots.items()}


def build_lexicon(spec: SyntheticTaskSpec) -> Lexicon:
    rng = random.Random(f"lexicon:{spec.seed}")
    taken: set = set()
    src_content = _words(rng, SRC_CONSONANTS, SRC_VOWELS, spec.content_words, taken)
    tgt_content = _words(rng, TGT_CONSONANTS, TGT_VOWELS, spec.content_words, taken)
    prefixes = sorted({a + b + c for a in COGNATE_CONSONANTS for b in "aeiou" for c in COGNATE_CONSONANTS})
    if spec.slot_words > len(prefixes):
        raise ConfigurationError(f"at most {len(prefixes)} slot words supported")
    src_slots, tgt_slots = [], []
    for prefix in rng.sample(prefixes, spec.slot_words):
        src_slots.append(_words(rng, SRC_CONSONANTS, SRC_VOWELS, 1, taken, prefix=prefix, syllables=(1,))[0])
        tgt_slots.append(_words(rng, TGT_CONSONANTS, TGT_VOWELS, 1, taken, prefix=prefix, syllables=(1,))[0])
    neutral = [[w + suffix for suffix in spec.neutral_suffixes] for w in tgt_slots]
    extra = {w for forms in neutral for w in forms} - set(tgt_slots)
    if taken & extra:
        raise ConfigurationError("neutral variant collides with an existing word")
    taken.update(extra)
    styled = {}
    for style, suffix in zip(spec.styles, spec.style_suffixes):
        forms = [w + suffix for w in tgt_slots]
        if taken & set(forms):
            raise ConfigurationError("style form collides with an existing word")
        taken.update(forms)
        styled[style] = forms
    names = []
    while len(names) < spec.names:
        n = "".join(rng.choice("BDGKLMNPRSTVZ") + rng.choice("aei") for _ in range(2)) + "n"
        n = n[0] + n[1:].lower()
        if n not in names:
            names.append(n)
    weak = {style: set(rng.sample(range(spec.slot_words), spec.weak_slots)) for style in spec.styles}
    return Lexicon(src_content, tgt_content, src_slots, tgt_slots, neutral, styled, names, weak)


def _source_sentence(rng: random.Random, lex: Lexicon, spec: SyntheticTaskSpec, exclude=frozenset()) -> list:
    length = rng.randint(spec.min_len, spec.max_len)
    pool = [w for i, w in enumerate(lex.src_slots) if i not in exclude]
    n_slots = rng.randint(1, min(spec.max_slots, length))
    words = [rng.choice(lex.src_content) for _ in range(length - n_slots)]
    if words and rng.random() < spec.name_prob:
        words[rng.randrange(len(words))] = rng.choice(lex.names)  # never displaces a slot word
    words += rng.sample(pool, n_slots) if n_slots <= len(pool) else [rng.choice(pool) for _ in range(n_slots)]
    rng.shuffle(words)
    return words


@dataclass
class SyntheticTask:
    spec: SyntheticTaskSpec
    lexicon: Lexicon
    parallel: list  # ParallelPair with style_label in styles + GENERAL
    dev: list
    stylized: dict  # style -> StyledCorpus
    test_sources: list
    test_references: dict  # style -> list[str]

    def test_items(self):
        return [
            (src, {s: self.test_references[s][i] for s in self.spec.styles})
            for i, src in enumerate(self.test_sources)
        ]


def generate(spec: SyntheticTaskSpec) -> SyntheticTask:
    lex = build_lexicon(spec)
    rng = random.Random(f"corpus:{spec.seed}")
    styles = list(spec.styles)

    def parallel(n):
        # exactly round(styled_fraction * n) pairs per style, at seeded positions
        per_style = round(spec.styled_fraction * n)
        labels = [s for s in styles for _ in range(per_style)]
        labels += [GENERAL] * (n - len(labels))
        rng.shuffle(labels)
        out = []
        for label in labels:
            src = _source_sentence(rng, lex, spec, lex.weak.get(label, frozenset()))
            tgt = lex.translate(src, label, rng)
            out.append(ParallelPair(Sentence(" ".join(src)), Sentence(" ".join(tgt)), label))
        return out

    pairs = parallel(spec.n_parallel)
    dev = parallel(spec.n_dev)
    stylized = {}
    for s in styles:
        sents = [Sentence(" ".join(lex.translate(_source_sentence(rng, lex, spec), s))) for _ in range(spec.n_stylized)]
        stylized[s] = StyledCorpus(s, sents, "tgt", {"generator": "synthetic", "seed": spec.seed})
    test_src = [_source_sentence(rng, lex, spec) for _ in range(spec.n_test)]
    refs = {s: [" ".join(lex.translate(src, s)) for src in test_src] for s in styles}
    return SyntheticTask(spec, lex, pairs, dev, stylized, [" ".join(s) for s in test_src], refs)


def write_task(task: SyntheticTask, out_dir) -> dict:
    """Write every artifact of the task; returns {role: path}."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    save_parallel_tsv(task.parallel, out / "parallel.tsv")
    paths["parallel"] = out / "parallel.tsv"
    save_parallel_tsv(task.dev, out / "dev.tsv")
    paths["dev"] = out / "dev.tsv"
    for s, corpus in task.stylized.items():
        p = out / f"style_{s}.txt"
        save_monolingual(corpus, p)
        paths[f"style_{s}"] = p
    test_path = out / "test.jsonl"
    with open(test_path, "w", encoding="utf-8") as fh:
        for src, refs in task.test_items():
            fh.write(json.dumps({"source": src, "references": refs}, ensure_ascii=False, sort_keys=True) + "\n")
    paths["test"] = test_path
    lex_path = out / "lexicons.json"
    lex_path.write_text(json.dumps(task.lexicon.markers(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["lexicons"] = lex_path
    spec_path = out / "task_spec.json"
    spec_path.write_text(json.dumps(asdict(task.spec), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths["spec"] = spec_path
    return {k: str(v) for k, v in paths.items()}
