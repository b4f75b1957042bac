"""Corpus BLEU, lexicon style classifier, transfer ratio and report tables."""

from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigurationError

MAX_ORDER = 4

# an approximation of the 13a rules, scores are only internally comparable
_13A_RULES = [
    (re.compile(r"([\{-\~\[-\` -\&\(-\+\:-\@\/])"), r" \1 "),
    (re.compile(r"([^0-9])([\.,])"), r"\1 \2 "),
    (re.compile(r"([\.,])([^0-9])"), r" \1 \2"),
    (re.compile(r"([0-9])(-)"), r"\1 \2 "),
]


def tokenize_13a(line: str) -> list[str]:
    line = line.replace("<skipped>", "").replace("-\n", "").replace("\n", " ")
    if "&" in line:
        line = line.replace("&quot;", '"').replace("&amp;", "&").replace("&lt;", "<").replace("&gt;", ">")
    line = f" {line} "
    for pat, rep in _13A_RULES:
        line = pat.sub(rep, line)
    return line.split()


def _tokens(text, tokenization: str) -> list[str]:
    if isinstance(text, (list, tuple)):
        return [str(t) for t in text]
    if tokenization == "none":
        return text.split()
    if tokenization == "13a":
        return tokenize_13a(text)
    raise ConfigurationError(f"unknown BLEU tokenization {tokenization!r}")


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuScore:
    score: float
    precisions: list  # fractions in [0, 1], orders 1..4
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def __str__(self):
        p = "/".join(f"{100 * x:.1f}" for x in self.precisions)
        return f"BLEU = {self.score:.2f} {p} (BP = {self.brevity_penalty:.3f} hyp_len = {self.hyp_len} ref_len = {self.ref_len})"


def corpus_bleu(hypotheses: Sequence, references: Sequence, tokenization: str = "13a",
                smooth: str = "none", epsilon: float = 0.1) -> BleuScore:
    """Corpus-level BLEU with clipped n-gram precision up to order 4.

    ``smooth="none"`` gives 0 whenever some precision is 0; ``smooth="epsilon"``
    replaces zero match counts with ``epsilon``.
    """
    if len(hypotheses) != len(references):
        raise ConfigurationError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise ConfigurationError("BLEU of an empty corpus is undefined")
    if smooth not in ("none", "epsilon"):
        raise ConfigurationError(f"unknown smoothing {smooth!r}")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp, tokenization), _tokens(ref, tokenization)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hn, rn = _ngrams(h, n), _ngrams(r, n)
            matches[n - 1] += sum(min(c, rn[g]) for g, c in hn.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        bp = 0.0
    elif hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    logs = []
    for m, t in zip(matches, totals):
        if t == 0:
            logs = None
            break
        if m == 0:
            if smooth == "none":
                logs = None
                break
            m = epsilon
        logs.append(math.log(m / t))
    if logs is None or bp == 0.0:
        value = 0.0
    else:
        value = 100.0 * bp * math.exp(sum(logs) / MAX_ORDER)
    return BleuScore(value, precisions, bp, hyp_len, ref_len, matches, totals)


class StyleClassifier:
    """Lexicon classifier: style S iff the text has a marker of S and none of any other style."""

    kind = "lexicon"

    def __init__(self, lexicons: Mapping[str, Sequence[str]]):
        if not lexicons:
            raise ConfigurationError("classifier needs at least one style lexicon")
        self.lexicons = {s: frozenset(words) for s, words in lexicons.items()}

    @classmethod
    def load(cls, path) -> "StyleClassifier":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @property
    def styles(self):
        return sorted(self.lexicons)

    def classify(self, text: str) -> str | None:
        words = set(text.split())
        hits = [s for s, lex in self.lexicons.items() if words & lex]
        return hits[0] if len(hits) == 1 else None

    def markers_in(self, text: str, style: str) -> list[int]:
        lex = self.lexicons[style]
        return [i for i, w in enumerate(text.split()) if w in lex]


def transfer_ratio(hypotheses: Sequence[str], style_id: str, classifier: StyleClassifier) -> float:
    if not hypotheses:
        raise ConfigurationError("transfer ratio of an empty set is undefined")
    if style_id not in classifier.lexicons:
        raise ConfigurationError(f"classifier has no lexicon for style {style_id!r}")
    hit = sum(1 for h in hypotheses if classifier.classify(h) == style_id)
    return 100.0 * hit / len(hypotheses)


@dataclass
class MultiwayTestSet:
    items: list  # (source, {style: reference})

    def __post_init__(self):
        styles = None
        for i, (_, refs) in enumerate(self.items):
            if styles is None:
                styles = set(refs)
            elif set(refs) != styles:
                raise ConfigurationError(f"test item {i} does not cover the declared styles {sorted(styles)}")

    @property
    def styles(self) -> list[str]:
        return sorted(self.items[0][1]) if self.items else []

    @property
    def sources(self) -> list[str]:
        return [s for s, _ in self.items]

    def references(self, style: str) -> list[str]:
        return [refs[style] for _, refs in self.items]

    def __len__(self):
        return len(self.items)

    @classmethod
    def load(cls, path) -> "MultiwayTestSet":
        from .corpus import _read_lines
        from .errors import CorpusFormatError

        items, bad = [], []
        for n, line in enumerate(_read_lines(path), start=1):
            try:
                obj = json.loads(line)
                items.append((obj["source"], dict(obj["references"])))
            except (ValueError, KeyError, TypeError):
                bad.append(n)
        if bad:
            raise CorpusFormatError(path, bad, "expected {source, references} objects")
        return cls(items)


@dataclass
class ReportRow:
    system: str
    style: str
    bleu: float  # against the matching-style reference
    bleu_other: float  # mean over the other styles' references
    transfer_ratio: float
    n: int


@dataclass
class Report:
    rows: list
    title: str = ""
    details: dict = field(default_factory=dict)

    def row(self, system: str, style: str) -> ReportRow:
        for r in self.rows:
            if r.system == system and r.style == style:
                return r
        raise KeyError((system, style))

    def systems(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.system not in seen:
                seen.append(r.system)
        return seen

    def macro(self, system: str) -> dict:
        rows = [r for r in self.rows if r.system == system]
        return {
            "bleu": sum(r.bleu for r in rows) / len(rows),
            "transfer_ratio": sum(r.transfer_ratio for r in rows) / len(rows),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["system", "style", "bleu", "bleu_other", "transfer_ratio", "n"])
        for r in self.rows:
            w.writerow([r.system, r.style, f"{r.bleu:.4f}", f"{r.bleu_other:.4f}", f"{r.transfer_ratio:.2f}", r.n])
        for s in self.systems():
            m = self.macro(s)
            w.writerow([s, "macro", f"{m['bleu']:.4f}", "", f"{m['transfer_ratio']:.2f}", ""])
        return buf.getvalue()

    def to_table(self) -> str:
        head = f"{'system':<22}{'style':<10}{'BLEU':>8}{'BLEU(other)':>13}{'ratio%':>9}"
        lines = [self.title, head, "-" * len(head)] if self.title else [head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r.system:<22}{r.style:<10}{r.bleu:>8.2f}{r.bleu_other:>13.2f}{r.transfer_ratio:>9.1f}")
        for s in self.systems():
            m = self.macro(s)
            lines.append(f"{s:<22}{'macro':<10}{m['bleu']:>8.2f}{'':>13}{m['transfer_ratio']:>9.1f}")
        return "\n".join(lines) + "\n"

    def to_json(self, verbose: bool = False) -> str:
        obj = {"title": self.title, "rows": [asdict(r) for r in self.rows],
               "macro": {s: self.macro(s) for s in self.systems()}}
        if verbose:
            obj["details"] = self.details
        return json.dumps(obj, indent=1, sort_keys=True, ensure_ascii=False) + "\n"


def run_comparison(systems: Mapping[str, Mapping[str, Sequence[str]]], testset: MultiwayTestSet,
                   classifier: StyleClassifier, tokenization: str = "13a", title: str = "",
                   keep_details: bool = False) -> Report:
    """Score every system's per-style hypotheses against the multiway references.

    ``systems`` maps system name -> style -> one hypothesis per test item.
    """
    styles = testset.styles
    rows, details = [], {}
    for name, per_style in systems.items():
        for style in styles:
            hyps = per_style.get(style)
            if hyps is None or len(hyps) != len(testset):
                raise ConfigurationError(f"system {name!r} lacks hypotheses for style {style!r}")
            match = corpus_bleu(hyps, testset.references(style), tokenization).score
            others = [corpus_bleu(hyps, testset.references(o), tokenization).score for o in styles if o != style]
            other = sum(others) / len(others) if others else float("nan")
            ratio = transfer_ratio(hyps, style, classifier)
            rows.append(ReportRow(name, style, match, other, ratio, len(hyps)))
            if keep_details:
                details.setdefault(name, {})[style] = [
                    {"source": s, "hypothesis": h, "reference": testset.references(style)[i],
                     "style": classifier.classify(h)}
                    for i, (s, h) in enumerate(zip(testset.sources, hyps))
                ]
    return Report(rows, title, details)


def size_sweep(levels: Sequence[int], evaluate_level, corpus_size: int) -> list[dict]:
    """Run ``evaluate_level(level) -> list of row dicts`` for each level, largest first."""
    for lv in levels:
        if lv > corpus_size:
            raise ConfigurationError(f"sweep level {lv} exceeds stylized corpus size {corpus_size}")
        if lv < 1:
            raise ConfigurationError("sweep levels must be positive")
    rows = []
    for lv in sorted(levels, reverse=True):
        for r in evaluate_level(lv):
            rows.append(dict(r, level=lv))
    return rows


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.4f}" if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()
