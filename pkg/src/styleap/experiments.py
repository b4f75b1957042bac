"""End-to-end workflows shared by the command line and the acceptance suite.

An :class:`Experiment` owns a task directory (the layout written by
``synthetic.write_task``) and a work directory where trained systems are
cached under a hash of everything that determines them, so repeated
ablations reuse checkpoints instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .corpus import (
    WORD_START, ParallelPair, Sentence, StyledCorpus, TokenizerModel, load_manifest, load_monolingual,
    load_parallel_tsv, parallel_sides, tokenize_pairs, train_tokenizer,
)
from .datastore import Datastore, build
from .embedder import get_provider
from .errors import ConfigurationError
from .evaluation import MultiwayTestSet, Report, StyleClassifier, corpus_bleu, run_comparison, transfer_ratio
from .pipeline import StyleAPPipeline, derive_seed, make_requests, translate_plain, translate_tagged
from .prompt_builder import (
    MixConfig, build_dataset, select_prompt_inference, training_examples, unsupervised_pool,
)
from .synthetic import GENERAL
from .translator import (
    ModelConfig, TrainConfig, TranslationModel, load_checkpoint, save_checkpoint, train,
    translate_with_attention,
)

log = logging.getLogger(__name__)

SYSTEMS = ("baseline", "tag", "styleap", "unsupervised")


@dataclass
class ExperimentConfig:
    seed: int = 0
    embedder: str = "hash256"
    metric: str = "cosine"
    prompted_fraction: float = 0.5
    max_len: int = 64
    max_vocab: int = 2000
    min_frequency: int = 2
    beam: int = 4
    steps: int = 1500
    batch_tokens: int = 2048
    lr: float = 2e-3
    warmup_steps: int = 200
    checkpoint_every: int = 250
    enc_layers: int = 2
    dec_layers: int = 2
    model_dim: int = 64
    heads: int = 4
    ffn_dim: int = 256
    dropout: float = 0.1
    sweep_levels: tuple = (1000, 100, 10)
    attention_items: int = 200

    def __post_init__(self):
        self.sweep_levels = tuple(int(x) for x in self.sweep_levels)

    def model_config(self, tokenizer: TokenizerModel) -> ModelConfig:
        return ModelConfig(len(tokenizer), self.enc_layers, self.dec_layers, self.model_dim, self.heads,
                           self.ffn_dim, self.dropout, pad_id=tokenizer.pad_id, bos_id=tokenizer.bos_id,
                           eos_id=tokenizer.eos_id, init_seed=derive_seed(self.seed, "init") % 2**31)

    def train_config(self, label: str) -> TrainConfig:
        return TrainConfig(self.steps, self.batch_tokens, self.lr, self.warmup_steps,
                           checkpoint_every=self.checkpoint_every, seed=derive_seed(self.seed, f"train:{label}") % 2**31)


@dataclass
class TaskData:
    parallel: list
    dev: list
    corpora: dict  # style -> StyledCorpus
    testset: MultiwayTestSet
    classifier: StyleClassifier
    files: dict = field(default_factory=dict)

    @property
    def styles(self) -> list[str]:
        return self.testset.styles

    @classmethod
    def load(cls, task_dir) -> "TaskData":
        d = Path(task_dir)
        if not d.is_dir():
            raise ConfigurationError(f"task directory {d} does not exist")
        testset = MultiwayTestSet.load(d / "test.jsonl")
        corpora = {}
        for s in testset.styles:
            manifest = d / f"style_{s}.json"
            corpora[s] = load_manifest(manifest) if manifest.exists() else load_monolingual(d / f"style_{s}.txt", s)
        files = {p.name: p for p in sorted(d.iterdir()) if p.is_file()}
        return cls(load_parallel_tsv(d / "parallel.tsv"), load_parallel_tsv(d / "dev.tsv"), corpora, testset,
                   StyleClassifier.load(d / "lexicons.json"), files)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self.files.items():
            h.update(name.encode())
            h.update(p.read_bytes())
        return h.hexdigest()[:16]


def label_stores(pairs: Sequence[ParallelPair], corpora: Mapping[str, StyledCorpus], provider,
                 metric: str = "cosine") -> dict:
    """Training-time stores: each label's parallel targets, then its stylized corpus if any."""
    labels = sorted({p.style_label or GENERAL for p in pairs} | set(corpora))
    stores = {}
    for lab in labels:
        sents = [Sentence(p.target.text) for p in pairs if (p.style_label or GENERAL) == lab]
        if lab in corpora:
            sents += [Sentence(s.text) for s in corpora[lab].sentences]
        stores[lab] = build(StyledCorpus(lab, sents), provider, metric)
    return stores


def pooled_training_store(pairs: Sequence[ParallelPair], corpora: Mapping[str, StyledCorpus], provider,
                          metric: str = "cosine") -> Datastore:
    """Unlabelled pool: every parallel target plus every stylized corpus."""
    plain = StyledCorpus("targets", [Sentence(p.target.text) for p in pairs])
    return unsupervised_pool([plain] + [corpora[s] for s in sorted(corpora)], provider, metric)


def subsample(items: Sequence, level: int, seed: int, label: str) -> list:
    """Seeded subsample of ``level`` items keeping their original order."""
    if level > len(items):
        raise ConfigurationError(f"level {level} exceeds the {len(items)} available items")
    rng = random.Random(derive_seed(seed, f"subsample:{label}:{level}"))
    keep = sorted(rng.sample(range(len(items)), level))
    return [items[i] for i in keep]


def labelled_subset(pairs: Sequence[ParallelPair], styles: Sequence[str], level: int, seed: int) -> list:
    """All unlabelled pairs plus ``level`` seeded labelled pairs per style."""
    keep = {id(p) for s in styles for p in subsample([p for p in pairs if p.style_label == s], level, seed, s)}
    return [p for p in pairs if p.style_label in (None, GENERAL) or id(p) in keep]


def _set_determinism():
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


class Experiment:
    def __init__(self, task: TaskData, cfg: ExperimentConfig, work_dir):
        self.task = task
        self.cfg = cfg
        self.work = Path(work_dir)
        self.work.mkdir(parents=True, exist_ok=True)
        self.provider = get_provider(cfg.embedder) if cfg.embedder != "learned" else None
        self._tokenizer: TokenizerModel | None = None
        self._models: dict = {}
        self._drafts: dict = {}
        self.timings: dict = {}
        _set_determinism()

    # -- shared artifacts ---------------------------------------------------------

    @property
    def tokenizer(self) -> TokenizerModel:
        if self._tokenizer is None:
            path = self.work / f"tokenizer-{self._key('tok')}.json"
            if path.exists():
                self._tokenizer = TokenizerModel.load(path)
            else:
                corpora = parallel_sides(self.task.parallel) + [self.task.corpora[s] for s in self.task.styles]
                self._tokenizer = train_tokenizer(corpora, self.cfg.max_vocab, self.cfg.min_frequency,
                                                  style_ids=self.task.styles)
                self._tokenizer.save(path)
        return self._tokenizer

    def _key(self, label: str) -> str:
        blob = json.dumps({"cfg": asdict(self.cfg), "task": self.task.fingerprint(), "label": label},
                          sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def style_stores(self, level: int | None = None) -> dict:
        out = {}
        for s in self.task.styles:
            corpus = self.task.corpora[s]
            if level is not None:
                corpus = StyledCorpus(s, subsample(corpus.sentences, level, self.cfg.seed, f"corpus:{s}"),
                                      corpus.language, corpus.metadata)
            out[s] = build(corpus, self.provider, self.cfg.metric)
        return out

    # -- training -----------------------------------------------------------------

    def training_items(self, system: str, level: int | None = None) -> tuple[list, dict | None]:
        """(items, tag_ids) for ``system`` in {baseline, tag, styleap, unsupervised}."""
        tok = self.tokenizer
        pairs = tokenize_pairs(tok, self.task.parallel)
        pairs = [p for p in pairs if len(p.source.tokens) <= self.cfg.max_len and len(p.target.tokens) <= self.cfg.max_len]
        mix = MixConfig(self.cfg.prompted_fraction, derive_seed(self.cfg.seed, "mix") % 2**31)
        if system == "baseline":
            return pairs, None
        if system == "tag":
            if level is not None:
                pairs = labelled_subset(pairs, self.task.styles, level, self.cfg.seed)
            return pairs, {s: tok.tag_id(s) for s in self.task.styles}
        if system == "styleap":
            stores = label_stores(pairs, self.task.corpora, self.provider, self.cfg.metric)
            return build_dataset(pairs, stores, self.provider, "retrieved_target", mix, tok, self.cfg.max_len), None
        if system == "unsupervised":
            pool = pooled_training_store(pairs, self.task.corpora, self.provider, self.cfg.metric)
            return build_dataset(pairs, pool, self.provider, "unsupervised", mix, tok, self.cfg.max_len), None
        raise ConfigurationError(f"unknown system {system!r}; expected one of {SYSTEMS}")

    def model(self, system: str, level: int | None = None) -> TranslationModel:
        label = system if level is None else f"{system}@{level}"
        if label in self._models:
            return self._models[label]
        path = self.work / f"{label.replace('@', '-')}-{self._key(label)}.ckpt"
        if path.exists():
            model = load_checkpoint(path)
        else:
            t0 = time.perf_counter()
            items, tags = self.training_items(system, level)
            examples = training_examples(items, tags)
            dev = training_examples(tokenize_pairs(self.tokenizer, self.task.dev),
                                    tags if system == "tag" else None)
            model = TranslationModel(self.cfg.model_config(self.tokenizer), self.tokenizer)
            result = train(model, examples, self.cfg.train_config(label), dev=dev)
            result.write_curve(path.with_suffix(".curve.csv"))
            save_checkpoint(model, path, {"system": system, "level": level, "best_step": result.best_step})
            self.timings[f"train:{label}"] = time.perf_counter() - t0
            log.info("trained %s in %.1fs (best step %s)", label, self.timings[f"train:{label}"], result.best_step)
        self._models[label] = model
        return model

    # -- decoding -----------------------------------------------------------------

    def pipeline(self, model: TranslationModel, stores: Mapping[str, Datastore]) -> StyleAPPipeline:
        provider = self.provider or get_provider("learned", model, model.tokenizer)
        return StyleAPPipeline(model, stores, provider, self.cfg.beam)

    def drafts(self, system: str, model: TranslationModel) -> list[Sentence]:
        if system not in self._drafts:
            self._drafts[system] = self.pipeline(model, {}).drafts(self.task.testset.sources)
        return self._drafts[system]

    def fixed_prompt(self, stores: Mapping[str, Datastore], style: str) -> str:
        # the first sentence of the style's corpus
        return stores[style].values[0]

    def styleap_outputs(self, system: str = "styleap", strategy: str = "retrieved_target",
                        stores: Mapping[str, Datastore] | None = None) -> dict:
        model = self.model(system)
        stores = stores or self.style_stores()
        pipe = self.pipeline(model, stores)
        drafts = self.drafts(system, model)
        out = {}
        for s in self.task.styles:
            reqs = make_requests(self.task.testset.sources, s, strategy, derive_seed(self.cfg.seed, f"requests:{s}"),
                                 self.fixed_prompt(stores, s) if strategy == "fixed" else None)
            out[s] = pipe.batch_translate_styled(reqs, drafts)
        return out

    @staticmethod
    def hypotheses(results: Mapping[str, Sequence]) -> dict:
        return {s: [r.hypothesis.text for r in rs] for s, rs in results.items()}

    def baseline_outputs(self) -> dict:
        hyps = [s.text for s in translate_plain(self.model("baseline"), self.task.testset.sources, self.cfg.beam)]
        return {s: hyps for s in self.task.styles}

    def tag_outputs(self, level: int | None = None) -> dict:
        model = self.model("tag", level)
        return {s: [h.text for h in translate_tagged(model, self.task.testset.sources, s, self.cfg.beam)]
                for s in self.task.styles}

    # -- reports ------------------------------------------------------------------

    def compare(self, systems: Mapping[str, Mapping[str, Sequence[str]]], title: str, verbose: bool = False) -> Report:
        return run_comparison(systems, self.task.testset, self.task.classifier, title=title, keep_details=verbose)

    def main_report(self, verbose: bool = False) -> Report:
        systems = {
            "baseline": self.baseline_outputs(),
            "tag": self.tag_outputs(),
            "styleap": self.hypotheses(self.styleap_outputs()),
        }
        return self.compare(systems, "main comparison", verbose)

    def strategy_report(self, verbose: bool = False) -> Report:
        systems = {}
        stores = self.style_stores()
        for strategy in ("retrieved_target", "retrieved_source", "random", "fixed"):
            systems[strategy] = self.hypotheses(self.styleap_outputs("styleap", strategy, stores))
        drafts = [d.text for d in self.drafts("styleap", self.model("styleap"))]
        systems["no_prompt"] = {s: drafts for s in self.task.styles}
        return self.compare(systems, "prompt selection strategies", verbose)

    def unsupervised_report(self, verbose: bool = False) -> Report:
        small = min(self.cfg.sweep_levels)
        systems = {
            "styleap": self.hypotheses(self.styleap_outputs("styleap")),
            "unsupervised": self.hypotheses(self.styleap_outputs("unsupervised")),
            "tag": self.tag_outputs(),
            f"tag@{small}": self.tag_outputs(small),
        }
        return self.compare(systems, "unsupervised prompt retrieval", verbose)

    def size_sweep(self) -> list[dict]:
        """Rows (level, system, style, bleu, transfer_ratio) for StyleAP, tag-tuning and the baseline."""
        from .evaluation import size_sweep

        testset, clf = self.task.testset, self.task.classifier
        base = self.baseline_outputs()
        smallest_corpus = min(len(self.task.corpora[s]) for s in self.task.styles)
        labelled = min(sum(1 for p in self.task.parallel if p.style_label == s) for s in self.task.styles)

        def evaluate_level(level):
            if level > labelled:
                raise ConfigurationError(f"sweep level {level} exceeds the {labelled} labelled pairs per style")
            systems = {
                "styleap": self.hypotheses(self.styleap_outputs("styleap", stores=self.style_stores(level))),
                "tag": self.tag_outputs(level),
                "baseline": base,
            }
            rows = []
            for name, per_style in systems.items():
                for s in self.task.styles:
                    rows.append({
                        "system": name, "style": s,
                        "bleu": corpus_bleu(per_style[s], testset.references(s)).score,
                        "transfer_ratio": transfer_ratio(per_style[s], s, clf),
                    })
            return rows

        return size_sweep(self.cfg.sweep_levels, evaluate_level, smallest_corpus)

    def attention_events(self, system: str = "styleap", items: int | None = None) -> dict:
        """Where the decoder looks when it emits a style marker.

        For every marker word in a second-pass hypothesis, the event is the
        step emitting the word's last piece. The final layer's self-attention
        row, averaged over heads, is taken with the two most recent positions
        masked out; the event counts as a hit when the argmax falls on a
        prompt token.
        """
        model = self.model(system)
        tok = model.tokenizer
        stores = self.style_stores()
        n = items or self.cfg.attention_items
        provider = self.pipeline(model, stores).provider
        drafts = self.drafts(system, model)[:n]
        events = hits = 0
        cross_hits = 0
        for s in self.task.styles:
            markers = self.task.classifier.lexicons[s]
            for source, draft in zip(self.task.testset.sources[:n], drafts):
                prompt = select_prompt_inference(draft, stores[s], provider, "retrieved_target")
                prompt_ids = tok.encode(prompt.text)
                src_ids = list(prompt_ids) + [tok.sep_id] + tok.encode(source)
                out, trace = translate_with_attention(model, src_ids)
                if tok.sep_id not in out:
                    continue
                k = out.index(tok.sep_id)  # decoder inputs 1..k hold the regurgitated prompt
                for last in _marker_piece_positions(tok, out[k + 1:], markers):
                    t = k + 1 + last  # output index -> the step predicting it
                    row = trace.self_attn[-1].mean(axis=0)[t, : t + 1].astype(np.float64)
                    row[max(0, t - 1): t + 1] = -np.inf
                    if not np.isfinite(row).any():
                        continue
                    events += 1
                    j = int(np.argmax(row))
                    hits += 1 <= j <= k
                    crow = trace.cross_attn[-1].mean(axis=0)[t]
                    cross_hits += int(np.argmax(crow)) < len(prompt_ids)
        return {"events": events, "prompt_hits": hits, "ratio": hits / events if events else 0.0,
                "cross_prompt_ratio": cross_hits / events if events else 0.0}


def _marker_piece_positions(tok: TokenizerModel, ids: Sequence[int], markers) -> list[int]:
    """Indices (into ``ids``) of the last piece of every marker word."""
    out, word, start = [], [], 0
    pieces = [tok.pieces[i] for i in ids]
    bounds = []
    for i, p in enumerate(pieces):
        if p.startswith(WORD_START) and word:
            bounds.append((start, i - 1))
            word, start = [], i
        word.append(p)
    if word:
        bounds.append((start, len(pieces) - 1))
    for a, b in bounds:
        text = tok.decode(ids[a: b + 1])
        if text in markers:
            out.append(b)
    return out


def write_rows_csv(rows: Sequence[Mapping], path, columns: Sequence[str]):
    from .evaluation import rows_to_csv

    Path(path).write_text(rows_to_csv(rows, columns), encoding="utf-8")
