"""Command-line interface: ``styleap <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Errors are reported as one JSON line on stderr. Every command echoes its
resolved run configuration on stderr and archives it as ``<output>.run.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError, StyleAPError

log = logging.getLogger("styleap")


class UsageError(ConfigurationError):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single line, exit code 2
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    command: str
    seed: int
    options: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=str)


# --- helpers -------------------------------------------------------------------------

def _refuse_clobber(path: Path, overwrite: bool):
    if path.exists() and not overwrite:
        if path.is_dir() and not any(path.iterdir()):
            return
        raise ConfigurationError(f"{path} exists; pass --overwrite to replace it")


def _archive(cfg: RunConfig, out: Path):
    target = out / "run.json" if out.is_dir() else out.with_name(out.name + ".run.json")
    target.write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _kv(items, flag: str) -> dict:
    out = {}
    for it in items or []:
        if "=" not in it:
            raise UsageError(f"{flag} expects KEY=VALUE, got {it!r}")
        k, v = it.split("=", 1)
        out[k] = v
    return out


def _provider(name: str, model_path: str | None = None):
    from .embedder import get_provider

    if name == "learned":
        if not model_path:
            raise ConfigurationError("--embedder learned needs --model")
        from .translator import load_checkpoint

        model = load_checkpoint(model_path)
        return get_provider("learned", model, model.tokenizer)
    return get_provider(name)


def _load_sources(path: str) -> list[str]:
    from .corpus import _read_lines

    p = Path(path)
    if p.suffix == ".jsonl":
        from .evaluation import MultiwayTestSet

        return MultiwayTestSet.load(p).sources
    return _read_lines(p)


def _load_corpus(path: str, style: str | None):
    from .corpus import load_manifest, load_monolingual

    p = Path(path)
    if p.suffix == ".json":
        corpus = load_manifest(p)
    elif style is None and p.with_suffix(".json").exists():
        corpus = load_manifest(p.with_suffix(".json"))
    else:
        if style is None:
            raise ConfigurationError(f"style id for {p} unknown; pass --style or a manifest")
        corpus = load_monolingual(p, style)
    if style is not None and corpus.style_id != style:
        raise ConfigurationError(f"manifest declares style {corpus.style_id!r}, not {style!r}")
    return corpus


def _set_threads():
    import torch

    torch.set_num_threads(1)


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_synthetic(args, cfg: RunConfig):
    from .synthetic import SyntheticTaskSpec, generate, write_task

    spec_fields = json.loads(Path(args.spec).read_text()) if args.spec else {}
    spec_fields["seed"] = args.seed
    for name in ("n_parallel", "n_stylized", "n_test", "n_dev"):
        if getattr(args, name) is not None:
            spec_fields[name] = getattr(args, name)
    spec = SyntheticTaskSpec.from_dict(spec_fields)
    cfg.options["spec"] = asdict(spec)
    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    paths = write_task(generate(spec), out)
    _archive(cfg, out)
    print(json.dumps(paths, sort_keys=True))


def cmd_build_index(args, cfg: RunConfig):
    from .datastore import build, build_ivf

    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    corpus = _load_corpus(args.corpus, args.style)
    store = build(corpus, _provider(args.embedder, args.model), args.metric)
    if args.ivf:
        store = store.with_index(build_ivf(store, args.ivf, args.ivf_iters, args.seed, args.nprobe))
    store.save(out)
    _archive(cfg, out)
    print(json.dumps({"store": str(out), "style": store.style_id, "entries": len(store),
                      "checksum": store.checksum()}, sort_keys=True))


def cmd_make_data(args, cfg: RunConfig):
    from .corpus import TokenizerModel, load_parallel_tsv, parallel_sides, tokenize_pairs, train_tokenizer
    from .experiments import label_stores, pooled_training_store
    from .prompt_builder import MixConfig, build_dataset, write_dataset
    from .pipeline import derive_seed

    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    if args.strategy == "fixed" and args.fixed_prompt is None:
        raise ConfigurationError("--strategy fixed requires --fixed-prompt")
    pairs = load_parallel_tsv(args.parallel)
    corpora = {s: _load_corpus(p, s) for s, p in _kv(args.corpus, "--corpus").items()}
    tok_path = Path(args.tokenizer)
    if tok_path.exists():
        tok = TokenizerModel.load(tok_path)
    else:
        styles = sorted(set(corpora) | {p.style_label for p in pairs if p.style_label and p.style_label != "general"})
        tok = train_tokenizer(parallel_sides(pairs) + [corpora[s] for s in sorted(corpora)], args.max_vocab,
                              args.min_frequency, style_ids=styles)
        tok.save(tok_path)
    pairs = tokenize_pairs(tok, pairs)
    before = len(pairs)
    pairs = [p for p in pairs if len(p.source.tokens) <= args.max_len and len(p.target.tokens) <= args.max_len]
    provider = _provider(args.embedder, args.model)
    if args.strategy == "unsupervised":
        stores = pooled_training_store(pairs, corpora, provider, args.metric)
        checksum = stores.checksum()
    else:
        stores = label_stores(pairs, corpora, provider, args.metric)
        checksum = ",".join(f"{k}:{v.checksum()}" for k, v in sorted(stores.items()))
    mix = MixConfig(args.fraction, derive_seed(args.seed, "mix") % 2**31)
    items = build_dataset(pairs, stores, provider, args.strategy, mix, tok, args.max_len,
                          exclude_self=not args.no_exclude_self, fixed_prompt=args.fixed_prompt)
    write_dataset(items, out, {"strategy": args.strategy, "seed": args.seed, "prompted_fraction": args.fraction,
                               "datastore_checksum": checksum, "length_filtered": before - len(pairs)})
    _archive(cfg, out)
    print(json.dumps({"data": str(out), "examples": len(items), "tokenizer": str(tok_path)}, sort_keys=True))


def cmd_train(args, cfg: RunConfig):
    from .corpus import TokenizerModel, load_parallel_tsv, tokenize_pairs
    from .pipeline import derive_seed
    from .prompt_builder import read_dataset, training_examples
    from .translator import ModelConfig, TrainConfig, TranslationModel, save_checkpoint, train

    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    _set_threads()
    tok = TokenizerModel.load(args.tokenizer)
    rows = read_dataset(args.data, tok)
    tags = {s: tok.tag_id(s) for s in tok.specials.style_tags} if args.tags else {}
    examples = [((tags[lab],) + src if lab in tags else src, tgt) for src, tgt, lab in rows]
    dev = []
    if args.dev:
        dev = training_examples(tokenize_pairs(tok, load_parallel_tsv(args.dev)), tags or None)
    mcfg = ModelConfig(len(tok), args.enc_layers, args.dec_layers, args.model_dim, args.heads, args.ffn_dim,
                       args.dropout, pad_id=tok.pad_id, bos_id=tok.bos_id, eos_id=tok.eos_id,
                       init_seed=derive_seed(args.seed, "init") % 2**31)
    tcfg = TrainConfig(args.steps, args.batch_tokens, args.lr, args.warmup,
                       checkpoint_every=args.checkpoint_every, seed=derive_seed(args.seed, "train") % 2**31)
    model = TranslationModel(mcfg, tok)
    result = train(model, examples, tcfg, dev=dev)
    save_checkpoint(model, out, {"tags": bool(args.tags), "best_step": result.best_step})
    curve = Path(args.curve) if args.curve else out.with_name(out.name + ".curve.csv")
    result.write_curve(curve)
    _archive(cfg, out)
    print(json.dumps({"model": str(out), "best_step": result.best_step, "best_dev_loss": result.best_dev_loss},
                     sort_keys=True))


def cmd_translate(args, cfg: RunConfig):
    from .datastore import Datastore
    from .errors import UnknownStyleError
    from .pipeline import StyleAPPipeline, derive_seed, make_requests, translate_plain, translate_tagged
    from .translator import load_checkpoint

    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    if args.strategy == "fixed" and args.fixed_prompt is None:
        raise ConfigurationError("--strategy fixed requires --fixed-prompt")
    if args.mode == "styleap" and not args.store:
        raise ConfigurationError("styleap mode needs --store")
    _set_threads()
    model = load_checkpoint(args.model)
    sources = _load_sources(args.input)
    lines = []
    if args.mode == "styleap":
        stores = {}
        for path in args.store:
            st = Datastore.load(path)
            stores[st.style_id] = st
        if args.style not in stores:
            raise UnknownStyleError(args.style)
        provider = _provider(args.embedder, args.model)
        pipe = StyleAPPipeline(model, stores, provider, args.beam)
        reqs = make_requests(sources, args.style, args.strategy, derive_seed(args.seed, f"requests:{args.style}"),
                             args.fixed_prompt)
        lines = [r.to_json() for r in pipe.batch_translate_styled(reqs)]
    elif args.mode == "tag":
        hyps = translate_tagged(model, sources, args.style, args.beam)
        lines = [json.dumps({"source": s, "hypothesis": h.text, "style_id": args.style}, sort_keys=True,
                            ensure_ascii=False) for s, h in zip(sources, hyps)]
    else:
        hyps = translate_plain(model, sources, args.beam)
        lines = [json.dumps({"source": s, "hypothesis": h.text, "style_id": args.style}, sort_keys=True,
                            ensure_ascii=False) for s, h in zip(sources, hyps)]
    out.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    _archive(cfg, out)
    print(json.dumps({"output": str(out), "items": len(lines)}, sort_keys=True))


def _read_hypotheses(path: str) -> list[str]:
    from .corpus import _read_lines

    p = Path(path)
    if p.suffix == ".jsonl":
        return [json.loads(line)["hypothesis"] for line in _read_lines(p)]
    return _read_lines(p)


def _write_report(report, out: Path | None, fmt: str, verbose: bool):
    text = {"csv": report.to_csv, "table": report.to_table}.get(fmt)
    body = text() if text else report.to_json(verbose)
    if out is not None:
        out.write_text(body, encoding="utf-8")
    print(report.to_table(), end="")


def cmd_evaluate(args, cfg: RunConfig):
    from .evaluation import MultiwayTestSet, StyleClassifier, run_comparison

    out = Path(args.out) if args.out else None
    if out is not None:
        _refuse_clobber(out, args.overwrite)
    testset = MultiwayTestSet.load(args.test)
    clf = StyleClassifier.load(args.lexicons)
    systems: dict = {}
    for key, path in _kv(args.hyp, "--hyp").items():
        if ":" not in key:
            raise UsageError(f"--hyp expects SYSTEM:STYLE=PATH, got {key!r}")
        name, style = key.rsplit(":", 1)
        systems.setdefault(name, {})[style] = _read_hypotheses(path)
    if not systems:
        raise UsageError("evaluate needs at least one --hyp")
    report = run_comparison(systems, testset, clf, args.tokenization, title=args.title,
                            keep_details=args.verbose_report)
    _write_report(report, out, args.format, args.verbose_report)
    if out is not None:
        _archive(cfg, out)


def cmd_ablate(args, cfg: RunConfig):
    from .evaluation import rows_to_csv
    from .experiments import Experiment, ExperimentConfig, TaskData

    out = Path(args.out)
    _refuse_clobber(out, args.overwrite)
    out.mkdir(parents=True, exist_ok=True)
    ecfg = ExperimentConfig(seed=args.seed, embedder=args.embedder, metric=args.metric, beam=args.beam,
                            steps=args.steps, batch_tokens=args.batch_tokens,
                            sweep_levels=tuple(int(x) for x in args.levels.split(",")),
                            prompted_fraction=args.fraction)
    cfg.options["experiment"] = asdict(ecfg)
    exp = Experiment(TaskData.load(args.task), ecfg, args.work or out / "work")
    if args.kind == "size":
        rows = exp.size_sweep()
        body = rows_to_csv(rows, ["level", "system", "style", "bleu", "transfer_ratio"])
        (out / "size_sweep.csv").write_text(body, encoding="utf-8")
        print(body, end="")
    elif args.kind == "attention":
        stats = exp.attention_events()
        (out / "attention.json").write_text(json.dumps(stats, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        print(json.dumps(stats, sort_keys=True))
    else:
        report = {"strategy": exp.strategy_report, "unsupervised": exp.unsupervised_report,
                  "main": exp.main_report}[args.kind](verbose=args.verbose_report)
        (out / f"{args.kind}.csv").write_text(report.to_csv(), encoding="utf-8")
        (out / f"{args.kind}.json").write_text(report.to_json(args.verbose_report), encoding="utf-8")
        print(report.to_table(), end="")
    _archive(cfg, out)


# --- parser --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--config", help="JSON file of flag defaults (flags win)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _retrieval(p, model_flag: bool = True):
    p.add_argument("--embedder", default="hash256", help="hash<dim> or learned")
    p.add_argument("--metric", default="cosine", choices=["cosine", "l2"])
    if model_flag:
        p.add_argument("--model", help="checkpoint for --embedder learned")


def build_parser() -> argparse.ArgumentParser:
    from .prompt_builder import INFERENCE_STRATEGIES, STRATEGIES

    parser = _Parser(prog="styleap", description="Retrieval-based style activation prompting for translation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write the synthetic two-style task")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with task spec fields")
    p.add_argument("--n-parallel", type=int)
    p.add_argument("--n-stylized", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--n-dev", type=int)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("build-index", help="embed a stylized corpus into a datastore file")
    _common(p)
    _retrieval(p)
    p.add_argument("--corpus", required=True, help="one sentence per line, or a JSON manifest")
    p.add_argument("--style", help="style id (read from the manifest when omitted)")
    p.add_argument("--ivf", type=int, default=0, help="number of IVF lists (0 = exact only)")
    p.add_argument("--ivf-iters", type=int, default=10)
    p.add_argument("--nprobe", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("make-data", help="build the prompt-augmented training set")
    _common(p)
    _retrieval(p)
    p.add_argument("--parallel", required=True, help="TSV source<TAB>target<TAB>label?")
    p.add_argument("--corpus", action="append", metavar="STYLE=PATH", help="stylized corpus (repeatable)")
    p.add_argument("--strategy", default="retrieved_target", choices=STRATEGIES)
    p.add_argument("--fixed-prompt")
    p.add_argument("--fraction", type=float, default=0.5, help="share of prompted examples")
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--max-vocab", type=int, default=2000)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--no-exclude-self", action="store_true")
    p.add_argument("--tokenizer", required=True, help="tokenizer JSON (trained and written if absent)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train a translation model")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--tokenizer", required=True)
    p.add_argument("--dev", help="plain parallel TSV for checkpoint selection")
    p.add_argument("--tags", action="store_true", help="prefix labelled pairs with their style tag")
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-tokens", type=int, default=2048)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--warmup", type=int, default=200)
    p.add_argument("--checkpoint-every", type=int, default=250)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--model-dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn-dim", type=int, default=256)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--curve", help="loss curve CSV (default <out>.curve.csv)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="stylized two-pass (or tagged / plain) translation")
    _common(p)
    _retrieval(p, model_flag=False)
    p.add_argument("--model", required=True, help="checkpoint (also feeds --embedder learned)")
    p.add_argument("--input", required=True, help="sources, one per line, or a test JSONL")
    p.add_argument("--style", required=True)
    p.add_argument("--store", action="append", help="datastore file (repeatable)")
    p.add_argument("--mode", default="styleap", choices=["styleap", "tag", "plain"])
    p.add_argument("--strategy", default="retrieved_target", choices=INFERENCE_STRATEGIES)
    p.add_argument("--fixed-prompt")
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("evaluate", help="BLEU and transfer ratio against multiway references")
    _common(p)
    p.add_argument("--test", required=True)
    p.add_argument("--lexicons", required=True)
    p.add_argument("--hyp", action="append", metavar="SYSTEM:STYLE=PATH", help="hypotheses (repeatable)")
    p.add_argument("--tokenization", default="13a", choices=["13a", "none"])
    p.add_argument("--format", default="csv", choices=["csv", "table", "json"])
    p.add_argument("--verbose-report", action="store_true", help="per-item detail in JSON output")
    p.add_argument("--title", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run a comparison experiment on a task directory")
    _common(p)
    p.add_argument("kind", choices=["strategy", "unsupervised", "size", "main", "attention"])
    p.add_argument("--task", required=True, help="directory written by gen-synthetic")
    p.add_argument("--work", help="checkpoint cache directory (default <out>/work)")
    p.add_argument("--out", required=True)
    p.add_argument("--embedder", default="hash256")
    p.add_argument("--metric", default="cosine", choices=["cosine", "l2"])
    p.add_argument("--beam", type=int, default=4)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--batch-tokens", type=int, default=2048)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--levels", default="1000,100,10")
    p.add_argument("--verbose-report", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    try:
        defaults = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, ValueError) as e:
        raise UsageError(f"cannot read --config: {e}") from None
    if not isinstance(defaults, dict):
        raise UsageError("--config must hold a JSON object")
    for action in parser._subparsers._group_actions:
        for sp in action.choices.values():
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in defaults.items()})


def _fail(code: str, message: str, status: int) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": " ".join(str(message).split())}) + "\n")
    return status


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("usage", e, 2)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    options = {k: v for k, v in vars(args).items() if k not in ("func", "command", "seed")}
    cfg = RunConfig(args.command, args.seed, options)
    sys.stderr.write("run_config " + cfg.to_json() + "\n")
    try:
        args.func(args, cfg)
    except ConfigurationError as e:
        return _fail(getattr(e, "code", "configuration"), e, 2)
    except KeyError as e:  # UnknownStyleError and friends
        if isinstance(e, StyleAPError):
            return _fail(getattr(e, "code", "unknown"), e, 2)
        return _fail("runtime", f"missing key {e}", 1)
    except StyleAPError as e:
        return _fail(getattr(e, "code", "runtime"), e, 1)
    except OSError as e:
        return _fail("io", e, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
