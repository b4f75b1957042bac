import json
import subprocess
import sys

import pytest

from styleap.cli import build_parser, main

from cli_flow import full_pipeline, run

SUBCOMMANDS = ["gen-synthetic", "build-index", "make-data", "train", "translate", "evaluate", "ablate"]


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_exits_zero(cmd, capsys):
    assert main([cmd, "--help"]) == 0
    assert "usage" in capsys.readouterr().out


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "styleap.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "gen-synthetic" in r.stdout


def test_unknown_flag_is_usage_error(capsys):
    assert main(["train", "--bogus"]) == 2
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(err)["error"] == "usage"


def test_gen_synthetic_files(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert run("gen-synthetic", "--out", d, "--n-parallel", 1000, "--n-stylized", 200, "--n-test", 200,
                   "--n-dev", 100) == 0
    lines = lambda p: len(p.read_text(encoding="utf-8").splitlines())
    assert lines(a / "parallel.tsv") == 1000
    assert lines(a / "style_A.txt") == lines(a / "style_B.txt") == 200
    assert lines(a / "test.jsonl") == 200 and lines(a / "dev.tsv") == 100
    for f in a.iterdir():
        if f.name != "run.json":
            assert f.read_bytes() == (b / f.name).read_bytes(), f.name
    lex = json.loads((a / "lexicons.json").read_text())
    assert not set(lex["A"]) & set(lex["B"])
    for line in (a / "test.jsonl").read_text().splitlines():
        ref = set(json.loads(line)["references"]["A"].split())
        assert ref & set(lex["A"]) and not ref & set(lex["B"])


def test_refuses_to_clobber(tmp_path, capsys):
    out = tmp_path / "t"
    assert run("gen-synthetic", "--out", out, "--n-parallel", 50, "--n-stylized", 10, "--n-test", 5) == 0
    before = (out / "parallel.tsv").read_bytes()
    assert run("gen-synthetic", "--out", out, "--n-parallel", 60, "--n-stylized", 10, "--n-test", 5) == 2
    assert "--overwrite" in capsys.readouterr().err
    assert (out / "parallel.tsv").read_bytes() == before
    assert run("gen-synthetic", "--out", out, "--n-parallel", 60, "--n-stylized", 10, "--n-test", 5,
               "--overwrite") == 0


def test_config_conflicts(tmp_path, capsys):
    assert run("make-data", "--parallel", tmp_path / "p.tsv", "--tokenizer", tmp_path / "t.json",
               "--out", tmp_path / "d.tsv", "--strategy", "fixed") == 2
    assert "fixed-prompt" in capsys.readouterr().err


def test_config_file_supplies_defaults(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n_parallel": 30, "n_stylized": 5, "n_test": 4, "n_dev": 0}))
    assert run("gen-synthetic", "--config", cfg, "--out", tmp_path / "t") == 0
    assert len((tmp_path / "t" / "parallel.tsv").read_text().splitlines()) == 30
    archived = json.loads((tmp_path / "t" / "run.json").read_text())
    assert archived["command"] == "gen-synthetic" and archived["options"]["spec"]["n_parallel"] == 30


@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    root = tmp_path_factory.mktemp("flow")
    return root, full_pipeline(root)


def test_full_pipeline_report(flow):
    root, report = flow
    rows = report.read_text().splitlines()
    assert rows[0].startswith("system,style,bleu") and len(rows) == 1 + 2 + 1
    out = [json.loads(x) for x in (root / "work" / "hyp_A.jsonl").read_text().splitlines()]
    assert len(out) == 30 and set(out[0]) == {"source", "draft", "prompt", "hypothesis", "style_id", "fallback"}
    assert (root / "work" / "model.ckpt.curve.csv").exists()
    assert (root / "work" / "data.tsv.json").exists()


def test_unknown_style_exit_2(flow, capsys):
    root, _ = flow
    w = root / "work"
    code = run("translate", "--model", w / "model.ckpt", "--input", root / "task" / "test.jsonl", "--style", "Q",
               "--store", w / "A.store", "--out", w / "q.jsonl")
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert code == 2 and "'Q'" in json.loads(err)["message"]
    code = run("translate", "--model", w / "model.ckpt", "--input", root / "task" / "test.jsonl", "--style", "Q",
               "--mode", "tag", "--out", w / "q2.jsonl")
    assert code == 2


def test_missing_input_is_runtime_error(flow, capsys):
    root, _ = flow
    w = root / "work"
    assert run("translate", "--model", w / "model.ckpt", "--input", root / "nope.txt", "--style", "A",
               "--store", w / "A.store", "--out", w / "z.jsonl") == 1
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "io"


def test_parser_lists_all_subcommands():
    text = build_parser().format_help()
    for cmd in SUBCOMMANDS:
        assert cmd in text
