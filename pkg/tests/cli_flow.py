"""A small end-to-end CLI run shared by the CLI and acceptance tests."""

from pathlib import Path

from styleap.cli import main


def run(*argv) -> int:
    return main([str(a) for a in argv])


def full_pipeline(root: Path, seed: int = 0, steps: int = 40) -> Path:
    """gen -> index -> data -> train -> translate -> evaluate; returns the report path."""
    task, work = root / "task", root / "work"
    work.mkdir(parents=True)
    steps_ok = [
        run("gen-synthetic", "--out", task, "--seed", seed, "--n-parallel", 400, "--n-stylized", 60,
            "--n-test", 30, "--n-dev", 20),
        run("build-index", "--corpus", task / "style_A.txt", "--out", work / "A.store", "--seed", seed),
        run("build-index", "--corpus", task / "style_B.txt", "--out", work / "B.store", "--seed", seed),
        run("make-data", "--parallel", task / "parallel.tsv", "--corpus", f"A={task / 'style_A.txt'}",
            "--corpus", f"B={task / 'style_B.txt'}", "--tokenizer", work / "tok.json", "--out", work / "data.tsv",
            "--seed", seed),
        run("train", "--data", work / "data.tsv", "--tokenizer", work / "tok.json", "--dev", task / "dev.tsv",
            "--steps", steps, "--checkpoint-every", 20, "--out", work / "model.ckpt", "--seed", seed),
    ]
    for style in ("A", "B"):
        steps_ok.append(run("translate", "--model", work / "model.ckpt", "--input", task / "test.jsonl",
                            "--style", style, "--store", work / "A.store", "--store", work / "B.store",
                            "--beam", 2, "--out", work / f"hyp_{style}.jsonl", "--seed", seed))
    report = root / "report.csv"
    steps_ok.append(run("evaluate", "--test", task / "test.jsonl", "--lexicons", task / "lexicons.json",
                        "--hyp", f"styleap:A={work / 'hyp_A.jsonl'}", "--hyp", f"styleap:B={work / 'hyp_B.jsonl'}",
                        "--out", report))
    assert steps_ok == [0] * len(steps_ok), steps_ok
    return report
