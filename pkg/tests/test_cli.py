import json

import pytest
from m3s.cli import main
from m3s.data import read_corpus, write_corpus


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth-data", "--seed", "3", "--langs", "4", "--per-pair", "3", "--test", "2",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(data_dir, tmp_path_factory):
    run = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--steps", "4", "--batch-size", "2",
                 "--eval-interval", "2", "--seed", "1"]) == 0
    return run


def test_synth_data_covers_grid(data_dir, capsys):
    assert {p.name for p in data_dir.iterdir()} >= {"train.jsonl", "test.jsonl", "vision.bin", "manifest.json"}
    assert len(read_corpus(data_dir / "train.jsonl")) == 12
    assert len(read_corpus(data_dir / "test.jsonl")) == 8


def test_synth_data_prints_counts(tmp_path, capsys):
    main(["synth-data", "--seed", "0", "--langs", "en,ru", "--per-pair", "2", "--out", str(tmp_path)])
    lines = capsys.readouterr().out.splitlines()
    assert lines == ["en->en: 2", "ru->en: 2", "en->ru: 2", "ru->ru: 2"]


def test_synth_data_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["synth-data", "--seed", "9", "--langs", "3", "--per-pair", "2", "--out", str(tmp_path / name)])
    for f in ("train.jsonl", "vision.bin"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("M3S_SEED", "9")
    main(["synth-data", "--langs", "2", "--per-pair", "2", "--out", str(tmp_path / "env")])
    main(["synth-data", "--seed", "9", "--langs", "2", "--per-pair", "2", "--out", str(tmp_path / "flag")])
    assert (tmp_path / "env" / "train.jsonl").read_bytes() == (tmp_path / "flag" / "train.jsonl").read_bytes()


def test_single_language_rejected(tmp_path, capsys):
    assert main(["synth-data", "--langs", "1", "--out", str(tmp_path)]) == 2
    assert "K >= 2" in capsys.readouterr().err


def test_missing_alignment_fails(data_dir, tmp_path, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    records = read_corpus(data_dir / "train.jsonl")
    records[1].aligned.pop("en")
    write_corpus(records, broken / "train.jsonl")
    (broken / "vision.bin").write_bytes((data_dir / "vision.bin").read_bytes())
    assert main(["train", "--data", str(broken), "--out", str(tmp_path / "run"), "--steps", "2"]) == 2
    assert records[1].id in capsys.readouterr().err


def test_build_vocab(data_dir, tmp_path, capsys):
    assert main(["build-vocab", "--corpus", str(data_dir / "train.jsonl"), "--max-size", "5",
                 "--out", str(tmp_path / "v.txt")]) == 0
    assert len((tmp_path / "v.txt").read_text().splitlines()) == 5


def test_train_outputs(trained):
    lines = [json.loads(s) for s in (trained / "metrics.jsonl").read_text().splitlines()]
    assert [ln["step"] for ln in lines] == [2, 4]
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train" and manifest["seed"] == 1
    assert manifest["beam"]["beam_size"] == 4 and manifest["beam"]["length_penalty"] == 0.6


def test_resume_continues(trained, data_dir, tmp_path):
    run = tmp_path / "resumed"
    assert main(["train", "--data", str(data_dir), "--out", str(run), "--resume",
                 str(trained / "checkpoint.m3ck"), "--steps", "6"]) == 0
    from m3s.training import read_checkpoint
    header, _ = read_checkpoint(run / "checkpoint.m3ck")
    assert header["step"] == 6 and len(header["history"]) == 6


def test_evaluate_defaults(trained, data_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.m3ck"),
                 "--corpus", str(data_dir / "test.jsonl"), "--out", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 5 and table[0].split()[-1] == "Avg."
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["beam"]["beam_size"] == 4 and manifest["beam"]["length_penalty"] == 0.6
    assert len((out / "grid.jsonl").read_text().splitlines()) == 16


def test_evaluate_direction_subset(trained, data_dir, tmp_path, capsys):
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.m3ck"), "--corpus",
                 str(data_dir / "test.jsonl"), "--directions", "en-en,ru-en", "--beam", "1",
                 "--out", str(tmp_path / "e")]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [r.split()[0] for r in rows] == ["en", "ru"]


def test_generate(trained, data_dir, tmp_path):
    out = tmp_path / "gen" / "summaries.jsonl"
    assert main(["generate", "--checkpoint", str(trained / "checkpoint.m3ck"), "--corpus",
                 str(data_dir / "test.jsonl"), "--directions", "cross", "--out", str(out)]) == 0
    rows = [json.loads(s) for s in out.read_text().splitlines()]
    assert len(rows) == 12 * 2 and all(r["src"] != r["tgt"] for r in rows)
    assert (out.parent / "manifest.json").exists()


def test_inspect(trained, capsys):
    assert main(["inspect-checkpoint", str(trained / "checkpoint.m3ck")]) == 0
    out = capsys.readouterr().out
    assert "step 4" in out and "gelu_tanh" in out


def test_bad_direction(trained, data_dir, tmp_path):
    assert main(["evaluate", "--checkpoint", str(trained / "checkpoint.m3ck"), "--corpus",
                 str(data_dir / "test.jsonl"), "--directions", "en-xx", "--out", str(tmp_path)]) == 2


def test_module_entry_point():
    import subprocess
    import sys
    out = subprocess.run([sys.executable, "-m", "m3s", "--version"], capture_output=True, text=True, check=True)
    assert out.stdout.startswith("m3s ")
