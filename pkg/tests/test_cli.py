import json

import pytest

from wrtrain.cli import build_parser, run


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data -> build-vocab -> pretrain -> train-wr on a tiny corpus."""
    root = tmp_path_factory.mktemp("cli")
    d, p, w = root / "data", root / "pre", root / "wr"
    codes = [
        run(["gen-data", "--out-dir", str(d), "--topics", "2", "--stories-per-topic", "6",
             "--test-stories-per-topic", "3", "--pretrain-stories-per-topic", "6"]),
        run(["build-vocab", "--out-dir", str(d), "--corpus", str(d / "pretrain.txt"),
             str(d / "train.jsonl"), str(d / "test.jsonl")]),
        run(["pretrain", "--out-dir", str(p), "--corpus", str(d / "pretrain.txt"),
             "--vocab", str(d / "vocab.txt"), "--d-model", "8", "--n-heads", "2", "--d-ffn", "16",
             "--n-enc-layers", "1", "--n-dec-layers", "1", "--max-steps", "4",
             "--batch-size", "4", "--log-every", "0"]),
        run(["train-wr", "--out-dir", str(w), "--data", str(d / "train.jsonl"),
             "--base", str(p / "pretrain.ckpt"), "--max-steps", "2", "--batch-size", "4",
             "--log-every", "0"]),
    ]
    return root, codes


def test_end_to_end_recipe(pipeline, tmp_path):
    root, codes = pipeline
    assert codes == [0, 0, 0, 0]
    out = tmp_path / "eval"
    assert run(["evaluate", "--out-dir", str(out), "--data", str(root / "data" / "test.jsonl"),
                "--checkpoint", str(root / "wr" / "wr.ckpt")]) == 0
    lines = (out / "eval_report.jsonl").read_text().splitlines()
    assert len(lines) == 7 and "aggregate" in json.loads(lines[-1])
    snap = json.loads((out / "resolved_config.json").read_text())
    assert snap["command"] == "evaluate" and snap["seed"] == 0


def test_identical_runs_identical_outputs(pipeline, tmp_path):
    root, _ = pipeline
    args = ["--data", str(root / "data" / "train.jsonl"), "--base",
            str(root / "pre" / "pretrain.ckpt"), "--max-steps", "2", "--batch-size", "4",
            "--log-every", "0"]
    for name in ("a", "b"):
        assert run(["train-wr", "--out-dir", str(tmp_path / name), *args]) == 0
    assert (tmp_path / "a" / "wr.ckpt").read_bytes() == (tmp_path / "b" / "wr.ckpt").read_bytes()
    strip = [[{k: v for k, v in json.loads(x).items() if k != "wall_time"}
              for x in (tmp_path / n / "train_log.jsonl").read_text().splitlines()] for n in "ab"]
    assert strip[0] == strip[1]


def test_generate_and_missing_input(pipeline, tmp_path, capsys):
    root, _ = pipeline
    ckpt = str(root / "wr" / "wr.ckpt")
    (tmp_path / "in.txt").write_text("tom went to the kitchen .\nanna saw a wave .\n")
    assert run(["generate", "--out-dir", str(tmp_path), "--checkpoint", ckpt,
                "--input", str(tmp_path / "in.txt"), "--fixed-length",
                "--decode-max-len", "5"]) == 0
    gens = [json.loads(x) for x in (tmp_path / "generations.jsonl").read_text().splitlines()]
    assert len(gens) == 2 and all(len(g["continuation"].split()) == 5 for g in gens)
    assert run(["generate", "--out-dir", str(tmp_path), "--checkpoint", ckpt,
                "--input", str(tmp_path / "nope.txt")]) == 1
    assert "not found" in capsys.readouterr().err


def test_config_file_and_override_precedence(pipeline, tmp_path):
    root, _ = pipeline
    (tmp_path / "c.json").write_text(json.dumps({"k": 0.0, "decode_max_len": 3, "seed": 4}))
    (tmp_path / "in.txt").write_text("tom went to the barn .\n")
    assert run(["generate", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path),
                "--checkpoint", str(root / "wr" / "wr.ckpt"), "--input", str(tmp_path / "in.txt"),
                "--decode-max-len", "4"]) == 0
    snap = json.loads((tmp_path / "resolved_config.json").read_text())
    assert snap["k"] == 0.0 and snap["decode_max_len"] == 4 and snap["seed"] == 4


@pytest.mark.parametrize("argv", [
    ["generate", "--out-dir", "x", "--checkpoint", "c", "--input", "i", "--bogus", "1"],
    ["generate", "--checkpoint", "c", "--input", "i"],
    ["launch"],
    ["pretrain", "--out-dir", "x", "--corpus", "c"],
])
def test_validation_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == 1


def test_unknown_config_key_exit_1(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"temperature": 0.7}))
    assert run(["generate", "--config", str(tmp_path / "c.json"), "--out-dir", str(tmp_path),
                "--checkpoint", "c", "--input", "i"]) == 1


def test_corrupt_checkpoint_exit_2(pipeline, tmp_path):
    root, _ = pipeline
    blob = bytearray((root / "wr" / "wr.ckpt").read_bytes())
    blob[100] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    (tmp_path / "in.txt").write_text("tom went to the barn .\n")
    assert run(["generate", "--out-dir", str(tmp_path), "--checkpoint", str(tmp_path / "bad.ckpt"),
                "--input", str(tmp_path / "in.txt")]) == 2


def test_gradcheck_rejects_32_bit(tmp_path):
    assert run(["gradcheck", "--out-dir", str(tmp_path), "--precision", "32"]) == 1


def test_gradcheck_sampled_passes(tmp_path):
    assert run(["gradcheck", "--out-dir", str(tmp_path), "--max-entries", "2"]) == 0
    text = (tmp_path / "gradcheck.txt").read_text()
    assert "FAIL" not in text and "wr_loss[hadamard]" in text


def test_help_documents_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name, p in sub.choices.items():
        assert run([name, "--help"]) == 0
        text = capsys.readouterr().out
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            assert action.help, (name, action.dest)
