import json
import subprocess
import sys

import pytest

from encdistill.checkpoint import file_digest, load_checkpoint
from encdistill.cli import build_parser, main

TINY = {
    "model": {"num_layers": 2, "hidden_size": 16, "num_heads": 2, "ff_size": 32,
              "vocab_size": 64, "max_positions": 24},
    "data": {"batch_size": 8, "n_max": 24},
    "seed": 3,
}
CAMEMBERT = {"model": {"num_layers": 12, "hidden_size": 768, "num_heads": 12, "ff_size": 3072,
                       "vocab_size": 32005, "max_positions": 514}}


def write(tmp_path, name, obj):
    path = tmp_path / name
    path.write_text(json.dumps(obj, indent=2), encoding="utf-8")
    return str(path)


@pytest.fixture
def corpus(tmp_path):
    path = tmp_path / "corpus.txt"
    path.write_text("\n".join(["le chat mange la souris .", "la fille lit un livre .",
                               "les chiens dorment dans le jardin ."] * 10) + "\n", encoding="utf-8")
    return str(path)


@pytest.fixture
def teacher_dir(tmp_path, corpus):
    out = tmp_path / "teacher"
    assert main(["train-teacher", "--config", write(tmp_path, "t.json", TINY), "--corpus", corpus,
                 "--steps", "6", "--out", str(out)]) == 0
    return out


@pytest.mark.parametrize("layers, count", [(12, "110,030,592"), (6, "67,503,360")])
def test_params_on_base_configs(tmp_path, capsys, layers, count):
    cfg = {"model": dict(CAMEMBERT["model"], num_layers=layers)}
    assert main(["params", "--config", write(tmp_path, "c.json", cfg)]) == 0
    out = capsys.readouterr().out
    assert f"formula_count: {count}" in out and f"audited_count: {count}" in out


def test_missing_field_exits_2_and_names_it(tmp_path, capsys):
    cfg = {"model": {k: v for k, v in CAMEMBERT["model"].items() if k != "hidden_size"}}
    assert main(["params", "--config", write(tmp_path, "c.json", cfg)]) == 2
    assert "hidden_size" in capsys.readouterr().err


def test_malformed_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "model": {,\n}', encoding="utf-8")
    assert main(["params", "--config", str(path)]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unknown_field_exits_2(tmp_path, capsys):
    cfg = dict(TINY, optimizer={"learning_rate": 1.0})
    assert main(["train-teacher", "--config", write(tmp_path, "c.json", cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert "optimizer.learning_rate" in capsys.readouterr().err


def test_train_teacher_artifacts(teacher_dir):
    manifest = json.loads((teacher_dir / "manifest.json").read_text())
    assert manifest["command"] == "train-teacher" and manifest["seed"] == 3
    assert manifest["checkpoint_sha256"] == file_digest(teacher_dir / "checkpoint.bin")
    assert set(manifest["inputs"]) == {"config", "corpus"}
    lines = (teacher_dir / "loss.log").read_text().splitlines()
    assert lines[0] == "step\tsoft_label\tcosine\tmlm\ttotal" and len(lines) == 1 + 7
    ckpt = load_checkpoint(teacher_dir / "checkpoint.bin")
    assert ckpt.config.vocab_size == len(ckpt.meta["vocab"])


def test_refuses_to_overwrite_without_force(tmp_path, corpus, teacher_dir, capsys):
    cfg = write(tmp_path, "t2.json", TINY)
    args = ["train-teacher", "--config", cfg, "--corpus", corpus, "--steps", "6", "--out", str(teacher_dir)]
    before = (teacher_dir / "checkpoint.bin").read_bytes()
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert (teacher_dir / "checkpoint.bin").read_bytes() == before
    assert main(args + ["--force"]) == 0
    # same inputs, same seed: the rewritten checkpoint is identical
    assert (teacher_dir / "checkpoint.bin").read_bytes() == before


def test_identical_runs_identical_digests(tmp_path, corpus):
    cfg = write(tmp_path, "t.json", TINY)
    for name in ("a", "b"):
        assert main(["train-teacher", "--config", cfg, "--corpus", corpus, "--steps", "5",
                     "--out", str(tmp_path / name)]) == 0
    assert file_digest(tmp_path / "a" / "checkpoint.bin") == file_digest(tmp_path / "b" / "checkpoint.bin")
    assert (tmp_path / "a" / "loss.log").read_bytes() == (tmp_path / "b" / "loss.log").read_bytes()


def test_distill_defaults_in_manifest(tmp_path, corpus, teacher_dir, capsys):
    out = tmp_path / "student"
    assert main(["distill", "--teacher", str(teacher_dir / "checkpoint.bin"), "--corpus", corpus,
                 "--steps", "4", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    d = manifest["config"]["distill"]
    assert (d["alpha"], d["beta"], d["gamma"]) == (0.5, 0.3, 0.2)
    assert d["student_layers"] == 1 and manifest["config"]["model"]["num_layers"] == 1
    assert "final loss" in capsys.readouterr().out


def test_distill_weight_flags_override(tmp_path, corpus, teacher_dir):
    out = tmp_path / "student"
    assert main(["distill", "--teacher", str(teacher_dir / "checkpoint.bin"), "--corpus", corpus,
                 "--steps", "2", "--alpha", "0", "--beta", "0", "--gamma", "1", "--out", str(out)]) == 0
    d = json.loads((out / "manifest.json").read_text())["config"]["distill"]
    assert (d["alpha"], d["beta"], d["gamma"]) == (0.0, 0.0, 1.0)
    for line in (out / "loss.log").read_text().splitlines()[1:]:
        step, soft, cos, mlm, total = line.split("\t")
        assert float(soft) == 0.0 and float(cos) == 0.0


def test_eval_mlm(teacher_dir, corpus, capsys):
    assert main(["eval-mlm", "--checkpoint", str(teacher_dir / "checkpoint.bin"), "--corpus", corpus]) == 0
    out = capsys.readouterr().out
    assert "perplexity:" in out and "accuracy:" in out


def test_corrupt_checkpoint_exits_1(tmp_path, teacher_dir, capsys):
    data = bytearray((teacher_dir / "checkpoint.bin").read_bytes())
    data[len(data) // 2] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(data))
    assert main(["eval-mlm", "--checkpoint", str(bad)]) == 1
    assert "digest" in capsys.readouterr().err


def test_bench_analytic_base_pair(tmp_path, capsys):
    out = tmp_path / "bench"
    assert main(["bench", "--pair", "base", "--analytic-only", "--out", str(out)]) == 0
    assert "flop_ratio: 2.0" in capsys.readouterr().out
    assert json.loads((out / "bench.json").read_text())["flop_ratio"] == 2.0
    assert (out / "manifest.json").exists()


def test_f1_command(tmp_path, capsys):
    pred, gold = tmp_path / "pred.txt", tmp_path / "gold.txt"
    pred.write_text("a b\nc\n", encoding="utf-8")
    gold.write_text("b c\nc\n", encoding="utf-8")
    assert main(["f1", "--pred", str(pred), "--gold", str(gold)]) == 0
    out = capsys.readouterr().out
    assert "macro_f1: 0.75" in out


def test_f1_length_mismatch_exits_1(tmp_path):
    pred, gold = tmp_path / "pred.txt", tmp_path / "gold.txt"
    pred.write_text("a\nb\n", encoding="utf-8")
    gold.write_text("a\n", encoding="utf-8")
    assert main(["f1", "--pred", str(pred), "--gold", str(gold)]) == 1


def test_help_shows_loss_weight_defaults():
    sub = build_parser()._subparsers._group_actions[0].choices["distill"]
    text = sub.format_help()
    for value in ("0.5", "0.3", "0.2"):
        assert f"(default: {value})" in text


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as info:
        main(["distill"])
    assert info.value.code == 2


def test_console_script_module_entry():
    proc = subprocess.run([sys.executable, "-m", "encdistill.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "train-teacher" in proc.stdout
