import math

import numpy as np
import pytest

from encdistill import autodiff as ad
from encdistill.checkpoint import load_checkpoint, save_checkpoint, to_bytes
from encdistill.corpus import build_vocab
from encdistill.distill import DistillConfig, distill_loss
from encdistill.encoder import ModelConfig, encode, init_random
from encdistill.training import (
    MLM_ONLY, Adam, DataConfig, LossLog, LossRecord, OptimizerConfig, TrainingDiverged, distill,
    smoothed, train_teacher,
)

DOCS = ["le petit chat noir mange la souris grise .",
        "les enfants lisent un livre dans le jardin .",
        "la vache broute dans la forêt .",
        "un oiseau chante ."]
VOCAB = build_vocab(DOCS, 64)
CFG = ModelConfig(num_layers=2, hidden_size=32, num_heads=2, ff_size=64,
                  vocab_size=len(VOCAB), max_positions=16)
DATA = DataConfig(batch_size=4, n_max=16, mask_rate=0.3)


def test_overfits_one_batch():
    # the four documents form a single batch every epoch
    result = train_teacher(CFG, DOCS, VOCAB, 300, 0, DATA, OptimizerConfig(lr=3e-3))
    initial = result.history[0].mlm
    assert initial == pytest.approx(math.log(len(VOCAB)), rel=0.05)
    assert result.history[-1].mlm < 0.2 * initial
    assert all(r.soft_label == 0 and r.cosine == 0 for r in result.history)


def test_steps_must_be_positive():
    with pytest.raises(ValueError):
        train_teacher(CFG, DOCS, VOCAB, 0, 0, DATA)
    with pytest.raises(ValueError):
        distill(init_random(CFG, 0), CFG.replace(num_layers=1), DOCS, VOCAB, 0)


def test_vocab_size_must_match():
    with pytest.raises(ValueError):
        train_teacher(CFG.replace(vocab_size=len(VOCAB) + 1), DOCS, VOCAB, 5, 0, DATA)


def test_same_seed_same_checkpoint_and_log(tmp_path):
    a = train_teacher(CFG, DOCS, VOCAB, 20, 7, DATA, log_path=tmp_path / "a.log")
    b = train_teacher(CFG, DOCS, VOCAB, 20, 7, DATA, log_path=tmp_path / "b.log")
    c = train_teacher(CFG, DOCS, VOCAB, 20, 8, DATA)
    assert to_bytes(a.model, a.meta) == to_bytes(b.model, b.meta)
    assert (tmp_path / "a.log").read_bytes() == (tmp_path / "b.log").read_bytes()
    assert to_bytes(a.model) != to_bytes(c.model)


def test_log_file_matches_history(tmp_path):
    path = tmp_path / "loss.log"
    result = train_teacher(CFG, DOCS, VOCAB, 10, 0, DATA, log_path=path)
    assert path.read_text().splitlines()[0] == "step\tsoft_label\tcosine\tmlm\ttotal"
    assert LossLog.read(path) == result.history
    assert [r.step for r in result.history] == list(range(11))


def test_final_log_line_replays_from_checkpoint(tmp_path):
    result = train_teacher(CFG, DOCS, VOCAB, 30, 1, DATA)
    save_checkpoint(result.model, result.meta, tmp_path / "ckpt.bin")
    model = load_checkpoint(tmp_path / "ckpt.bin").model
    batch = result.final_batch
    bd = distill_loss(encode(model, batch.token_ids, batch.valid), None, batch, MLM_ONLY)
    assert bd.total == pytest.approx(result.history[-1].total, abs=1e-5)


def test_copied_student_starts_closer_than_random():
    teacher = train_teacher(CFG.replace(num_layers=4), DOCS, VOCAB, 60, 0, DATA).model
    scfg = CFG.replace(num_layers=2)
    copied = distill(teacher, scfg, DOCS, VOCAB, 1, seed=0, data=DATA)
    random = distill(teacher, scfg, DOCS, VOCAB, 1, seed=0, data=DATA, student_init="random")
    assert copied.history[0].soft_label < random.history[0].soft_label


def test_teacher_untouched_by_distillation():
    teacher = init_random(CFG.replace(num_layers=4), 0)
    before = to_bytes(teacher)
    distill(teacher, CFG.replace(num_layers=2), DOCS, VOCAB, 25, seed=0, data=DATA)
    assert to_bytes(teacher) == before


def test_zero_distillation_weights_reduce_to_mlm():
    teacher = init_random(CFG.replace(num_layers=4), 0)
    plain = DistillConfig(alpha=0.0, beta=0.0, gamma=1.0)
    result = distill(teacher, CFG.replace(num_layers=2), DOCS, VOCAB, 15, plain, seed=0, data=DATA)
    for rec in result.history:
        assert rec.soft_label == 0 and rec.cosine == 0 and rec.total == pytest.approx(rec.mlm, abs=1e-6)
    # a different teacher with the same copied layers gives the same run
    other = teacher.clone()
    for layer in (1, 3):
        other.layers[layer].w_q.data += 1.0
    again = distill(other, CFG.replace(num_layers=2), DOCS, VOCAB, 15, plain, seed=0, data=DATA)
    assert to_bytes(result.model) == to_bytes(again.model)


def test_non_finite_forward_aborts_with_step():
    teacher = init_random(CFG.replace(num_layers=4), 0)
    teacher.word_embedding.data[:] = 3e38
    teacher.positional_embedding.data[:] = 3e38
    with pytest.raises(TrainingDiverged) as info:
        with np.errstate(over="ignore", invalid="ignore"):
            distill(teacher, CFG.replace(num_layers=2), DOCS, VOCAB, 5, seed=0, data=DATA)
    assert info.value.step == 0


# ---------------------------------------------------------------- optimizer

def test_adam_first_step_by_hand():
    p = ad.parameter([1.0, -2.0])
    p.grad = np.array([0.5, -0.1], dtype=np.float32)
    opt = Adam([p], OptimizerConfig(lr=0.1, warmup_fraction=0.0, clip_norm=0.0), total_steps=10)
    opt.step()
    # bias-corrected first step moves each entry by lr * sign(g)
    np.testing.assert_allclose(p.data, [0.9, -1.9], rtol=1e-6)


def test_warmup_is_linear_then_constant():
    opt = Adam([ad.parameter([0.0])], OptimizerConfig(lr=1.0, warmup_fraction=0.05), total_steps=200)
    assert [opt.lr_at(t) for t in (1, 5, 10, 11, 200)] == [0.1, 0.5, 1.0, 1.0, 1.0]


def test_clipping_bounds_the_step_direction():
    p = ad.parameter([0.0, 0.0])
    p.grad = np.array([30.0, 40.0], dtype=np.float32)
    opt = Adam([p], OptimizerConfig(lr=1.0, warmup_fraction=0.0, clip_norm=1.0), total_steps=1)
    assert opt.step() == pytest.approx(50.0)
    np.testing.assert_allclose(opt.state.m[0], [0.06, 0.08], rtol=1e-4)


def test_loss_record_line_round_trip():
    rec = LossRecord(3, 0.1, 0.2, 1 / 3, 0.7)
    assert LossRecord.from_line(rec.to_line()) == rec


def test_smoothed_windows():
    np.testing.assert_allclose(smoothed([1, 3, 5, 7, 9], 2), [2.0, 6.0])
