"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from encdistill import autodiff as ad
from encdistill.checkpoint import IntegrityError, from_bytes, to_bytes
from encdistill.corpus import build_vocab, make_batches
from encdistill.distill import DistillConfig, distill_loss, init_student
from encdistill.encoder import (
    CAMEMBERT_BASE, DISTILCAMEMBERT_BASE, LAYER_FIELDS, ModelConfig, audit_param_count, encode,
    init_random, init_zeros, param_count,
)
from encdistill.evaluation import (
    bench, desk_bench_pair, layer_stack_flops, mlm_eval, token_f1, zero_shot_classify,
)
from encdistill.gradcheck import check_gradients
from encdistill.synthetic import load_bundled_corpus, split_corpus
from encdistill.training import DataConfig, distill, smoothed, train_teacher

from gradcases import PRIMITIVE_CASES, SEEDS, model_case
from test_evaluation import F1_CASES, ZERO_SHOT_CASES, masked_batches


def test_criterion_1_parameter_count(criterion):
    t0 = time.perf_counter()
    counts = [param_count(CAMEMBERT_BASE), param_count(DISTILCAMEMBERT_BASE)]
    audits = [audit_param_count(init_zeros(c))["counted"] for c in (CAMEMBERT_BASE, DISTILCAMEMBERT_BASE)]
    elapsed = time.perf_counter() - t0
    ok = counts == [110_030_592, 67_503_360] and audits == counts and elapsed < 1.0
    criterion(1, "parameter-count exactness", ok, f"formula {counts}, audited {audits}, {elapsed:.2f}s")
    assert ok


def test_criterion_2_gradient_fidelity(criterion):
    t0 = time.perf_counter()
    worst_prim, bad = 0.0, []
    for name, build in PRIMITIVE_CASES.items():
        for seed in SEEDS:
            r = check_gradients(*build(np.random.default_rng(seed)), rtol=1e-4)
            worst_prim = max(worst_prim, r.max_rel_error)
            if not r.ok:
                bad.append((name, seed))
    worst_model = 0.0
    for seed in SEEDS:
        r = check_gradients(*model_case(seed), rtol=1e-3)
        worst_model = max(worst_model, r.max_rel_error)
        if not r.ok:
            bad.append(("model", seed))
    elapsed = time.perf_counter() - t0
    ok = not bad and elapsed < 120
    criterion(2, "gradient fidelity", ok,
              f"{len(PRIMITIVE_CASES)} primitives x {len(SEEDS)} seeds max rel {worst_prim:.1e}; "
              f"model x {len(SEEDS)} max rel {worst_model:.1e}; failures {bad[:3]}; {elapsed:.0f}s")
    assert ok


TOY12 = ModelConfig(num_layers=12, hidden_size=16, num_heads=2, ff_size=32, vocab_size=40, max_positions=16)


def toy_batches(count, seed):
    from encdistill.corpus import apply_masking, pad_sequences
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        seqs = [[0] + list(rng.integers(4, 40, size=rng.integers(4, 15))) for _ in range(4)]
        batch = apply_masking(pad_sequences(seqs)[0], 0.3, int(rng.integers(1 << 30)), 40)
        if not batch.empty:
            out.append(batch)
    return out


def test_criterion_3_loss_identities(criterion):
    t0 = time.perf_counter()
    clone_err = mix_err = 0.0
    for seed, batch in enumerate(toy_batches(10, 0)):
        teacher = init_random(TOY12, seed)
        clone = init_student(teacher, TOY12, copy_stride=1)
        t_out = encode(teacher, batch.token_ids, batch.valid)
        bd = distill_loss(encode(clone, batch.token_ids, batch.valid), t_out, batch)
        clone_err = max(clone_err, abs(bd.soft_label), abs(bd.cosine))
        student = init_random(TOY12.replace(num_layers=6), 100 + seed)
        bd = distill_loss(encode(student, batch.token_ids, batch.valid), t_out, batch)
        mix_err = max(mix_err, abs(bd.total - (0.5 * bd.soft_label + 0.3 * bd.cosine + 0.2 * bd.mlm)))
    rng = np.random.default_rng(0)
    pairs = 10_000
    k = rng.integers(2, 9)
    p = rng.dirichlet(np.ones(k), size=pairs).T
    q = rng.dirichlet(np.ones(k), size=pairs).T + 1e-12
    q /= q.sum(axis=0)
    with ad.precision(np.float64):
        kl = ad.kl_div(ad.tensor(p), ad.tensor(q)).data
    elapsed = time.perf_counter() - t0
    ok = clone_err < 1e-6 and mix_err < 1e-6 and kl.shape == (pairs,) and kl.min() >= 0 and elapsed < 60
    criterion(3, "loss identities", ok,
              f"clone |soft|,|cos| <= {clone_err:.1e}; mixture err {mix_err:.1e}; "
              f"min KL over {pairs} pairs {kl.min():.2e}; {elapsed:.1f}s")
    assert ok


def test_criterion_4_layer_copy(criterion):
    t0 = time.perf_counter()
    teacher = init_random(TOY12, 0)
    before = to_bytes(teacher)
    student = init_student(teacher, TOY12.replace(num_layers=6))
    exact = all(getattr(student, n).data.tobytes() == getattr(teacher, n).data.tobytes()
                for n in ("word_embedding", "positional_embedding", "embedding_norm_gain",
                          "embedding_norm_bias"))
    for i, src in enumerate([0, 2, 4, 6, 8, 10]):
        for f in LAYER_FIELDS:
            exact &= getattr(student.layers[i], f).data.tobytes() == getattr(teacher.layers[src], f).data.tobytes()
    shared = any(np.shares_memory(s.data, t.data) for s in student.parameters() for t in teacher.parameters())
    docs = [" ".join(f"w{j}" for j in np.random.default_rng(i).integers(0, 30, size=10)) for i in range(40)]
    vocab = build_vocab(docs, 40)
    cfg = TOY12.replace(vocab_size=len(vocab))
    teacher = init_random(cfg, 1)
    before = to_bytes(teacher)
    result = distill(teacher, cfg.replace(num_layers=6), docs, vocab, 100, seed=0,
                     data=DataConfig(batch_size=8, n_max=16))
    unchanged = to_bytes(teacher) == before
    moved = to_bytes(result.model) != to_bytes(init_student(teacher, cfg.replace(num_layers=6)))
    elapsed = time.perf_counter() - t0
    ok = exact and not shared and unchanged and moved and elapsed < 60
    criterion(4, "layer-copy contract", ok,
              f"bit-exact {exact}, aliasing {shared}, teacher unchanged after 100 steps {unchanged}; "
              f"{elapsed:.1f}s")
    assert ok


def _heldout_similarity(teacher, student, held, vocab, n_max):
    cos, kl = [], []
    for batch in make_batches(held, vocab, 32, n_max, seed=123):
        t = encode(teacher, batch.token_ids, batch.valid)
        s = encode(student, batch.token_ids, batch.valid)
        cos.append(ad.cosine_sim(s.hidden, t.hidden).data[batch.valid])
        kl.append(ad.kl_div_log(s.log_probs, t.log_probs).data[batch.valid])
    return float(np.concatenate(cos).mean()), float(np.concatenate(kl).mean())


@pytest.mark.slow
def test_criterion_5_desk_distillation(criterion):
    t0 = time.perf_counter()
    train, held = split_corpus(load_bundled_corpus())
    vocab = build_vocab(train, 512)
    n_max = 48
    cfg = ModelConfig(num_layers=4, hidden_size=64, num_heads=4, ff_size=128,
                      vocab_size=len(vocab), max_positions=n_max)
    data = DataConfig(batch_size=16, n_max=n_max)
    teacher = train_teacher(cfg, train, vocab, 2000, 0, data).model
    student_cfg = cfg.replace(num_layers=2)
    run = distill(teacher, student_cfg, train, vocab, 1000, DistillConfig(), 0, data)
    control = distill(teacher, student_cfg, train, vocab, 1000, DistillConfig(0.0, 0.0, 1.0), 0, data,
                      student_init="random")
    curve = smoothed(run.totals, 200)
    decreasing = bool(np.all(np.diff(curve) < 0))
    cos, kl = _heldout_similarity(teacher, run.model, held, vocab, n_max)
    _, kl_control = _heldout_similarity(teacher, control.model, held, vocab, n_max)
    elapsed = time.perf_counter() - t0
    ok = decreasing and cos > 0.9 and kl < 0.5 * kl_control and elapsed < 900
    criterion(5, "desk-scale distillation efficacy", ok,
              f"smoothed total {np.round(curve, 4).tolist()}; held-out cos {cos:.3f}; "
              f"KL {kl:.4f} vs control {kl_control:.4f}; {elapsed:.0f}s")
    assert ok


def test_criterion_6_speedup(criterion):
    t0 = time.perf_counter()
    ratio = layer_stack_flops(CAMEMBERT_BASE, 128, 8) / layer_stack_flops(DISTILCAMEMBERT_BASE, 128, 8)
    teacher, student = desk_bench_pair()
    report = bench(teacher, student, seq_len=128, batch=8, iters=10)
    elapsed = time.perf_counter() - t0
    ok = ratio == 2 and report.speedup >= 1.7 and elapsed < 300
    criterion(6, "speedup", ok,
              f"base-pair FLOP ratio {ratio}; desk measured x{report.speedup:.2f} "
              f"(medians {report.teacher_median_s * 1e3:.0f}/{report.student_median_s * 1e3:.0f} ms); "
              f"{elapsed:.0f}s")
    assert ok


def test_criterion_7_metric_oracles(criterion):
    t0 = time.perf_counter()
    f1_err = max(max(abs(s.precision - p), abs(s.recall - r), abs(s.f1 - f))
                 for pred, gold, p, r, f in F1_CASES
                 for s in [token_f1(pred.split(), gold.split())])
    zs_err = max(abs(zero_shot_classify(scores)[k] - v)
                 for scores, expected in ZERO_SHOT_CASES for k, v in expected.items())
    V = 1000
    ppl = mlm_eval(init_zeros(ModelConfig(1, 8, 2, 16, V, 16)), masked_batches(V)).perplexity
    elapsed = time.perf_counter() - t0
    ok = (len(F1_CASES) == 20 and f1_err <= 1e-9 and len(ZERO_SHOT_CASES) == 10 and zs_err <= 1e-6
          and abs(ppl - V) / V <= 1e-3 and elapsed < 10)
    criterion(7, "metric oracles", ok,
              f"F1 max err {f1_err:.1e}; zero-shot max err {zs_err:.1e}; uniform perplexity {ppl:.3f} "
              f"for |W|={V}; {elapsed:.1f}s")
    assert ok


def test_criterion_8_determinism_and_persistence(criterion, tmp_path):
    t0 = time.perf_counter()
    train, _ = split_corpus(load_bundled_corpus())
    train = train[:300]
    vocab = build_vocab(train, 256)
    cfg = ModelConfig(2, 32, 2, 64, len(vocab), 32)
    data = DataConfig(batch_size=8, n_max=32)
    runs = [train_teacher(cfg, train, vocab, 50, 5, data, log_path=tmp_path / f"t{i}.log") for i in range(2)]
    teacher_same = (to_bytes(runs[0].model, runs[0].meta) == to_bytes(runs[1].model, runs[1].meta)
                    and (tmp_path / "t0.log").read_bytes() == (tmp_path / "t1.log").read_bytes())
    students = [distill(runs[0].model, cfg.replace(num_layers=1), train, vocab, 30, seed=5, data=data,
                        log_path=tmp_path / f"s{i}.log") for i in range(2)]
    student_same = (to_bytes(students[0].model, students[0].meta) == to_bytes(students[1].model, students[1].meta)
                    and (tmp_path / "s0.log").read_bytes() == (tmp_path / "s1.log").read_bytes())
    first = to_bytes(runs[0].model, runs[0].meta)
    loaded = from_bytes(first)
    round_trip = to_bytes(loaded.model, loaded.meta) == first
    detected = 0
    rng = np.random.default_rng(0)
    positions = rng.integers(len(first) // 2, len(first) - 8, size=20)
    for pos in positions:
        corrupt = bytearray(first)
        corrupt[pos] ^= 1 << int(rng.integers(8))
        try:
            from_bytes(bytes(corrupt))
        except IntegrityError:
            detected += 1
    elapsed = time.perf_counter() - t0
    ok = teacher_same and student_same and round_trip and detected == len(positions) and elapsed < 120
    criterion(8, "determinism and persistence", ok,
              f"teacher reruns identical {teacher_same}; distill reruns identical {student_same}; "
              f"save-load-save identical {round_trip}; corruptions detected {detected}/{len(positions)}; "
              f"{elapsed:.1f}s")
    assert ok
