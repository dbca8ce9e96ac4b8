# %% [markdown]
# Desk-scale distillation on the bundled toy-French corpus.
#
# A 4-layer teacher learns masked-word prediction, then a 2-layer student
# starts from teacher layers 0 and 2 and trains on the blended loss
# 0.5·KL + 0.3·(1 − cos) + 0.2·MLM. A student trained from scratch on MLM
# alone is the control.
#
#     python demos/03_distill_desk.py            # quick: 400 / 200 steps
#     python demos/03_distill_desk.py 2000 1000  # the full recipe (~3 min)

# %%
import sys

import numpy as np

from encdistill import autodiff as ad
from encdistill.corpus import build_vocab, make_batches
from encdistill.distill import DistillConfig
from encdistill.encoder import ModelConfig, encode
from encdistill.synthetic import load_bundled_corpus, split_corpus
from encdistill.training import DataConfig, distill, smoothed, train_teacher

teacher_steps, student_steps = (int(a) for a in (sys.argv[1:3] if len(sys.argv) > 2 else (400, 200)))

train, held = split_corpus(load_bundled_corpus())
vocab = build_vocab(train, 512)
print(f"{len(train)} training lines, {len(held)} held out, {len(vocab)} word types")
print("sample:", train[0])

cfg = ModelConfig(num_layers=4, hidden_size=64, num_heads=4, ff_size=128,
                  vocab_size=len(vocab), max_positions=48)
data = DataConfig(batch_size=16, n_max=48)

# %%
teacher = train_teacher(cfg, train, vocab, teacher_steps, seed=0, data=data)
window = max(1, teacher_steps // 5)
print("teacher MLM loss by window:", np.round(smoothed(teacher.totals, window), 3))

# %%
student_cfg = cfg.replace(num_layers=2)
student = distill(teacher.model, student_cfg, train, vocab, student_steps, DistillConfig(), seed=0, data=data)
control = distill(teacher.model, student_cfg, train, vocab, student_steps, DistillConfig(0.0, 0.0, 1.0),
                  seed=0, data=data, student_init="random")
window = max(1, student_steps // 5)
print("student total loss by window:", np.round(smoothed(student.totals, window), 4))

# %% [markdown]
# How close does each student get to the teacher on text it never saw?

# %%
def closeness(model):
    cos, kl = [], []
    for batch in make_batches(held, vocab, 32, 48, seed=123):
        t = encode(teacher.model, batch.token_ids, batch.valid)
        s = encode(model, batch.token_ids, batch.valid)
        cos.append(ad.cosine_sim(s.hidden, t.hidden).data[batch.valid])
        kl.append(ad.kl_div_log(s.log_probs, t.log_probs).data[batch.valid])
    return np.concatenate(cos).mean(), np.concatenate(kl).mean()


for name, run in (("distilled", student), ("control", control)):
    c, k = closeness(run.model)
    print(f"{name:9s}  mean token cosine {c:.3f}   mean KL to teacher {k:.4f}")
