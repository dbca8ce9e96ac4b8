# %% [markdown]
# The tape records every primitive; `backward` walks it in reverse.
# Here we compare its gradients against central finite differences.

# %%
import numpy as np

from encdistill import autodiff as ad
from encdistill.encoder import ModelConfig, encode, init_random
from encdistill.gradcheck import check_gradients

x = ad.parameter([1.0, 2.0, 3.0])
with ad.Tape() as tape:
    y = ad.sum(ad.mul(x, x))
ad.backward(tape, y)
print("d/dx sum(x*x) =", x.grad)

# %% [markdown]
# A composite: layer norm followed by a column softmax.

# %%
rng = np.random.default_rng(0)
h = ad.parameter(rng.normal(size=(5, 3)), name="h")
gain, bias = ad.parameter(np.ones(5), name="gain"), ad.parameter(np.zeros(5), name="bias")
w = ad.tensor(rng.normal(size=(5, 3)))
report = check_gradients(lambda: ad.sum(ad.mul(ad.softmax_columns(ad.layer_norm(h, gain, bias)), w)),
                         [h, gain, bias])
print(f"composite: {report.checked} entries, max relative error {report.max_rel_error:.2e}")

# %% [markdown]
# The whole encoder, two layers wide enough to be interesting and small
# enough that perturbing all 1,443 weights one at a time stays quick.

# %%
cfg = ModelConfig(num_layers=2, hidden_size=8, num_heads=2, ff_size=16, vocab_size=11, max_positions=16)
model = init_random(cfg, 0)
for _, t in model.named_parameters():
    t.data = (t.data + rng.normal(scale=0.3, size=t.shape)).astype(np.float32)
ids = rng.integers(0, 11, size=(2, 5))
targets = rng.integers(0, 11, size=(2, 5))
report = check_gradients(lambda: ad.cross_entropy(targets, encode(model, ids).log_probs),
                         model.parameters(), rtol=1e-3)
print(f"encoder: {report.checked} weights, max relative error {report.max_rel_error:.2e}, ok={report.ok}")
