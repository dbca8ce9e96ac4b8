# %% [markdown]
# Halving the depth halves the layer-stack FLOPs exactly. Wall time on one
# core gets close to ×2; embeddings and the output projection are shared
# overhead that does not shrink.

# %%
from encdistill.encoder import CAMEMBERT_BASE, DISTILCAMEMBERT_BASE
from encdistill.evaluation import bench, desk_bench_pair, layer_stack_flops

t, s = layer_stack_flops(CAMEMBERT_BASE, 128, 8), layer_stack_flops(DISTILCAMEMBERT_BASE, 128, 8)
print(f"base pair, seq 128 batch 8: {t / 1e9:.1f} vs {s / 1e9:.1f} GFLOP, ratio {t / s}")

# %%
teacher, student = desk_bench_pair()
report = bench(teacher, student, seq_len=128, batch=8, iters=10)
print(report.to_text())
