# %% [markdown]
# Where do the 110M and 67.5M parameters of the base encoder and its
# 6-layer student go? Count them by formula, then by instantiating a model.

# %%
import math

from encdistill.encoder import (CAMEMBERT_BASE, DISTILCAMEMBERT_BASE, audit_param_count,
                                init_zeros, param_count, parameter_shapes)

for cfg in (CAMEMBERT_BASE, DISTILCAMEMBERT_BASE):
    audit = audit_param_count(init_zeros(cfg))
    print(f"L={cfg.num_layers:2d}  formula {param_count(cfg):>12,}  audited {audit['counted']:>12,}"
          f"  (+{audit['lm_head_extra']:,} output bias)")

# %% [markdown]
# One layer holds 4d² + 2dE + 9d + E scalars: four attention projections,
# the two feed-forward matrices, their biases and two norms. The student
# drops six layers (about 42.5M) and keeps every embedding.

# %%
shapes = parameter_shapes(CAMEMBERT_BASE)
per_layer = sum(math.prod(s) for n, s in shapes.items() if n.startswith("layers.0."))
embeddings = sum(math.prod(shapes[n]) for n in ("word_embedding", "positional_embedding"))
print(f"one layer      {per_layer:>12,}")
print(f"embeddings     {embeddings:>12,}")
print(f"difference     {param_count(CAMEMBERT_BASE) - param_count(DISTILCAMEMBERT_BASE):>12,}  (= 6 layers)")
