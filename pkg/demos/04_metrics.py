# %% [markdown]
# Token-overlap F1 and the zero-shot composition, on tiny inputs you can
# check in your head.

# %%
import math

from encdistill.evaluation import f1_report, token_f1, zero_shot_classify

print(token_f1("a b".split(), "b c".split()))
print(token_f1("a a a".split(), ["a"]))            # multiset: only one "a" is matched

preds = [["le", "chat"], ["un", "chien", "noir"], []]
golds = [["le", "chat", "noir"], ["un", "chien"], []]
print(f1_report(preds, golds).to_text())

# %% [markdown]
# Zero-shot classification turns per-class entailment scores into a
# distribution with a softmax.

# %%
print(zero_shot_classify({"sport": math.log(2), "politique": 0.0}))
print(zero_shot_classify({"positif": 1.2, "négatif": -0.3, "neutre": 0.1}))
