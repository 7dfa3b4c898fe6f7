# %% [markdown]
# # Training the four model variants
#
# `fusion` attends over a [text, lab] pair of embeddings, `text_only` and
# `labs_only` use one modality, and `labs_text` feeds the serialized panel
# to the text encoder. The models here are deliberately small so the
# notebook runs in well under a minute; the acceptance suite uses the
# full-size defaults on 2,000 patients.

# %%
import json

from llmm.cohort import SynthConfig, generate_cohort, split_cohort
from llmm.train import TrainConfig, evaluate, train

cohort = generate_cohort(SynthConfig(n_patients=400, positive_rate=0.2, seed=3))
train_val, test = split_cohort(cohort, 0.8, seed=3)
tr, va = split_cohort(train_val, 0.8, seed=4)

small = dict(d_model=16, n_heads=2, n_layers=1, max_len=96, lab_hidden=(32, 16),
             head_hidden=16, fusion_heads=2)

# %%
reports = {}
for mode in ("fusion", "text_only", "labs_only", "labs_text"):
    res = train(tr, va, TrainConfig(mode=mode, epochs=4, lr=3e-3, seed=3, model=small))
    reports[mode] = evaluate(res.model, test).report
    print(mode, [round(h["val_loss"], 4) for h in res.history])

# %%
for mode, rep in reports.items():
    print(f"{mode:10s} auroc={rep.auroc:.3f} auprc={rep.auprc:.3f} f1={rep.f1:.3f}")

# %% [markdown]
# Reports serialize to plain JSON.

# %%
print(json.dumps(reports["fusion"].to_json(), indent=1)[:400])
