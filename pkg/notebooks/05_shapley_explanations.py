# %% [markdown]
# # Shapley explanations
#
# `shapley_exact` enumerates all coalitions, `shapley_sampled` averages
# marginal gains over random feature orderings. `explain_record` plugs a
# model in as the value function, ablating lab items (value 0, mask 0) or
# tokens (replaced by `[UNK]`).

# %%
import numpy as np

from llmm.attribution import explain_record, render_terminal, shapley_exact, shapley_sampled
from llmm.cohort import SynthConfig, generate_cohort, labeled, split_cohort
from llmm.train import TrainConfig, train

# %% [markdown]
# A three-player game with an interaction between players 0 and 1.

# %%
def game(m):
    return 1.0 * m[0] + 2.0 * m[1] + 3.0 * (m[0] and m[1]) + 0.5 * m[2]


phi = shapley_exact(game, 3)
print(phi, phi.sum(), game(np.ones(3, bool)) - game(np.zeros(3, bool)))
est, se = shapley_sampled(game, 3, n_samples=500, seed=0)
print(est, se)

# %% [markdown]
# Explaining a small trained model.

# %%
cohort = generate_cohort(SynthConfig(n_patients=300, positive_rate=0.3, seed=5,
                                     missingness_rate=0.3))
tr, te = split_cohort(cohort, 0.8, seed=5)
small = dict(d_model=16, n_heads=2, n_layers=1, max_len=96, lab_hidden=(32, 16),
             head_hidden=16, fusion_heads=2)
model = train(tr, None, TrainConfig(mode="fusion", epochs=3, lr=3e-3, seed=5, model=small)).model

rec = next(r for r in labeled(te) if r.label_binary == "positive")
report = explain_record(model, rec, "lab_item", exact_limit=14)
print(report.method, round(report.base_value, 4), round(report.full_value, 4))
for f in report.features[:5]:
    print(f"{f.name:22s} {f.value:+.4f}")
print("efficiency gap", report.efficiency_gap())
print(render_terminal(report))

# %% [markdown]
# Token attributions on the note. Past the exact limit the tokens are
# prescreened by |gradient x input| and the rest stay present.

# %%
tok = explain_record(model, rec, "token", method="sampled", n_samples=50, prescreen_k=8)
print(tok.prescreen)
print([(f.name, round(f.value, 6)) for f in tok.features])
