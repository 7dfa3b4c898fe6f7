# %% [markdown]
# # Synthetic cohorts and the diabetes label rule
#
# Real EHR data is not available, so `llmm.cohort` generates encounters
# (a short clinical note plus a lab panel) whose binary label comes from the
# panel itself: fasting glucose >= 126 mg/dL or HbA1c >= 6.5 %.

# %%
from collections import Counter

from llmm.cohort import (
    LabPanel,
    SynthConfig,
    assign_binary_label,
    generate_cohort,
    labeled,
    split_cohort,
)

# %% [markdown]
# Both thresholds are inclusive, and a panel without either item is
# unlabeled rather than negative.

# %%
for entries in ({"Glucose AC": "126"}, {"Glucose AC": "125", "HbA1c": "6.4"},
                {"HbA1c": "6.5"}, {"K": "4.1"}):
    print(entries, "->", assign_binary_label(LabPanel(entries)))

# %% [markdown]
# A small cohort. Each patient has its own random stream, so the same seed
# always gives the same records.

# %%
cfg = SynthConfig(n_patients=300, positive_rate=0.2, missingness_rate=0.3, seed=7)
records = generate_cohort(cfg)
print(len(records), "encounters")
print(Counter(r.label_binary for r in records))
print(Counter(r.label_multiclass for r in records))

rec = next(r for r in records if r.label_binary == "positive")
print(rec.record_id)
print(rec.note_text)
print(dict(rec.panel.raw_items()))

# %% [markdown]
# Splits are by patient, so no patient appears on both sides.

# %%
train, test = split_cohort(records, 0.8, seed=7)
print(len(train), len(test))
print({r.patient_id for r in train} & {r.patient_id for r in test})
print(len(labeled(test)), "labeled test encounters")
