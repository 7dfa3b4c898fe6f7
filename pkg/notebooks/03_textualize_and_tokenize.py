# %% [markdown]
# # Lab panels as text
#
# A text model can read a lab panel once it is written as
# `Name:value` pairs. Values keep the exact recorded string, so `1.450`
# stays `1.450`.

# %%
from llmm.cohort import LabPanel
from llmm.textualize import SerializationSpec, item_spans, parse_panel_text, serialize_panel
from llmm.text_encoder import build_vocab, split_tokens, tokenize

panel = LabPanel([("Free T4", "1.42"), ("TSH", "1.450"), ("HDL Cholesterol", "57"),
                  ("Glucose AC", "148")])
text = serialize_panel(panel)
print(text)
print(parse_panel_text(text))
print(item_spans(panel))
print(serialize_panel(panel, SerializationSpec(item_order="alphabetical")))

# %% [markdown]
# The tokenizer keeps decimals whole and splits punctuation off names.

# %%
print([t for t, _, _ in split_tokens(text)])
vocab = build_vocab([text, "Patient seen for follow-up."])
ids, mask = tokenize(text, vocab, max_len=24)
print(len(vocab), ids, mask.sum())
