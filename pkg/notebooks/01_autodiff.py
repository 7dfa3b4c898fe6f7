# %% [markdown]
# # Reverse-mode autodiff on numpy arrays
#
# Every model in `llmm` is built from the small tensor library in
# `llmm.autodiff`. Operations run eagerly; inside a `Tape` context each
# result is recorded so `backward` can walk the tape in reverse.

# %%
import numpy as np

from llmm import autodiff as ad

# %% [markdown]
# A two-layer computation and its gradients.

# %%
x = ad.Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
w = ad.Tensor([[5.0], [6.0]], requires_grad=True)
with ad.Tape() as tape:
    y = ad.matmul(x, w)            # [[17], [39]]
    loss = ad.tsum(ad.gelu(y * 0.1))
    ad.backward(loss, tape)
print(y.data.ravel(), loss.item())
print(x.grad)
print(w.grad)

# %% [markdown]
# ## Checking against finite differences
#
# A central difference with h = 1e-5 in float64 is accurate to about 1e-10
# on smooth functions, so it makes a good oracle for the backward pass.

# %%
def numeric_grad(f, a, h=1e-5):
    g = np.zeros_like(a)
    for i in np.ndindex(a.shape):
        old = a[i]
        a[i] = old + h
        up = f(a)
        a[i] = old - h
        down = f(a)
        a[i] = old
        g[i] = (up - down) / (2 * h)
    return g


rng = np.random.default_rng(0)
logits = rng.normal(size=(4, 3))
targets = np.array([0, 2, 1, 2])
weights = np.array([0.5, 1.0, 2.0])

t = ad.Tensor(logits, requires_grad=True)
with ad.Tape() as tape:
    ad.backward(ad.cross_entropy(t, targets, weights), tape)

num = numeric_grad(lambda a: ad.cross_entropy(ad.Tensor(a), targets, weights).item(), logits.copy())
print("relative error", np.linalg.norm(t.grad - num) / np.linalg.norm(num))

# %% [markdown]
# Masked softmax puts exact zeros on masked positions, which is how the text
# encoder ignores padding.

# %%
scores = ad.Tensor([[2.0, 1.0, 7.0]])
print(ad.softmax(scores, mask=np.array([[True, True, False]])).data)
