"""Shared oracles for the test suite: finite differences and tiny models."""

from __future__ import annotations

import numpy as np

from llmm import autodiff as ad
from llmm.cohort import SynthConfig, generate_cohort
from llmm.fusion import FusionModel, ModelConfig
from llmm.lab_encoder import NormStats
from llmm.text_encoder import build_vocab
from llmm.textualize import build_input

H = 1e-5
TOL = 1e-4

TINY = dict(d_model=8, n_heads=2, n_layers=1, ffn_mult=2, max_len=64, lab_hidden=(8, 6),
            head_hidden=5, fusion_heads=2)


def analytic_grads(f, arrays):
    leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = f(*leaves)
        ad.backward(out, tape)
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def numeric_grads(f, arrays, h=H, coords=None):
    """Central differences of the scalar ``f`` for every element of every input.

    ``coords`` optionally lists, per input, the flat indices to probe; the
    other entries are left at 0 and should be masked out before comparing.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        for i in (range(flat.size) if coords is None else coords[k]):
            old = flat[i]
            flat[i] = old + h
            up = f(*[ad.Tensor(x) for x in arrays]).item()
            flat[i] = old - h
            down = f(*[ad.Tensor(x) for x in arrays]).item()
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b) -> float:
    a = np.concatenate([x.reshape(-1) for x in a])
    b = np.concatenate([x.reshape(-1) for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def grad_check(f, arrays, h=H, max_coords=None, rng=None) -> float:
    """Relative error between backward gradients and central differences.

    With ``max_coords``, at most that many randomly chosen entries of each
    input are probed (and compared).
    """
    analytic = analytic_grads(f, arrays)
    if max_coords is None:
        return rel_error(analytic, numeric_grads(f, arrays, h))
    rng = rng if rng is not None else np.random.default_rng(0)
    coords = [np.sort(rng.choice(a.size, size=min(a.size, max_coords), replace=False))
              for a in arrays]
    numeric = numeric_grads(f, arrays, h, coords)
    return rel_error([g.reshape(-1)[c] for g, c in zip(analytic, coords)],
                     [g.reshape(-1)[c] for g, c in zip(numeric, coords)])


def projected(fn, weights):
    """Scalar ``sum(fn(...) * weights)`` so a vector-valued op can be checked."""
    def f(*xs):
        return ad.tsum(fn(*xs) * weights)
    return f


def small_cohort(n=80, seed=3, **kw):
    return generate_cohort(SynthConfig(n_patients=n, seed=seed, **kw))


def tiny_model(records, mode="fusion", task="binary", seed=0, **overrides):
    cfg = ModelConfig(mode=mode, task=task, **{**TINY, **overrides})
    vocab = build_vocab(build_input(r, cfg.text_input) for r in records) if cfg.uses_text else None
    stats = NormStats.fit((r.panel for r in records), cfg.lab_items) if cfg.uses_labs else None
    return FusionModel(cfg, vocab, stats, seed=seed)
