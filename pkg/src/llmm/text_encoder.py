"""Word-level tokenizer, corpus vocabulary and a compact pre-norm transformer
encoder that pools token states into one text embedding."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, ShapeError

PAD, UNK = "[PAD]", "[UNK]"
PAD_ID, UNK_ID = 0, 1
VOCAB_FORMAT = "llmm-vocab 1"

# Decimal literals first so "1.450" survives as one token; then words; then
# any single punctuation character.
_TOKEN_RE = re.compile(r"\d+(?:\.\d+)+|\w+|[^\w\s]")


def split_tokens(text: str) -> list[tuple[str, int, int]]:
    """Lower-cased tokens with their character spans in ``text``."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text.lower())]


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [PAD, UNK]:
            raise ConfigError("vocabulary must start with [PAD], [UNK]")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary has duplicate tokens")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{VOCAB_FORMAT}\n{len(self.tokens)}\n")
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if not lines or lines[0] != VOCAB_FORMAT:
            raise DataError(f"{path}: not a vocabulary file (expected header {VOCAB_FORMAT!r})")
        size = int(lines[1])
        tokens = lines[2:2 + size]
        if len(tokens) != size:
            raise DataError(f"{path}: header says {size} tokens, found {len(tokens)}")
        return cls(tokens)


def build_vocab(corpus: Iterable[str], min_freq: int = 1, max_size: int = 8192) -> Vocab:
    """Most frequent tokens (ties broken lexicographically) after the two reserved ones."""
    if max_size < 2:
        raise ConfigError(f"max_size must be >= 2, got {max_size}")
    counts: Counter[str] = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(tok for tok, _, _ in split_tokens(text))
    if n_docs == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (t for t, c in counts.items() if c >= min_freq and t not in (PAD, UNK)),
        key=lambda t: (-counts[t], t),
    )
    return Vocab([PAD, UNK] + kept[: max_size - 2])


def tokenize(text: str, vocab: Vocab, max_len: int = 256, truncate: str = "end"):
    """Token ids padded to ``max_len`` and the matching boolean content mask."""
    toks = split_tokens(text)
    if len(toks) > max_len:
        toks = toks[:max_len] if truncate == "end" else toks[-max_len:]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    ids[: len(toks)] = [vocab.id(t) for t, _, _ in toks]
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(toks)] = True
    return ids, mask


def tokenize_batch(texts: Sequence[str], vocab: Vocab, max_len: int = 256, truncate: str = "end"):
    """Like :func:`tokenize` but padded only to the longest text of the batch."""
    pieces = []
    for text in texts:
        toks = [vocab.id(t) for t, _, _ in split_tokens(text)]
        if len(toks) > max_len:
            toks = toks[:max_len] if truncate == "end" else toks[-max_len:]
        pieces.append(toks)
    width = max(1, max((len(p) for p in pieces), default=1))
    ids = np.full((len(texts), width), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(texts), width), dtype=bool)
    for i, p in enumerate(pieces):
        ids[i, : len(p)] = p
        mask[i, : len(p)] = True
    return ids, mask


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    max_len: int = 256
    pooling: str = "mean"
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.pooling not in ("mean", "first"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")


def encoder_shapes(cfg: EncoderConfig, prefix: str = "text") -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_model * cfg.ffn_mult
    shapes = {f"{prefix}.tok_emb": (cfg.vocab_size, d), f"{prefix}.pos_emb": (cfg.max_len, d)}
    for i in range(cfg.n_layers):
        p = f"{prefix}.layer{i}"
        shapes.update({
            f"{p}.ln1.gamma": (d,), f"{p}.ln1.beta": (d,),
            f"{p}.wq": (d, d), f"{p}.wk": (d, d), f"{p}.wv": (d, d), f"{p}.wo": (d, d),
            f"{p}.ln2.gamma": (d,), f"{p}.ln2.beta": (d,),
            f"{p}.ffn.w1": (d, f), f"{p}.ffn.b1": (f,),
            f"{p}.ffn.w2": (f, d), f"{p}.ffn.b2": (d,),
        })
    shapes.update({f"{prefix}.ln_f.gamma": (d,), f"{prefix}.ln_f.beta": (d,)})
    return shapes


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "text") -> dict[str, Tensor]:
    params = {}
    for name, shape in encoder_shapes(cfg, prefix).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            arr = np.ones(shape)
        elif leaf in ("beta", "b1", "b2"):
            arr = np.zeros(shape)
        elif leaf in ("tok_emb", "pos_emb"):
            arr = rng.normal(0.0, 0.02, size=shape)
        else:
            arr = rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


def multi_head_attention(x: Tensor, wq, wk, wv, wo, n_heads: int, key_mask=None):
    """Scaled dot-product self-attention over ``x`` of shape (batch, seq, d).

    ``key_mask`` (batch, seq) marks positions that may be attended to; the
    weights on all other positions are exactly 0. Returns the projected
    output and the (batch, heads, seq, seq) weights.
    """
    b, n, d = x.shape
    dk = d // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, n, n_heads, dk)), (0, 2, 1, 3))

    q, k, v = heads(x @ wq), heads(x @ wk), heads(x @ wv)
    scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dk))
    mask = None if key_mask is None else np.asarray(key_mask, bool)[:, None, None, :]
    weights = ad.softmax(scores, axis=-1, mask=mask)
    ctx = ad.reshape(ad.transpose(weights @ v, (0, 2, 1, 3)), (b, n, d))
    return ctx @ wo, weights


def encode_text(ids, mask, params: dict[str, Tensor], cfg: EncoderConfig,
                prefix: str = "text", return_attention: bool = False,
                input_embeddings: Tensor | None = None):
    """Pooled text embedding, shape (batch, d_model) or (d_model,) for 1-D ids.

    ``input_embeddings`` replaces the token-table lookup (same shape as the
    looked-up rows); attribution uses it to take gradients per position.
    """
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    single = ids.ndim == 1
    if single:
        ids, mask = ids[None], mask[None]
    if ids.shape != mask.shape:
        raise ShapeError(f"ids {ids.shape} and mask {mask.shape} differ")
    if ids.shape[1] > cfg.max_len:
        raise ShapeError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if not mask.any(axis=1).all():
        raise DataError("encode_text: input has no non-PAD tokens")
    p = lambda name: params[f"{prefix}.{name}"]  # noqa: E731
    n = ids.shape[1]
    tok = ad.embedding(p("tok_emb"), ids) if input_embeddings is None else input_embeddings
    x = tok + ad.getitem(p("pos_emb"), slice(0, n))
    attention = []
    for i in range(cfg.n_layers):
        L = f"layer{i}"
        h = ad.layer_norm(x, p(f"{L}.ln1.gamma"), p(f"{L}.ln1.beta"), cfg.ln_eps)
        out, w = multi_head_attention(h, p(f"{L}.wq"), p(f"{L}.wk"), p(f"{L}.wv"),
                                      p(f"{L}.wo"), cfg.n_heads, key_mask=mask)
        attention.append(w.data)
        x = x + out
        h = ad.layer_norm(x, p(f"{L}.ln2.gamma"), p(f"{L}.ln2.beta"), cfg.ln_eps)
        h = ad.gelu(h @ p(f"{L}.ffn.w1") + p(f"{L}.ffn.b1"))
        x = x + (h @ p(f"{L}.ffn.w2") + p(f"{L}.ffn.b2"))
    x = ad.layer_norm(x, p("ln_f.gamma"), p("ln_f.beta"), cfg.ln_eps)
    if cfg.pooling == "first":
        pooled = ad.getitem(x, (slice(None), 0))
    else:
        m = mask.astype(np.float64)
        weights = m / m.sum(axis=1, keepdims=True)
        pooled = ad.tsum(x * weights[:, :, None], axis=1)
    if single:
        pooled = ad.reshape(pooled, (cfg.d_model,))
    return (pooled, attention) if return_attention else pooled


# A text embedder maps raw texts to a (batch, d_model) array; it lets a
# frozen external encoder stand in for the trainable one.
TextEmbedder = Callable[[Sequence[str]], np.ndarray]
