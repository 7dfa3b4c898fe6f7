"""Attention fusion of text and lab embeddings, the MLP head, and the model
object that routes records through the encoders for each input mode.

Modes:

``fusion``     note text -> text encoder, panel -> lab DNN, fused by attention
``text_only``  note text -> text encoder
``labs_only``  panel -> lab DNN
``labs_text``  serialised panel text -> text encoder
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cohort import CATALOG_ORDER, MULTICLASS_LABELS, EncounterRecord
from .errors import ConfigError, DataError, ShapeError
from .lab_encoder import NormStats, encode_labs, init_lab_encoder, lab_encoder_shapes, vectorize_panels
from .text_encoder import (
    EncoderConfig,
    TextEmbedder,
    Vocab,
    encode_text,
    encoder_shapes,
    init_encoder,
    multi_head_attention,
    tokenize_batch,
)
from .textualize import build_input

MODES = ("fusion", "text_only", "labs_only", "labs_text")
CHECKPOINT_FORMAT = "llmm-checkpoint 1"


@dataclass
class ModelConfig:
    mode: str = "fusion"
    task: str = "binary"
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    max_len: int = 256
    pooling: str = "mean"
    truncate: str = "end"
    lab_hidden: tuple[int, ...] = (256, 128)
    lab_activation: str = "relu"
    head_hidden: int = 128
    fusion_heads: int = 4
    fusion_text_input: str = "notes_only"
    lab_items: tuple[str, ...] = CATALOG_ORDER

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.task not in ("binary", "multiclass"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.d_model % self.n_heads or self.d_model % self.fusion_heads:
            raise ConfigError("d_model must be divisible by n_heads and fusion_heads")
        self.lab_hidden = tuple(self.lab_hidden)
        self.lab_items = tuple(self.lab_items)

    @property
    def n_classes(self) -> int:
        return 2 if self.task == "binary" else len(MULTICLASS_LABELS)

    @property
    def uses_text(self) -> bool:
        return self.mode in ("fusion", "text_only", "labs_text")

    @property
    def uses_labs(self) -> bool:
        return self.mode in ("fusion", "labs_only")

    @property
    def text_input(self) -> str:
        if self.mode == "labs_text":
            return "labs_text_only"
        if self.mode == "text_only":
            return "notes_only"
        return self.fusion_text_input

    @property
    def head_width(self) -> int:
        return 3 * self.d_model if self.mode == "fusion" else self.d_model

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(vocab_size, self.d_model, self.n_heads, self.n_layers,
                             self.ffn_mult, self.max_len, self.pooling)


def fusion_shapes(d_model: int, head_width: int, head_hidden: int, n_classes: int,
                  with_attention: bool) -> dict[str, tuple[int, ...]]:
    shapes = {}
    if with_attention:
        shapes.update({f"fuse.{w}": (d_model, d_model) for w in ("wq", "wk", "wv", "wo")})
    shapes.update({
        "head.w1": (head_width, head_hidden), "head.b1": (head_hidden,),
        "head.w2": (head_hidden, n_classes), "head.b2": (n_classes,),
    })
    return shapes


def fuse(text_emb, lab_emb, params: dict[str, Tensor], n_heads: int = 4):
    """Self-attention over the two-token sequence [text, lab].

    The two attended positions are averaged into an attention summary ``a``
    and the result is ``[a || text || lab]``. Accepts single vectors or
    (batch, d) arrays; returns ``(fused, weights)`` with weights shaped
    (batch, heads, 2, 2).
    """
    text_emb, lab_emb = ad.as_tensor(text_emb), ad.as_tensor(lab_emb)
    if text_emb.shape != lab_emb.shape:
        raise ShapeError(f"fuse: text {text_emb.shape} and lab {lab_emb.shape} embeddings differ")
    single = text_emb.ndim == 1
    if single:
        text_emb = ad.reshape(text_emb, (1,) + text_emb.shape)
        lab_emb = ad.reshape(lab_emb, (1,) + lab_emb.shape)
    d = text_emb.shape[1]
    if params["fuse.wq"].shape != (d, d):
        raise ShapeError(f"fuse: embeddings of width {d} vs projections {params['fuse.wq'].shape}")
    seq = ad.stack([text_emb, lab_emb], axis=1)
    out, weights = multi_head_attention(seq, params["fuse.wq"], params["fuse.wk"],
                                        params["fuse.wv"], params["fuse.wo"], n_heads)
    summary = ad.mean(out, axis=1)
    fused = ad.concat([summary, text_emb, lab_emb], axis=1)
    if single:
        fused = ad.reshape(fused, (fused.shape[1],))
        weights = ad.reshape(weights, weights.shape[1:])
    return fused, weights


def classify(fused, params: dict[str, Tensor]) -> Tensor:
    """ReLU hidden layer then linear logits."""
    fused = ad.as_tensor(fused)
    width = params["head.w1"].shape[0]
    if fused.shape[-1] != width:
        raise ShapeError(f"classify: feature width {fused.shape[-1]} but head expects {width}")
    single = fused.ndim == 1
    if single:
        fused = ad.reshape(fused, (1, width))
    h = ad.relu(fused @ params["head.w1"] + params["head.b1"])
    logits = h @ params["head.w2"] + params["head.b2"]
    return ad.reshape(logits, (logits.shape[1],)) if single else logits


@dataclass
class Batch:
    ids: np.ndarray | None = None
    mask: np.ndarray | None = None
    lab_values: np.ndarray | None = None
    lab_mask: np.ndarray | None = None
    texts: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        for a in (self.ids, self.lab_values):
            if a is not None:
                return a.shape[0]
        return len(self.texts)

    def take(self, index) -> "Batch":
        """Rows ``index``, with token columns trimmed to the longest kept sequence."""
        ids = mask = None
        if self.ids is not None:
            ids, mask = self.ids[index], self.mask[index]
            width = max(1, int(mask.sum(axis=1).max())) if len(ids) else 1
            ids, mask = ids[:, :width], mask[:, :width]
        lv = None if self.lab_values is None else self.lab_values[index]
        lm = None if self.lab_mask is None else self.lab_mask[index]
        texts = [self.texts[i] for i in np.arange(len(self.texts))[index]] if self.texts else []
        return Batch(ids, mask, lv, lm, texts)


def _write_npz(path, arrays: dict[str, np.ndarray]) -> None:
    """An ``.npz`` readable by ``np.load`` whose bytes depend only on the arrays
    (``np.savez`` stamps the current time into each member)."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


class FusionModel:
    """Named parameter store plus the vocabulary and normalisation it was trained with."""

    def __init__(self, config: ModelConfig, vocab: Vocab | None, norm_stats: NormStats | None,
                 params: dict[str, Tensor] | None = None, seed: int = 0,
                 text_embedder: TextEmbedder | None = None):
        self.config = config
        self.vocab = vocab
        self.norm_stats = norm_stats
        self.text_embedder = text_embedder
        if config.uses_text and vocab is None and text_embedder is None:
            raise ConfigError(f"mode {config.mode!r} needs a vocabulary or a text embedder")
        if config.uses_labs and norm_stats is None:
            raise ConfigError(f"mode {config.mode!r} needs lab normalisation statistics")
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self._check_shapes()

    # construction

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.config
        shapes = {}
        if c.uses_text and self.text_embedder is None:
            shapes.update(encoder_shapes(c.encoder_config(len(self.vocab))))
        if c.uses_labs:
            shapes.update(lab_encoder_shapes(len(c.lab_items), c.lab_hidden, c.d_model))
        shapes.update(fusion_shapes(c.d_model, c.head_width, c.head_hidden, c.n_classes,
                                    with_attention=c.mode == "fusion"))
        return shapes

    def _init_params(self, rng: np.random.Generator) -> dict[str, Tensor]:
        c = self.config
        params = {}
        if c.uses_text and self.text_embedder is None:
            params.update(init_encoder(c.encoder_config(len(self.vocab)), rng))
        if c.uses_labs:
            params.update(init_lab_encoder(len(c.lab_items), c.lab_hidden, c.d_model, rng))
        for name, shape in fusion_shapes(c.d_model, c.head_width, c.head_hidden, c.n_classes,
                                         c.mode == "fusion").items():
            if len(shape) == 2:
                arr = rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)
            else:
                arr = np.zeros(shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return params

    def _check_shapes(self) -> None:
        expected = self.expected_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter names differ: missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, "
                                 f"expected {shape}")

    # forward

    def text_for(self, record: EncounterRecord) -> str:
        return build_input(record, self.config.text_input)

    def prepare(self, records: Sequence[EncounterRecord]) -> Batch:
        """Tokenise / vectorise records once; errors if a record lacks a required input."""
        c = self.config
        batch = Batch()
        if c.uses_text:
            batch.texts = [self.text_for(r) for r in records]
            if self.text_embedder is None:
                batch.ids, batch.mask = tokenize_batch(batch.texts, self.vocab, c.max_len, c.truncate)
                empty = np.flatnonzero(~batch.mask.any(axis=1))
                if empty.size:
                    raise DataError(f"record {records[empty[0]].record_id} has no text tokens")
        if c.uses_labs:
            for r in records:
                if len(r.panel) == 0:
                    raise DataError(f"record {r.record_id} has no lab values")
            batch.lab_values, batch.lab_mask = vectorize_panels([r.panel for r in records],
                                                                self.norm_stats)
        return batch

    def text_embedding(self, batch: Batch) -> Tensor:
        if self.text_embedder is not None:
            emb = np.asarray(self.text_embedder(batch.texts), dtype=np.float64)
            if emb.shape != (len(batch.texts), self.config.d_model):
                raise ShapeError(f"text embedder returned {emb.shape}, expected "
                                 f"({len(batch.texts)}, {self.config.d_model})")
            return Tensor(emb)
        cfg = self.config.encoder_config(len(self.vocab))
        return encode_text(batch.ids, batch.mask, self.params, cfg)

    def lab_embedding(self, batch: Batch) -> Tensor:
        return encode_labs(batch.lab_values, batch.lab_mask, self.params,
                           activation=self.config.lab_activation)

    def features(self, batch: Batch, text_emb: Tensor | None = None,
                 lab_emb: Tensor | None = None):
        """Head input and fusion attention weights (None outside fusion mode)."""
        mode = self.config.mode
        if mode in ("text_only", "labs_text"):
            return (text_emb if text_emb is not None else self.text_embedding(batch)), None
        if mode == "labs_only":
            return (lab_emb if lab_emb is not None else self.lab_embedding(batch)), None
        t = text_emb if text_emb is not None else self.text_embedding(batch)
        lab = lab_emb if lab_emb is not None else self.lab_embedding(batch)
        return fuse(t, lab, self.params, self.config.fusion_heads)

    def logits(self, batch: Batch, **embeddings) -> Tensor:
        feats, _ = self.features(batch, **embeddings)
        return classify(feats, self.params)

    def predict_proba(self, records_or_batch, batch_size: int = 256) -> np.ndarray:
        batch = records_or_batch if isinstance(records_or_batch, Batch) else self.prepare(records_or_batch)
        out = []
        for start in range(0, len(batch), batch_size):
            part = batch.take(slice(start, start + batch_size))
            out.append(ad.softmax(self.logits(part), axis=-1).data)
        if not out:
            return np.zeros((0, self.config.n_classes))
        return np.concatenate(out, axis=0)

    def forward(self, record: EncounterRecord) -> np.ndarray:
        return self.predict_proba([record])[0]

    def attention_weights(self, records) -> np.ndarray:
        """Raw fusion attention weights (batch, heads, 2, 2); fusion mode only."""
        if self.config.mode != "fusion":
            raise ConfigError("attention weights exist only in fusion mode")
        _, w = self.features(self.prepare(records))
        return w.data

    # parameters and persistence

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def set_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            self.params[k].data = arr

    def save(self, path) -> None:
        c = self.config
        meta = {
            "format": CHECKPOINT_FORMAT,
            "config": {**asdict(c), "lab_hidden": list(c.lab_hidden), "lab_items": list(c.lab_items)},
            "vocab_sha256": self.vocab.digest() if self.vocab is not None else None,
            "vocab": self.vocab.tokens if self.vocab is not None else None,
            "norm_stats": self.norm_stats.to_json() if self.norm_stats is not None else None,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }
        arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), np.uint8)}
        arrays.update({f"param:{k}": v.data for k, v in sorted(self.params.items())})
        _write_npz(path, arrays)

    @classmethod
    def load(cls, path) -> "FusionModel":
        with np.load(path, allow_pickle=False) as npz:
            if "__meta__" not in npz:
                raise DataError(f"{path}: not a model checkpoint")
            meta = json.loads(npz["__meta__"].tobytes().decode())
            arrays = {k[len("param:"):]: npz[k] for k in npz.files if k.startswith("param:")}
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        cfg = dict(meta["config"])
        config = ModelConfig(**cfg)
        vocab = Vocab(meta["vocab"]) if meta["vocab"] is not None else None
        if vocab is not None and vocab.digest() != meta["vocab_sha256"]:
            raise DataError(f"{path}: vocabulary hash mismatch")
        stats = NormStats.from_json(meta["norm_stats"]) if meta["norm_stats"] is not None else None
        for name, shape in meta["shapes"].items():
            if name not in arrays or list(arrays[name].shape) != list(shape):
                raise ShapeError(f"{path}: parameter {name!r} does not match recorded shape {shape}")
        params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
        return cls(config, vocab, stats, params)
