"""Shapley-value explanations of model predictions over lab items or tokens.

A feature outside the coalition is ablated, not deleted: lab items get value
0 and mask 0, tokens are replaced by ``[UNK]`` with their position kept, so
sequence length and positional embeddings never change.
"""

from __future__ import annotations

import html
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .cohort import EncounterRecord
from .errors import ConfigError
from .fusion import Batch, FusionModel, classify
from .text_encoder import UNK_ID, encode_text, split_tokens
from .textualize import item_spans, serialize_panel

EXACT_LIMIT = 12
PRESCREEN_K = 32


def _coalition_masks(n: int) -> np.ndarray:
    codes = np.arange(2**n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def _evaluate(value_fn, masks: np.ndarray, batched: bool) -> np.ndarray:
    if batched:
        return np.asarray(value_fn(masks), dtype=np.float64).reshape(-1)
    return np.array([float(value_fn(m)) for m in masks])


def shapley_exact(value_fn: Callable, n_features: int, *, exact_limit: int = EXACT_LIMIT,
                  batched: bool = False) -> np.ndarray:
    """Shapley values by enumerating all ``2**n`` coalitions.

    ``value_fn`` takes a boolean membership vector of length ``n_features``
    (or, with ``batched=True``, a (m, n_features) matrix and returns m values).
    """
    if n_features > exact_limit:
        raise ConfigError(
            f"{n_features} features exceed the exact limit of {exact_limit} "
            f"(2**{n_features} evaluations); use shapley_sampled instead")
    if n_features == 0:
        return np.zeros(0)
    n = n_features
    masks = _coalition_masks(n)
    values = _evaluate(value_fn, masks, batched)
    sizes = masks.sum(axis=1)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n)
                       for s in range(n)])
    codes = np.arange(2**n)
    phi = np.zeros(n)
    for i in range(n):
        without = codes[(codes >> i) & 1 == 0]
        phi[i] = np.sum(weight[sizes[without]] * (values[without | (1 << i)] - values[without]))
    return phi


def shapley_sampled(value_fn: Callable, n_features: int, n_samples: int = 200, seed: int = 0,
                    *, batched: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Permutation-sampling Shapley estimates and their standard errors.

    Each sampled ordering contributes marginal gains that telescope to
    ``v(N) - v(empty)``, so every per-sample estimate is efficient.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be >= 1")
    n = n_features
    if n == 0:
        return np.zeros(0), np.zeros(0)
    rng = np.random.default_rng(seed)
    perms = np.stack([rng.permutation(n) for _ in range(n_samples)])
    # prefix coalitions: row j of each block holds the first j features of the ordering
    masks = np.zeros((n_samples, n + 1, n), dtype=bool)
    for j in range(1, n + 1):
        masks[:, j] = masks[:, j - 1]
        masks[np.arange(n_samples), j, perms[:, j - 1]] = True
    values = _evaluate(value_fn, masks.reshape(-1, n), batched).reshape(n_samples, n + 1)
    gains = np.diff(values, axis=1)
    contrib = np.zeros((n_samples, n))
    np.put_along_axis(contrib, perms, gains, axis=1)
    phi = contrib.mean(axis=0)
    se = contrib.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else np.zeros(n)
    return phi, se


@dataclass
class Feature:
    name: str
    value: float
    span: tuple[int, int] | None = None
    standard_error: float | None = None


@dataclass
class AttributionReport:
    record_id: str
    granularity: str
    features: list[Feature]
    base_value: float
    full_value: float
    method: dict
    text: str = ""
    target_class: int = 1
    mode: str = ""
    prescreen: dict | None = None

    def efficiency_gap(self) -> float:
        return sum(f.value for f in self.features) - (self.full_value - self.base_value)

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, obj) -> "AttributionReport":
        feats = [Feature(f["name"], f["value"], tuple(f["span"]) if f["span"] else None,
                         f.get("standard_error")) for f in obj["features"]]
        return cls(**{**obj, "features": feats})


class _ValueFunction:
    """Class probability of one record under feature ablation, batched over coalitions."""

    def __init__(self, model: FusionModel, batch: Batch, target_class: int, chunk: int = 2048):
        self.model = model
        self.batch = batch
        self.target = target_class
        self.chunk = chunk

    def probs(self, text_emb=None, lab_emb=None, batch=None) -> np.ndarray:
        logits = self.model.logits(batch if batch is not None else self.batch,
                                   text_emb=text_emb, lab_emb=lab_emb)
        return ad.softmax(logits, axis=-1).data[:, self.target]


class _LabItemGame(_ValueFunction):
    def __init__(self, model, batch, target_class, columns):
        super().__init__(model, batch, target_class)
        self.columns = np.asarray(columns, dtype=np.int64)
        self.text_emb = model.text_embedding(batch).data if model.config.uses_text else None

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, masks.shape[0], self.chunk):
            m = masks[start:start + self.chunk]
            keep = np.ones((m.shape[0], self.batch.lab_values.shape[1]))
            keep[:, self.columns] = m
            values = self.batch.lab_values * keep
            lmask = self.batch.lab_mask * keep
            lab = self.model.lab_embedding(Batch(lab_values=values, lab_mask=lmask))
            text = None
            if self.text_emb is not None:
                text = ad.Tensor(np.repeat(self.text_emb, m.shape[0], axis=0))
            out.append(self.probs(text_emb=text, lab_emb=lab))
        return np.concatenate(out)


class _TokenGame(_ValueFunction):
    def __init__(self, model, batch, target_class, positions):
        super().__init__(model, batch, target_class, chunk=512)
        self.positions = np.asarray(positions, dtype=np.int64)
        self.lab_emb = model.lab_embedding(batch).data if model.config.uses_labs else None

    def __call__(self, masks: np.ndarray) -> np.ndarray:
        out = []
        for start in range(0, masks.shape[0], self.chunk):
            m = masks[start:start + self.chunk]
            ids = np.repeat(self.batch.ids, m.shape[0], axis=0)
            cols = ids[:, self.positions]
            ids[:, self.positions] = np.where(m, cols, UNK_ID)
            tmask = np.repeat(self.batch.mask, m.shape[0], axis=0)
            b = Batch(ids=ids, mask=tmask)
            lab = None
            if self.lab_emb is not None:
                lab = ad.Tensor(np.repeat(self.lab_emb, m.shape[0], axis=0))
            out.append(self.probs(text_emb=self.model.text_embedding(b), lab_emb=lab, batch=b))
        return np.concatenate(out)


def _token_saliency(model: FusionModel, batch: Batch, target_class: int) -> np.ndarray:
    """|gradient x input| per token position of the target-class probability."""
    cfg = model.config.encoder_config(len(model.vocab))
    table = model.params["text.tok_emb"].data
    emb = ad.Tensor(table[batch.ids], requires_grad=True)
    lab = model.lab_embedding(batch) if model.config.uses_labs else None
    with ad.Tape() as tape:
        text = encode_text(batch.ids, batch.mask, model.params, cfg, input_embeddings=emb)
        feats, _ = model.features(batch, text_emb=text, lab_emb=lab)
        prob = ad.getitem(ad.softmax(classify(feats, model.params), axis=-1), (0, target_class))
        ad.backward(prob, tape)
    return np.abs((emb.grad * emb.data).sum(axis=-1))[0]


def _kept_tokens(text, batch, cfg):
    """Tokens of ``text`` that survived truncation, with their character spans."""
    tokens = split_tokens(text)
    width = batch.ids.shape[1]
    return tokens[:width] if cfg.truncate == "end" else tokens[-width:] if len(tokens) > width else tokens


def _run_game(game, n, method, exact_limit, n_samples, seed):
    if method == "auto":
        method = "exact" if n <= exact_limit else "sampled"
    if method == "exact":
        return shapley_exact(game, n, exact_limit=exact_limit, batched=True), None, {"name": "exact"}
    if method == "sampled":
        phi, se = shapley_sampled(game, n, n_samples, seed, batched=True)
        return phi, se, {"name": "sampled", "n_samples": n_samples, "seed": seed}
    raise ConfigError(f"unknown Shapley method {method!r}")


def explain_record(model: FusionModel, record: EncounterRecord, granularity: str = "lab_item", *,
                   method: str = "auto", exact_limit: int = EXACT_LIMIT, n_samples: int = 200,
                   seed: int = 0, target_class: int | None = None,
                   prescreen_k: int = PRESCREEN_K) -> AttributionReport:
    """Shapley attribution of one record's class probability.

    ``target_class`` defaults to the positive class for binary models and to
    the predicted class otherwise. Lab-item granularity covers the panel items
    the model reads; token granularity covers the encoder's input tokens and,
    past ``exact_limit`` tokens, only the ``prescreen_k`` tokens with the
    largest |gradient x input| (the rest stay present throughout).
    """
    cfg = model.config
    batch = model.prepare([record])
    full_probs = model.predict_proba(batch)[0]
    if target_class is None:
        target_class = 1 if cfg.task == "binary" else int(np.argmax(full_probs))
    prescreen = None

    if granularity == "lab_item":
        if cfg.uses_labs:
            col = {n: i for i, n in enumerate(model.norm_stats.items)}
            names = [n for n in record.panel if n in col and np.isfinite(record.panel[n].value)]
            game = _LabItemGame(model, batch, target_class, [col[n] for n in names])
            text = serialize_panel(record.panel)
            spans = item_spans(record.panel)
        elif cfg.mode == "labs_text" and model.text_embedder is None:
            text = model.text_for(record)
            tokens = _kept_tokens(text, batch, cfg)
            spans = item_spans(record.panel)
            names = list(record.panel)
            groups = [[j for j, (_, s, e) in enumerate(tokens) if spans[n][0] <= s and e <= spans[n][1]]
                      for n in names]
            token_game = _TokenGame(model, batch, target_class, np.arange(len(tokens)))

            def game(masks):
                expanded = np.ones((masks.shape[0], len(tokens)), dtype=bool)
                for k, pos in enumerate(groups):
                    expanded[:, pos] = masks[:, [k]]
                return token_game(expanded)
        else:
            raise ConfigError(f"lab_item attributions are not available in mode {cfg.mode!r}")
        features_meta = [(n, spans[n]) for n in names]
    elif granularity == "token":
        if not cfg.uses_text:
            raise ConfigError(f"token attributions are not available in mode {cfg.mode!r}")
        if model.text_embedder is not None:
            raise ConfigError("token attributions need the built-in text encoder")
        text = model.text_for(record)
        tokens = _kept_tokens(text, batch, cfg)
        positions = np.arange(len(tokens))
        if len(tokens) > exact_limit:
            sal = _token_saliency(model, batch, target_class)[: len(tokens)]
            order = sorted(range(len(tokens)), key=lambda j: (-sal[j], j))
            positions = np.array(sorted(order[:prescreen_k]))
            prescreen = {"criterion": "abs_grad_x_input", "k": prescreen_k,
                         "n_tokens": len(tokens), "selected": positions.tolist()}
        game = _TokenGame(model, batch, target_class, positions)
        features_meta = [(text[tokens[j][1]:tokens[j][2]], (tokens[j][1], tokens[j][2]))
                         for j in positions]
    else:
        raise ConfigError(f"unknown granularity {granularity!r}")

    n = len(features_meta)
    phi, se, meta = _run_game(game, n, method, exact_limit, n_samples, seed)
    ends = game(np.array([np.zeros(n, bool), np.ones(n, bool)]))
    feats = [Feature(name, float(phi[k]), tuple(span),
                     None if se is None else float(se[k]))
             for k, (name, span) in enumerate(features_meta)]
    feats.sort(key=lambda f: -abs(f.value))
    return AttributionReport(
        record_id=record.record_id, granularity=granularity, features=feats,
        base_value=float(ends[0]), full_value=float(ends[1]), method=meta, text=text,
        target_class=int(target_class), mode=cfg.mode, prescreen=prescreen,
    )


# rendering

_POS_RGB = (214, 39, 40)
_NEG_RGB = (31, 119, 180)


def _intensity(report: AttributionReport) -> dict[tuple[int, int], tuple[float, float]]:
    top = max((abs(f.value) for f in report.features), default=0.0)
    out = {}
    for f in report.features:
        if f.span is None:
            continue
        alpha = abs(f.value) / top if top > 0 else 0.0
        out[tuple(f.span)] = (f.value, alpha)
    return out


def _segments(report: AttributionReport):
    """Split the report text into (text, value, alpha) runs, highlighting feature spans."""
    marks = sorted(_intensity(report).items())
    pos = 0
    for (start, end), (value, alpha) in marks:
        if start > pos:
            yield report.text[pos:start], 0.0, 0.0
        yield report.text[start:end], value, alpha
        pos = end
    if pos < len(report.text):
        yield report.text[pos:], 0.0, 0.0


def _rgba(value: float, alpha: float) -> str:
    r, g, b = _POS_RGB if value > 0 else _NEG_RGB
    return f"rgba({r},{g},{b},{alpha:.3f})"


def render_html(report: AttributionReport) -> str:
    body = []
    for piece, value, alpha in _segments(report):
        esc = html.escape(piece)
        if alpha == 0.0 and value == 0.0:
            body.append(esc)
        else:
            body.append(f'<span class="feat" style="background:{_rgba(value, alpha)}" '
                        f'title="{value:+.6f}">{esc}</span>')
    method = ", ".join(f"{k}={v}" for k, v in sorted(report.method.items()))
    rows = "\n".join(
        f"<tr><td>{html.escape(f.name)}</td><td>{f.value:+.6f}</td></tr>" for f in report.features)
    return (
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
        f"<title>Attribution {html.escape(report.record_id)}</title>\n"
        "<style>body{font-family:sans-serif;max-width:60em;margin:2em auto}"
        ".text{line-height:2;font-size:1.05em}.feat{padding:0.1em 0.15em;border-radius:3px}"
        "table{border-collapse:collapse}td{padding:0 1em;font-family:monospace}</style>\n"
        "</head>\n<body>\n"
        f"<h1>{html.escape(report.record_id)}</h1>\n"
        f"<p>granularity={html.escape(report.granularity)}; mode={html.escape(report.mode)}; "
        f"class={report.target_class}; method: {html.escape(method)}</p>\n"
        f"<p>base value v(empty)={report.base_value:.6f}; full value v(all)={report.full_value:.6f}</p>\n"
        f"<p class=\"legend\">red raises the class probability, blue lowers it; "
        f"opacity is |value| / max |value|</p>\n"
        f"<div class=\"text\">{''.join(body)}</div>\n"
        f"<table>\n{rows}\n</table>\n</body>\n</html>\n"
    )


def render_terminal(report: AttributionReport) -> str:
    out = [f"{report.record_id} [{report.granularity}] base={report.base_value:.4f} "
           f"full={report.full_value:.4f}"]
    line = []
    for piece, value, alpha in _segments(report):
        if alpha == 0.0:
            line.append(piece)
            continue
        r, g, b = (round(255 + (c - 255) * alpha) for c in (_POS_RGB if value > 0 else _NEG_RGB))
        line.append(f"\x1b[48;2;{r};{g};{b}m{piece}\x1b[0m")
    out.append("".join(line))
    return "\n".join(out) + "\n"


def render_report(report: AttributionReport) -> tuple[str, str]:
    """Standalone HTML document and ANSI terminal rendering."""
    return render_html(report), render_terminal(report)


def write_report(report: AttributionReport, stem) -> tuple[str, str]:
    """Write ``<stem>.json`` and ``<stem>.html``; returns both paths."""
    stem = str(stem)
    with open(stem + ".json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.dumps())
    with open(stem + ".html", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(render_html(report))
    return stem + ".json", stem + ".html"
