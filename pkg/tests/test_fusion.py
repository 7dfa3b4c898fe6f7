import json
import math
import zipfile

import numpy as np
import pytest

from llmm import autodiff as ad
from llmm.autodiff import Tensor
from llmm.cohort import EncounterRecord, LabPanel, labeled
from llmm.errors import ConfigError, DataError, ShapeError
from llmm.fusion import FusionModel, ModelConfig, classify, fuse, fusion_shapes

from helpers import TOL, grad_check, small_cohort, tiny_model


def _fuse_params(d, seed=0):
    rng = np.random.default_rng(seed)
    return {f"fuse.{w}": Tensor(rng.normal(size=(d, d))) for w in ("wq", "wk", "wv", "wo")}


def test_identical_embeddings_give_value_projection():
    d = 4
    params = _fuse_params(d, 1)
    x = np.random.default_rng(2).normal(size=d)
    fused, _ = fuse(x, x, params, n_heads=2)
    expected = x @ params["fuse.wv"].data @ params["fuse.wo"].data
    assert np.allclose(fused.data[:d], expected, atol=1e-12)
    assert np.array_equal(fused.data[d:2 * d], x) and np.array_equal(fused.data[2 * d:], x)


def test_hand_computed_one_head_attention():
    params = {"fuse.wq": Tensor([[1.0, 0.0], [0.0, 2.0]]), "fuse.wk": Tensor([[1.0, 1.0], [0.0, 1.0]]),
              "fuse.wv": Tensor([[1.0, -1.0], [2.0, 0.0]]), "fuse.wo": Tensor([[0.5, 0.0], [1.0, 1.0]])}
    t, lab = [1.0, 0.5], [-1.0, 2.0]
    # q = x Wq, k = x Wk, v = x Wv, row-vector convention
    q = [[1.0, 1.0], [-1.0, 4.0]]
    k = [[1.0, 1.5], [-1.0, 1.0]]
    v = [[2.0, -1.0], [3.0, 1.0]]
    attended = []
    weights = []
    for i in range(2):
        s = [(q[i][0] * k[j][0] + q[i][1] * k[j][1]) / math.sqrt(2) for j in range(2)]
        e = [math.exp(x) for x in s]
        a = [x / sum(e) for x in e]
        weights.append(a)
        ctx = [a[0] * v[0][c] + a[1] * v[1][c] for c in range(2)]
        attended.append([ctx[0] * 0.5 + ctx[1] * 1.0, ctx[0] * 0.0 + ctx[1] * 1.0])
    summary = [(attended[0][c] + attended[1][c]) / 2 for c in range(2)]
    fused, w = fuse(np.array(t), np.array(lab), params, n_heads=1)
    assert np.allclose(fused.data, summary + t + lab, atol=1e-12)
    assert np.allclose(w.data[0], weights, atol=1e-12)


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    _, w = fuse(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)), _fuse_params(8, 4), n_heads=4)
    assert w.shape == (5, 4, 2, 2)
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_swapping_modalities_permutes_outputs():
    d = 6
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=d), rng.normal(size=d)
    params = _fuse_params(d, 7)
    f_ab, w_ab = fuse(a, b, params, n_heads=2)
    f_ba, w_ba = fuse(b, a, params, n_heads=2)
    # slots swap; attention with no positional signal is permutation-equivariant,
    # so the mean of the two attended positions is unchanged and the weights are
    # the same matrices with both axes reversed
    assert np.array_equal(f_ab.data[d:2 * d], f_ba.data[2 * d:])
    assert np.array_equal(f_ab.data[2 * d:], f_ba.data[d:2 * d])
    assert np.allclose(f_ab.data[:d], f_ba.data[:d], atol=1e-12)
    assert np.allclose(w_ab.data, w_ba.data[:, ::-1, ::-1], atol=1e-12)


def test_fuse_shape_errors():
    with pytest.raises(ShapeError):
        fuse(np.zeros(4), np.zeros(3), _fuse_params(4))
    with pytest.raises(ShapeError):
        fuse(np.zeros(3), np.zeros(3), _fuse_params(4))


def test_classify_examples():
    shapes = fusion_shapes(2, 6, 3, 5, with_attention=False)
    params = {k: Tensor(np.zeros(s)) for k, s in shapes.items()}
    params["head.b2"] = Tensor([0.1, -0.2, 0.3, 0.0, 1.0])
    out = classify(np.ones(6), params)
    assert out.shape == (5,) and np.array_equal(out.data, params["head.b2"].data)
    one = {"head.w1": Tensor([[1.0], [-2.0]]), "head.b1": Tensor([0.5]),
           "head.w2": Tensor([[3.0, -1.0]]), "head.b2": Tensor([0.0, 1.0])}
    h = max(0.0, 1.0 * 2.0 - 2.0 * 0.25 + 0.5)
    assert classify(np.array([2.0, 0.25]), one).data.tolist() == [3.0 * h, -h + 1.0]
    with pytest.raises(ShapeError):
        classify(np.ones(3), one)


# the model object


@pytest.fixture(scope="module")
def records():
    return labeled(small_cohort(40, seed=5))


@pytest.mark.parametrize("mode", ["fusion", "text_only", "labs_only", "labs_text"])
def test_forward_probabilities(records, mode):
    model = tiny_model(records, mode=mode)
    probs = model.predict_proba(records)
    assert probs.shape == (len(records), 2)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(model.forward(records[0]), probs[0], atol=1e-12)


def test_head_width_per_mode(records):
    assert tiny_model(records, "fusion").params["head.w1"].shape[0] == 24
    assert tiny_model(records, "labs_only").params["head.w1"].shape[0] == 8


def test_multiclass_logits(records):
    model = tiny_model(records, task="multiclass")
    assert model.predict_proba(records[:3]).shape == (3, 5)


def test_text_only_on_empty_note_is_an_error(records):
    model = tiny_model(records, mode="text_only")
    rec = EncounterRecord("P9", "2020-01-01", panel=LabPanel({"K": "4.1"}))
    with pytest.raises(DataError):
        model.forward(rec)


def test_labs_only_on_empty_panel_is_an_error(records):
    model = tiny_model(records, mode="labs_only")
    with pytest.raises(DataError):
        model.forward(EncounterRecord("P9", "2020-01-01", note_text="hello"))


def test_unknown_mode():
    with pytest.raises(ConfigError):
        ModelConfig(mode="images")


def test_attention_weights_exposed(records):
    model = tiny_model(records)
    w = model.attention_weights(records[:4])
    assert w.shape == (4, 2, 2, 2)
    with pytest.raises(ConfigError):
        tiny_model(records, "labs_only").attention_weights(records[:1])


def test_pluggable_text_embedder(records):
    d = 8
    embed = lambda texts: np.array([[len(t) / 100.0] * d for t in texts])  # noqa: E731
    cfg = ModelConfig(mode="text_only", d_model=d, n_heads=2, fusion_heads=2, head_hidden=4)
    model = FusionModel(cfg, None, None, text_embedder=embed)
    assert not any(k.startswith("text.") for k in model.params)
    assert model.predict_proba(records[:2]).shape == (2, 2)
    bad = FusionModel(cfg, None, None, text_embedder=lambda texts: np.zeros((len(texts), 3)))
    with pytest.raises(ShapeError):
        bad.predict_proba(records[:2])


def test_checkpoint_round_trip(records, tmp_path):
    model = tiny_model(records, seed=3)
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    model.save(a)
    model.save(b)
    assert a.read_bytes() == b.read_bytes()
    back = FusionModel.load(a)
    assert back.config == model.config and back.vocab == model.vocab
    assert np.array_equal(back.predict_proba(records), model.predict_proba(records))
    with np.load(a) as npz:
        meta = json.loads(npz["__meta__"].tobytes().decode())
    assert meta["format"] == "llmm-checkpoint 1"
    assert meta["vocab_sha256"] == model.vocab.digest()
    assert meta["norm_stats"]["provenance"] == "train"


def _rewrite(path, out, edit):
    with zipfile.ZipFile(path) as src, zipfile.ZipFile(out, "w") as dst:
        for info in src.infolist():
            dst.writestr(info, edit(info.filename, src.read(info.filename)))


def test_checkpoint_load_checks_vocab_hash_and_shapes(records, tmp_path):
    model = tiny_model(records)
    path = tmp_path / "m.npz"
    model.save(path)

    def tamper_vocab(name, data):
        if name != "__meta__.npy":
            return data
        return data.replace(b'"[UNK]"', b'"[UNX]"')

    _rewrite(path, tmp_path / "v.npz", tamper_vocab)
    with pytest.raises((DataError, ConfigError)):
        FusionModel.load(tmp_path / "v.npz")

    small = tmp_path / "s.npz"
    arrays = {"__meta__": None}
    with np.load(path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    arrays["param:head.b2"] = np.zeros(3)
    np.savez(small, **arrays)
    with pytest.raises(ShapeError):
        FusionModel.load(small)


def test_not_a_checkpoint(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(DataError):
        FusionModel.load(tmp_path / "x.npz")


def test_end_to_end_gradients(records):
    batch_records = records[:3]
    y = np.array([1, 1, 0])
    template = tiny_model(batch_records, d_model=4, fusion_heads=2, n_heads=2,
                          lab_hidden=(5,), head_hidden=3, max_len=64)
    batch = template.prepare(batch_records)
    names = sorted(template.params)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = FusionModel(template.config, template.vocab, template.norm_stats, seed=seed)
        for name, p in model.params.items():
            if p.ndim == 1 or name.endswith("_emb"):
                # unit-scale embeddings keep layer norm away from its near-singular regime
                scale = 1.0 if name.endswith("_emb") else 0.1
                p.data = p.data + rng.normal(scale=scale, size=p.shape)
        others = [n for n in names if n not in ("fuse.wq", "head.w1")]
        picked = ["fuse.wq", "head.w1"] + [others[i] for i in rng.choice(len(others), 4, replace=False)]
        base = dict(model.params)

        def f(*tensors):
            model.params = {**base, **dict(zip(picked, tensors))}
            try:
                return ad.cross_entropy(model.logits(batch), y, np.array([0.7, 1.8]))
            finally:
                model.params = base

        err = grad_check(f, [base[n].data for n in picked], max_coords=12, rng=rng)
        worst = max(worst, err)
    assert worst < TOL
