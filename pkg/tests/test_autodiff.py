import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import norm

from llmm import autodiff as ad
from llmm.errors import ConfigError, ContractError, NumericError, ShapeError

from helpers import TOL, grad_check, projected

N_INSTANCES = 100


def _rng(seed):
    return np.random.default_rng(seed)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# Each entry builds (function of tensors -> scalar, list of input arrays) from a seed.
def _case_add(r):
    w = r.normal(size=(3, 4))
    return projected(lambda a, b: a + b, w), [r.normal(size=(3, 4)), r.normal(size=(4,))]


def _case_sub(r):
    w = r.normal(size=(2, 3))
    return projected(lambda a, b: a - b, w), [r.normal(size=(2, 3)), r.normal(size=(2, 1))]


def _case_mul(r):
    w = r.normal(size=(3, 2))
    return projected(lambda a, b: a * b, w), [r.normal(size=(3, 2)), r.normal(size=(3, 2))]


def _case_div(r):
    w = r.normal(size=(2, 3))
    b = r.uniform(0.5, 2.0, size=(2, 3)) * r.choice([-1, 1], size=(2, 3))
    return projected(lambda a, b: a / b, w), [r.normal(size=(2, 3)), b]


def _case_exp(r):
    return projected(ad.exp, r.normal(size=(5,))), [r.normal(size=(5,))]


def _case_log(r):
    return projected(ad.log, r.normal(size=(5,))), [r.uniform(0.3, 3.0, size=(5,))]


def _case_square(r):
    return projected(ad.square, r.normal(size=(2, 3))), [r.normal(size=(2, 3))]


def _case_relu(r):
    return projected(ad.relu, r.normal(size=(6,))), [_away_from_zero(r, (6,))]


def _case_gelu(r):
    return projected(ad.gelu, r.normal(size=(6,))), [r.normal(scale=2.0, size=(6,))]


def _case_matmul(r):
    return projected(ad.matmul, r.normal(size=(2, 4))), [r.normal(size=(2, 3)), r.normal(size=(3, 4))]


def _case_matmul_batched(r):
    w = r.normal(size=(2, 3, 2))
    return projected(ad.matmul, w), [r.normal(size=(2, 3, 4)), r.normal(size=(4, 2))]


def _case_matmul_stacked(r):
    w = r.normal(size=(2, 2, 2))
    return projected(ad.matmul, w), [r.normal(size=(2, 2, 3)), r.normal(size=(2, 3, 2))]


def _case_reshape_transpose(r):
    w = r.normal(size=(3, 2, 2))
    return (projected(lambda a: ad.transpose(ad.reshape(a, (2, 2, 3)), (2, 0, 1)), w),
            [r.normal(size=(4, 3))])


def _case_swapaxes(r):
    w = r.normal(size=(2, 4, 3))
    return projected(lambda a: ad.swapaxes(a, 1, 2), w), [r.normal(size=(2, 3, 4))]


def _case_sum_mean(r):
    w = r.normal(size=(3,))
    return (projected(lambda a: ad.tsum(a, axis=0) + ad.mean(a, axis=0), w),
            [r.normal(size=(4, 3))])


def _case_getitem(r):
    w = r.normal(size=(2, 3))
    return projected(lambda a: ad.getitem(a, (slice(None), [0, 2, 2])), w), [r.normal(size=(2, 4))]


def _case_concat_stack(r):
    w = r.normal(size=(2, 2, 5))
    f = lambda a, b: ad.stack([ad.concat([a, b], axis=-1), ad.concat([b, a], axis=-1)], axis=1)  # noqa: E731
    return projected(f, w), [r.normal(size=(2, 2)), r.normal(size=(2, 3))]


def _case_embedding(r):
    ids = r.integers(0, 5, size=(2, 3))
    w = r.normal(size=(2, 3, 4))
    return projected(lambda t: ad.embedding(t, ids), w), [r.normal(size=(5, 4))]


def _case_softmax(r):
    return projected(lambda a: ad.softmax(a, axis=-1), r.normal(size=(3, 4))), [r.normal(size=(3, 4))]


def _case_softmax_masked(r):
    mask = r.random(size=(3, 4)) < 0.6
    mask[:, 0] = True
    w = r.normal(size=(3, 4))
    return projected(lambda a: ad.softmax(a, axis=-1, mask=mask), w), [r.normal(size=(3, 4))]


def _case_log_softmax(r):
    w = r.normal(size=(2, 5))
    return projected(lambda a: ad.log_softmax(a, axis=-1), w), [r.normal(size=(2, 5))]


def _case_layer_norm(r):
    w = r.normal(size=(3, 5))
    f = lambda x, g, b: ad.layer_norm(x, g, b, 1e-5)  # noqa: E731
    return projected(f, w), [r.normal(size=(3, 5)), r.normal(size=(5,)), r.normal(size=(5,))]


def _case_cross_entropy(r):
    t = r.integers(0, 3, size=4)
    cw = r.uniform(0.5, 2.0, size=3)
    return (lambda z: ad.cross_entropy(z, t, cw)), [r.normal(size=(4, 3))]


CASES = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


@pytest.mark.parametrize("op", sorted(CASES))
def test_gradients_match_central_differences(op):
    worst = 0.0
    for seed in range(N_INSTANCES):
        f, inputs = CASES[op](_rng(seed))
        worst = max(worst, grad_check(f, inputs))
    assert worst < TOL, f"{op}: worst relative error {worst:.2e}"


# worked examples


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(a, np.array([[5.0], [6.0]])).data, [[17.0], [39.0]])
    assert np.array_equal(ad.matmul(a, np.eye(2)).data, a)
    assert np.array_equal(ad.matmul(a, np.zeros((2, 3))).data, np.zeros((2, 3)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert np.allclose(ad.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5], atol=1e-15)
    big = ad.softmax(np.array([1000.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    thirds = ad.softmax(np.log([1.0, 2.0, 3.0])).data
    assert np.allclose(thirds, [1 / 6, 2 / 6, 3 / 6], atol=1e-12)


def test_softmax_nan_is_numeric_error():
    with pytest.raises(NumericError):
        ad.softmax(np.array([0.0, np.nan]))


def test_masked_softmax_gives_exact_zeros():
    x = np.array([[3.0, 1.0, -2.0, 0.5]])
    mask = np.array([[True, False, True, False]])
    out = ad.softmax(x, mask=mask).data
    assert out[0, 1] == 0.0 and out[0, 3] == 0.0
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    p = ad.softmax(x, axis=-1).data
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-9)
    assert np.allclose(ad.softmax(x + c, axis=-1).data, p, atol=1e-9)


def test_layer_norm_examples():
    one, zero = np.ones(4), np.zeros(4)
    assert np.allclose(ad.layer_norm(np.full(4, 7.0), one, zero).data, 0.0)
    assert np.allclose(ad.layer_norm(np.array([1.0, -1.0]), np.ones(2), np.zeros(2), 1e-12).data,
                       [1.0, -1.0], atol=1e-9)
    beta = np.array([0.5, -1.0, 2.0, 3.0])
    assert np.allclose(ad.layer_norm(np.arange(4.0), zero, beta).data, beta)
    x = np.random.default_rng(0).normal(size=(3, 6)) * 5 + 2
    y = ad.layer_norm(x, np.ones(6), np.zeros(6)).data
    assert np.allclose(y.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(y.var(axis=-1), 1.0, atol=1e-5)


def test_layer_norm_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        ad.layer_norm(np.ones(3), np.ones(3), np.zeros(3), eps=0.0)


def test_gelu_examples():
    assert ad.gelu(np.array(0.0)).item() == 0.0
    assert ad.gelu(np.array(10.0)).item() == pytest.approx(10.0, abs=1e-12)
    # independent Gaussian CDF
    assert ad.gelu(np.array(1.0)).item() == pytest.approx(norm.cdf(1.0), abs=1e-12)
    assert ad.gelu(np.array(1.0)).item() == pytest.approx(0.8413, abs=1e-4)


def test_cross_entropy_examples():
    assert ad.cross_entropy(np.zeros((3, 4)), [0, 1, 3]).item() == pytest.approx(math.log(4))
    assert ad.cross_entropy(np.array([[60.0, 0.0]]), [0]).item() < 1e-20
    loss = ad.cross_entropy(np.array([[0.0, 0.0]]), [0], [2.0, 1.0]).item()
    brute = -2.0 * math.log(math.exp(0) / (math.exp(0) + math.exp(0)))
    assert loss == pytest.approx(brute, abs=1e-15)
    assert loss == pytest.approx(2 * math.log(2), abs=1e-15)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ad.cross_entropy(np.zeros((1, 2)), [2])


def test_backward_examples():
    x = ad.Tensor(3.0, requires_grad=True)
    with ad.Tape() as tape:
        ad.backward(ad.square(x), tape)
    assert x.grad == pytest.approx(6.0)
    fd = ((3 + 1e-5) ** 2 - (3 - 1e-5) ** 2) / 2e-5
    assert x.grad == pytest.approx(fd, rel=1e-8)

    v = ad.Tensor(np.arange(5.0), requires_grad=True)
    with ad.Tape() as tape:
        ad.backward(ad.tsum(v), tape)
    assert np.array_equal(v.grad, np.ones(5))


def test_softmax_cross_entropy_gradient_is_p_minus_onehot():
    z = np.array([[0.3, -1.2, 2.0]])
    t = ad.Tensor(z, requires_grad=True)
    with ad.Tape() as tape:
        ad.backward(ad.cross_entropy(t, [1]), tape)
    p = np.exp(z) / np.exp(z).sum()
    assert np.allclose(t.grad, p - np.array([[0, 1, 0]]), atol=1e-12)


def test_backward_contract_errors():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.Tape() as tape:
        y = x * 2.0
        with pytest.raises(ContractError):
            ad.backward(y, tape)
    with pytest.raises(ContractError):
        ad.backward(ad.Tensor(1.0), ad.Tape())


def test_tape_is_topological_and_replay_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def run():
        a, b = ad.Tensor(a0, requires_grad=True), ad.Tensor(b0, requires_grad=True)
        with ad.Tape() as tape:
            h = ad.gelu(a @ b)
            loss = ad.tsum(ad.softmax(h, axis=-1) * ad.layer_norm(h, np.ones(2), np.zeros(2)))
            ad.backward(loss, tape)
        for i, node in enumerate(tape.nodes):
            for inp in node.inputs:
                assert inp._node is None or inp._node < i
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_no_tape_means_no_recording():
    x = ad.Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y.node_id is None and ad.active_tape() is None


def test_broadcast_shape_error():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((4,)))


def test_gradients_accumulate_over_reuse():
    x = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with ad.Tape() as tape:
        ad.backward(ad.tsum(x * x + x), tape)
    assert np.array_equal(x.grad, 2 * x.data + 1)
