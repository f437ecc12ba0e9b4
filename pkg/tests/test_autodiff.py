import zlib

import numpy as np
import pytest

from msda import autodiff as ad
from msda.rng import Rng

from gradcheck import check_op

INSTANCES = 100


def away_from_zero(rng, shape, gap=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap, x)


# name -> (op, input generator)
OPS = {
    "add": (ad.add, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "add_broadcast": (ad.add, lambda r: [r.normal(size=(3, 1)), r.normal(size=(1, 4))]),
    "sub": (ad.sub, lambda r: [r.normal(size=(2, 3)), r.normal(size=(3,))]),
    "mul": (ad.mul, lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "div": (ad.div, lambda r: [r.normal(size=(2, 3)), r.uniform(0.5, 2.0, size=(2, 3))]),
    "scale": (lambda a: ad.scale(a, -1.7), lambda r: [r.normal(size=(4,))]),
    "exp": (ad.exp, lambda r: [r.normal(size=(2, 3))]),
    "log": (ad.log, lambda r: [r.uniform(0.2, 3.0, size=(2, 3))]),
    "relu": (ad.relu, lambda r: [away_from_zero(r, (3, 3))]),
    "gelu": (ad.gelu, lambda r: [r.normal(size=(3, 3))]),
    "reshape": (lambda a: ad.reshape(a, (3, 2)), lambda r: [r.normal(size=(2, 3))]),
    "transpose": (lambda a: ad.transpose(a, (1, 2, 0)), lambda r: [r.normal(size=(2, 3, 2))]),
    "take_slice": (lambda a: ad.take(a, (slice(None), slice(1, 3))), lambda r: [r.normal(size=(2, 4))]),
    "take_fancy": (lambda a: ad.take(a, np.array([0, 2, 2, 1])), lambda r: [r.normal(size=(3, 2))]),
    "concat": (lambda a, b: ad.concat([a, b], axis=1), lambda r: [r.normal(size=(2, 2)), r.normal(size=(2, 3))]),
    "pad": (lambda a: ad.pad(a, [(1, 0), (0, 2)], 0.5), lambda r: [r.normal(size=(2, 3))]),
    "where": (lambda a, b: ad.where(np.array([[True, False, True]]), a, b),
              lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 1))]),
    "sum_all": (ad.sum_, lambda r: [r.normal(size=(2, 3))]),
    "sum_axis": (lambda a: ad.sum_(a, axis=1, keepdims=True), lambda r: [r.normal(size=(2, 3, 2))]),
    "mean_axis": (lambda a: ad.mean(a, axis=0), lambda r: [r.normal(size=(3, 2))]),
    "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), lambda r: [3 * r.normal(size=(2, 4))]),
    "softmax": (lambda a: ad.softmax(a, axis=0), lambda r: [r.normal(size=(4, 2))]),
    "log_softmax": (lambda a: ad.log_softmax(a, axis=-1), lambda r: [r.normal(size=(2, 5))]),
    "layer_norm": (ad.layer_norm, lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,)), r.normal(size=(4,))]),
    "cosine_similarity": (ad.cosine_similarity, lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))]),
    "cosine_broadcast": (ad.cosine_similarity, lambda r: [r.normal(size=(2, 1, 3)), r.normal(size=(2, 4, 3))]),
    "matmul": (ad.matmul, lambda r: [r.normal(size=(2, 3)), r.normal(size=(3, 2))]),
    "matmul_batched": (ad.matmul, lambda r: [r.normal(size=(2, 2, 3)), r.normal(size=(3, 2))]),
    "linear": (ad.linear, lambda r: [r.normal(size=(2, 3)), r.normal(size=(3, 2)), r.normal(size=(2,))]),
    "conv1d": (ad.conv1d, lambda r: [r.normal(size=(2, 5, 3)), r.normal(size=(3, 3, 2)), r.normal(size=(2,))]),
    "conv1d_k5": (ad.conv1d, lambda r: [r.normal(size=(1, 3, 2)), r.normal(size=(5, 2, 2))]),
    "gumbel_softmax": (lambda a: ad.gumbel_softmax(a, 0.7, Rng(11)), lambda r: [r.normal(size=(3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_matches_finite_differences(name):
    op, gen = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    failures = []
    for i in range(INSTANCES):
        ok, worst = check_op(op, gen(rng), rng)
        if not ok:
            failures.append((i, worst))
    assert not failures, f"{name}: {len(failures)} failing instances, e.g. {failures[:3]}"


def test_gumbel_hard_is_one_hot_with_soft_gradient():
    logits = np.random.default_rng(0).normal(size=(3, 5))
    hard_in, soft_in = ad.parameter(logits), ad.parameter(logits)
    hard = ad.gumbel_softmax(hard_in, 0.5, Rng(3), hard=True)
    soft = ad.gumbel_softmax(soft_in, 0.5, Rng(3), hard=False)
    assert np.array_equal(hard.data.sum(axis=-1), np.ones(3))
    assert np.array_equal(np.argmax(hard.data, -1), np.argmax(soft.data, -1))
    w = np.arange(15.0).reshape(3, 5)
    ad.backward(ad.sum_(ad.mul(hard, w)))
    ad.backward(ad.sum_(ad.mul(soft, w)))
    np.testing.assert_array_equal(hard_in.grad, soft_in.grad)


def test_gradients_accumulate_over_shared_use():
    x = ad.parameter([1.0, 2.0])
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.backward(ad.sum_(y))
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_no_grad_builds_no_graph():
    x = ad.parameter(np.ones(3))
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad
    assert ad.grad_enabled()


def test_backward_needs_scalar_root():
    with pytest.raises(ValueError):
        ad.backward(ad.exp(ad.parameter(np.ones(2))))


def test_shape_errors_name_the_op():
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(ad.parameter(np.ones((2, 3))), ad.parameter(np.ones((2, 3))))
    assert err.value.op.startswith("matmul")
    with pytest.raises(ad.ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ad.ShapeError):
        ad.conv1d(np.ones((1, 4, 2)), np.ones((2, 2, 1)))  # even kernel


def test_gumbel_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.gumbel_softmax(np.zeros(3), 0.0, Rng(0))
    with pytest.raises(ValueError):
        ad.gumbel_softmax(np.array([0.0, np.inf]), 1.0, Rng(0))


def test_log_softmax_is_stable_for_large_logits():
    out = ad.log_softmax(ad.as_value(np.array([1000.0, 0.0])))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, -1000.0], atol=1e-12)
