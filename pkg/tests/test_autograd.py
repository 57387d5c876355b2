"""Tape autodiff: hand oracles, finite-difference gradients, tape accounting."""

import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sidenet import autograd as ag
from sidenet.autograd import BatchNormState, ContractError, DimensionError, Parameter, Tensor
from sidenet.gradcheck import check_gradients, numerical_grad, relative_error
from sidenet.vit import ViTConfig, init_vit_params, vit_forward

from helpers import side_loss_fn, tiny_setup, walk_saved_bytes

TOL = 1e-5


def leaf(rng, shape, positive=False, name=None):
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True, name=name)


def fixed_weights(shape, seed=7):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


def weighted(y):
    return (y * fixed_weights(y.shape)).sum()


# ---------------------------------------------------------------- hand oracles


def test_matmul_identity_and_scalar_product():
    m = np.array([[2.0, 3.0], [5.0, 7.0]])
    np.testing.assert_array_equal(ag.matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    assert ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradient_random_4x5_by_5x3():
    rng = np.random.default_rng(0)
    a, b = leaf(rng, (4, 5)), leaf(rng, (5, 3))
    errs = check_gradients(lambda: ag.matmul(a, b).sum(), [a, b])
    assert max(errs.values()) < 1e-6


def test_softmax_oracles():
    np.testing.assert_allclose(ag.softmax_lastdim(Tensor(np.zeros(3))).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    big = ag.softmax_lastdim(Tensor([1000.0, 0.0, 0.0])).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300
    # 50-digit decimal evaluation of exp(i) / sum exp
    np.testing.assert_allclose(
        ag.softmax_lastdim(Tensor([1.0, 2.0, 3.0])).data,
        [0.09003057317038046, 0.24472847105479764, 0.6652409557748219],
        rtol=1e-15,
    )


def test_softmax_nan_propagates():
    assert np.isnan(ag.softmax_lastdim(Tensor([np.nan, 0.0])).data).all()


def test_layernorm_oracles():
    g, b = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(ag.layernorm(Tensor(np.full((2, 4), 3.0)), g, b).data, 0.0)
    out = ag.layernorm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0).data
    np.testing.assert_array_equal(out, [[-1.0, 1.0]])


def test_batchnorm_constant_input_is_zero():
    st_ = BatchNormState.fresh(2, np.float64)
    x = Tensor(np.full((2, 3, 4, 2), 5.0))
    out = ag.batchnorm3d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, training=True)
    np.testing.assert_array_equal(out.data, 0.0)


def test_batchnorm_eval_identity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 4, 5))
    st_ = BatchNormState.fresh(5, np.float64, eps=0.0)
    out = ag.batchnorm3d(Tensor(x), Tensor(np.ones(5)), Tensor(np.zeros(5)), st_, training=False)
    np.testing.assert_array_equal(out.data, x)


def test_batchnorm_two_sample_hand_statistics():
    # values 1 and 3: mean 2, biased var 1, unbiased var 2
    st_ = BatchNormState.fresh(1, np.float64)
    x = Tensor(np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    out = ag.batchnorm3d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), st_, training=True)
    r = 1 / math.sqrt(1 + 1e-5)
    np.testing.assert_allclose(out.data.ravel(), [-r, r], rtol=1e-15)
    assert st_.running_mean[0] == pytest.approx(0.2, abs=1e-15)
    assert st_.running_var[0] == pytest.approx(0.9 + 0.1 * 2.0, abs=1e-15)


def test_batchnorm_degenerate_batch():
    with pytest.raises(ContractError):
        ag.batchnorm3d(Tensor(np.ones((1, 1, 1, 3))), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                       BatchNormState.fresh(3, np.float64), training=True)


def test_depthwise_conv_identity_kernel():
    x = np.random.default_rng(2).standard_normal((2, 4, 3, 5))
    w = np.tile([0.0, 1.0, 0.0], (5, 1))
    np.testing.assert_array_equal(ag.conv_temporal_depthwise(Tensor(x), Tensor(w)).data, x)


def test_depthwise_conv_single_frame_padding():
    x = np.random.default_rng(3).standard_normal((2, 1, 3, 4))
    w = np.tile([1.0, 0.0, 1.0], (4, 1))
    np.testing.assert_array_equal(ag.conv_temporal_depthwise(Tensor(x), Tensor(w)).data, 0.0)


def test_depthwise_conv_hand_unrolled():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 3, 1, 2))
    w = rng.standard_normal((2, 3))
    got = ag.conv_temporal_depthwise(Tensor(x), Tensor(w)).data
    want = np.zeros_like(x)
    for t in range(3):
        for c in range(2):
            acc = 0.0
            for k in (-1, 0, 1):
                if 0 <= t + k < 3:
                    acc += w[c, k + 1] * x[0, t + k, 0, c]
            want[0, t, 0, c] = acc
    np.testing.assert_allclose(got, want, rtol=1e-15, atol=1e-15)


def test_shift_frames_index_map():
    # T=3, C=4: channels 0-1 read t-1, channels 2-3 read t+1
    x = np.arange(1, 13, dtype=np.float64).reshape(1, 3, 4)
    want = np.array([[[0, 0, 7, 8], [1, 2, 11, 12], [5, 6, 0, 0]]], dtype=np.float64)
    np.testing.assert_array_equal(ag.shift_frames(Tensor(x)).data, want)


def test_shift_frames_odd_channels_front_half_is_larger():
    x = np.ones((1, 2, 3))
    out = ag.shift_frames(Tensor(x)).data
    np.testing.assert_array_equal(out, [[[0, 0, 1], [1, 1, 0]]])


def test_backward_simple_oracles():
    x = Tensor(np.array([[1.0, -2.0], [3.0, 0.5]]), requires_grad=True)
    with ag.fresh_tape():
        ag.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))
    x.grad = None
    with ag.fresh_tape():
        ag.backward((x * x).sum())
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_contract_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        ag.backward(x * 2.0)
    with pytest.raises(ContractError):
        ag.backward(Tensor(np.ones(())))


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with ag.fresh_tape():
            ag.backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


# ---------------------------------------------------------------- finite differences, >= 3 shapes per op

SHAPES = [(3,), (2, 5), (2, 3, 4)]


def _elementwise(fn, positive=False):
    def build(rng, shape):
        x = leaf(rng, shape, positive)
        return (lambda: weighted(fn(x))), [x]

    return build


def _binary(fn, positive_b=False):
    def build(rng, shape):
        a = leaf(rng, shape)
        b = leaf(rng, shape[-1:], positive_b)  # broadcast over leading axes
        return (lambda: weighted(fn(a, b))), [a, b]

    return build


def _reduction(fn):
    def build(rng, shape):
        x = leaf(rng, shape)
        return (lambda: weighted(fn(x))), [x]

    return build


def _layernorm(rng, shape):
    x, g, b = leaf(rng, shape), leaf(rng, shape[-1:]), leaf(rng, shape[-1:])
    return (lambda: weighted(ag.layernorm(x, g, b))), [x, g, b]


def _matmul(rng, shape):
    a = leaf(rng, shape[:-1] + (shape[-1],) if len(shape) > 1 else (2, shape[0]))
    b = leaf(rng, (a.shape[-1], 3))
    return (lambda: weighted(ag.matmul(a, b))), [a, b]


def _linear(rng, shape):
    x = leaf(rng, shape)
    w, b = leaf(rng, (shape[-1], 4)), leaf(rng, (4,))
    return (lambda: weighted(ag.linear(x, w, b))), [x, w, b]


def _getitem(rng, shape):
    x = leaf(rng, shape)
    return (lambda: weighted(x[..., 1:])), [x]


def _concat(rng, shape):
    a, b = leaf(rng, shape), leaf(rng, shape)
    return (lambda: weighted(ag.concat([a, b], axis=-1))), [a, b]


def _embedding(rng, shape):
    w = leaf(rng, (5, shape[-1]))
    ids = np.array([0, 3, 3, 1])
    return (lambda: weighted(ag.embedding(w, ids))), [w]


OPS = {
    "add": _binary(lambda a, b: a + b),
    "sub": _binary(lambda a, b: a - b),
    "mul": _binary(lambda a, b: a * b),
    "div": _binary(lambda a, b: a / b, positive_b=True),
    "neg": _elementwise(lambda x: -x),
    "scale": _elementwise(lambda x: x * 2.5),
    "exp": _elementwise(ag.exp),
    "log": _elementwise(ag.log, positive=True),
    "tanh": _elementwise(ag.tanh),
    "gelu": _elementwise(ag.gelu),
    "sum": _reduction(lambda x: x.sum(axis=-1)),
    "mean": _reduction(lambda x: x.mean()),
    "exact_mean": _reduction(lambda x: ag.exact_mean(x, axis=-1)),
    "max": _reduction(lambda x: x.max(axis=-1)),
    "reshape": _reduction(lambda x: x.reshape(-1)),
    "transpose": _reduction(lambda x: x.transpose()),
    "softmax": _elementwise(ag.softmax_lastdim),
    "log_softmax": _elementwise(ag.log_softmax_lastdim),
    "l2_normalize": _elementwise(ag.l2_normalize),
    "layernorm": _layernorm,
    "matmul": _matmul,
    "linear": _linear,
    "getitem": _getitem,
    "concat": _concat,
    "embedding": _embedding,
}


@pytest.mark.parametrize("shape", SHAPES, ids=str)
@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op, shape):
    rng = np.random.default_rng(zlib.crc32(f"{op}{shape}".encode()))
    f, tensors = OPS[op](rng, shape)
    errs = check_gradients(f, tensors)
    assert max(errs.values()) < TOL, errs


FRAME_SHAPES = [(1, 3, 2, 4), (2, 4, 3, 2), (2, 2, 1, 5)]


@pytest.mark.parametrize("shape", FRAME_SHAPES, ids=str)
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(shape, training):
    rng = np.random.default_rng(5)
    c = shape[-1]
    x, g, b = leaf(rng, shape), leaf(rng, (c,)), leaf(rng, (c,))
    state = BatchNormState(rng.standard_normal(c), np.abs(rng.standard_normal(c)) + 0.5)
    errs = check_gradients(lambda: weighted(ag.batchnorm3d(x, g, b, state, training)), [x, g, b])
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("shape", FRAME_SHAPES, ids=str)
def test_depthwise_conv_gradients(shape):
    rng = np.random.default_rng(6)
    x, w = leaf(rng, shape), leaf(rng, (shape[-1], 3))
    errs = check_gradients(lambda: weighted(ag.conv_temporal_depthwise(x, w)), [x, w])
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("shape", FRAME_SHAPES, ids=str)
def test_dense_temporal_conv_gradients(shape, k):
    rng = np.random.default_rng(7)
    x, w = leaf(rng, shape), leaf(rng, (k, shape[-1], 3))
    errs = check_gradients(lambda: weighted(ag.conv_temporal(x, w)), [x, w])
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("shape", [(1, 1, 3), (2, 3, 4), (3, 4, 5)], ids=str)
def test_shift_frames_gradients(shape):
    x = leaf(np.random.default_rng(8), shape)
    errs = check_gradients(lambda: weighted(ag.shift_frames(x)), [x])
    assert max(errs.values()) < TOL


@pytest.mark.parametrize("lead", [(), (2,), (3, 2)], ids=str)
def test_batched_matmul_gradients(lead):
    rng = np.random.default_rng(9)
    a, b = leaf(rng, lead + (2, 4)), leaf(rng, (4, 3))
    errs = check_gradients(lambda: weighted(ag.matmul(a, b)), [a, b])
    assert max(errs.values()) < TOL


@settings(max_examples=25, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 5),
    seed=st.integers(0, 2**31 - 1),
)
def test_composite_expression_gradients_property(rows, cols, seed):
    rng = np.random.default_rng(seed)
    x, w = leaf(rng, (rows, cols)), leaf(rng, (cols, cols))
    f = lambda: weighted(ag.softmax_lastdim(ag.tanh(ag.matmul(x, w)) * x) + ag.gelu(x))
    assert max(check_gradients(f, [x, w]).values()) < TOL


def test_exact_mean_survives_cancellation():
    # naive summation loses the 1 entirely: (1e16 + 1) - 1e16 == 0 in f64
    x = Tensor(np.array([[1e16, 1.0, -1e16], [0.1, 0.2, 0.3]]))
    got = ag.exact_mean(x, axis=1).data
    assert got[0] == 1.0 / 3.0 and got[1] == math.fsum([0.1, 0.2, 0.3]) / 3
    assert np.mean(x.data, axis=1)[0] != got[0]


def test_exact_mean_shapes_and_dtype():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    assert ag.exact_mean(x, axis=(0, 2)).shape == (3,)
    k = ag.exact_mean(x, axis=(1, 2), keepdims=True)
    assert k.shape == (2, 1, 1) and k.dtype == np.float32
    np.testing.assert_array_equal(k.data.ravel(), [5.5, 17.5])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_exact_mean_order_free(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, n)) * 10.0 ** rng.integers(-8, 8, (2, n))
    a = ag.exact_mean(Tensor(x), axis=1).data
    b = ag.exact_mean(Tensor(x[:, rng.permutation(n)]), axis=1).data
    assert a.tobytes() == b.tobytes()


def test_numerical_grad_leaves_data_untouched():
    x = leaf(np.random.default_rng(10), (3, 2))
    before = x.data.copy()
    numerical_grad(lambda: (x * x).sum(), x)
    np.testing.assert_array_equal(x.data, before)


def test_relative_error_vanishing_gradients():
    assert relative_error(np.zeros(3), np.full(3, 1e-9)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


# ---------------------------------------------------------------- tape semantics


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(values):
    out = ag.softmax_lastdim(Tensor(np.array(values))).data
    assert abs(out.sum() - 1.0) < 1e-12 and (out >= 0).all()


def test_tape_topological_and_constants_not_recorded():
    vit, side, store, x, out = tiny_setup()
    with ag.fresh_tape() as tape:
        side_loss_fn(vit, side, store, x, out)()
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for i, node in enumerate(tape.nodes):
        for t in node.inputs:
            if t is None:
                continue
            assert t.requires_grad  # constants are replaced by None
            if t.node is not None:
                assert position[id(t.node)] < i


def test_saved_bytes_match_independent_tape_walk():
    vit, side, store, x, out = tiny_setup()
    with ag.fresh_tape() as tape:
        side_loss_fn(vit, side, store, x, out)()
    assert tape.saved_bytes > 0
    assert tape.saved_bytes == walk_saved_bytes(tape, store.values())


def test_backward_populates_exactly_the_grad_leaves():
    vit, side, store, x, out = tiny_setup()
    store.zero_grad()
    with ag.fresh_tape():
        ag.backward(side_loss_fn(vit, side, store, x, out)())
    for name, p in store.items():
        if p.requires_grad:
            assert p.grad is not None and p.grad.shape == p.shape and p.grad.dtype == p.dtype, name
        else:
            assert p.grad is None, name


def test_views_of_one_buffer_are_counted_once():
    x = Tensor(np.ones((4, 4)), requires_grad=True)
    with ag.fresh_tape() as tape:
        y = ag.exp(x)  # retains its 128-byte output
        _ = ag.log(y[:2] + 0.0)  # retains a fresh 64-byte buffer
        _ = y * y  # retains y again: no new bytes
    assert tape.saved_bytes == 128 + 64


def test_parameters_are_not_saved_activations():
    w = Parameter(np.ones((3, 3)))
    x = Tensor(np.ones((2, 3)))
    with ag.fresh_tape() as tape:
        ag.matmul(x, w)  # would retain x (a constant input buffer) for dW
    assert tape.saved_bytes == x.data.nbytes
    frozen = Parameter(np.ones((3, 3)), requires_grad=False)
    with ag.fresh_tape() as tape:
        ag.matmul(Tensor(np.ones((2, 3)), requires_grad=True), frozen)  # retains only the weight
    assert len(tape) == 1 and tape.saved_bytes == 0


def test_no_grad_scope_frozen_linear_records_nothing():
    w = Parameter(np.ones((3, 2)))
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    with ag.fresh_tape() as tape:
        y = ag.no_grad_scope(ag.linear, x, w)
    assert len(tape) == 0 and tape.saved_bytes == 0
    assert not y.requires_grad and y.node is None


def test_no_grad_vit_forward_saves_nothing_but_grad_mode_does():
    cfg = ViTConfig.tiny()
    store = init_vit_params(cfg, np.random.default_rng(0), np.float64)
    for p in store.values():
        p.requires_grad = True
    x = np.random.default_rng(1).standard_normal((1, 2, 3, 16, 16))
    with ag.fresh_tape() as tape:
        vit_forward(x, cfg, store, [1, 2])
    assert len(tape) == 0 and tape.saved_bytes == 0
    from sidenet.vit import encode_frames

    with ag.fresh_tape() as tape:
        encode_frames(Tensor(x), cfg, store, [1, 2])
    assert tape.saved_bytes > 0


def test_forward_determinism():
    a = tiny_setup(seed=3)
    b = tiny_setup(seed=3)
    ya = side_loss_fn(*a)().data
    yb = side_loss_fn(*b)().data
    assert ya.tobytes() == yb.tobytes()
