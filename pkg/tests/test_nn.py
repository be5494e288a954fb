import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from esd import nn
from esd.errors import ConfigError, DimensionError, NumericError, StateError
from esd.nn import ParamGroup, Tape


def run_linear(x, W, b):
    tape = Tape()
    return nn.linear(tape.constant(x), tape.constant(W), tape.constant(b)).value


def test_linear_identity_input():
    out = run_linear(np.eye(2), [[2, 0], [0, 3]], [[0, 0]])
    np.testing.assert_array_equal(out, [[2, 0], [0, 3]])


def test_linear_zero_input_gives_bias_rows():
    out = run_linear(np.zeros((3, 4)), np.arange(8.0).reshape(4, 2), [[1, 1]])
    np.testing.assert_array_equal(out, np.ones((3, 2)))


def test_linear_hand_computed():
    assert run_linear([[1, 2]], [[1], [1]], [[0.5]])[0, 0] == 3.5


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 1\)"):
        run_linear(np.zeros((2, 3)), np.zeros((4, 1)), np.zeros((1, 1)))


@pytest.mark.parametrize(
    "kind, x, expected",
    [
        ("relu", [[-1, 2]], [[0, 2]]),
        ("sigmoid", [[0]], [[0.5]]),
        ("softmax_rows", [[0, 0, 0, 0]], [[0.25] * 4]),
    ],
)
def test_activation_examples(kind, x, expected):
    out = nn.activation(kind, Tape().constant(x)).value
    np.testing.assert_array_equal(out, expected)


def test_unknown_activation():
    with pytest.raises(ConfigError):
        nn.activation("tanh", Tape().constant([[1.0]]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    y = nn.softmax_rows(Tape().constant(x)).value
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(y >= 0)


def test_sigmoid_saturates_without_overflow():
    y = nn.sigmoid(Tape().constant([[-1000.0, 1000.0]])).value
    assert y[0, 0] == 0.0 and y[0, 1] == 1.0


def test_backward_sum_of_product_matches_outer_structure(rng):
    x = rng.normal(size=(5, 3))
    group = ParamGroup("w", [rng.normal(size=(3, 4))])
    tape = Tape()
    out = nn.sum_all(nn.matmul(tape.constant(x), tape.param(group, 0)))
    tape.backward(out)
    # d/dW_kj sum_i (xW)_ij = sum_i x_ik
    expected = np.repeat(x.sum(axis=0)[:, None], 4, axis=1)
    np.testing.assert_allclose(group.grads[0], expected, rtol=1e-12)
    err = nn.grad_check(lambda t: nn.sum_all(nn.matmul(t.constant(x), t.param(group, 0))), group, eps=1e-5)
    assert err < 1e-7


def test_backward_frozen_group_gets_zero_grads(rng):
    group = ParamGroup("w", [rng.normal(size=(2, 2))], frozen=True)
    group.grads = [np.ones((2, 2))]
    tape = Tape()
    tape.backward(nn.sum_all(nn.square(tape.param(group, 0))))
    np.testing.assert_array_equal(group.grads[0], np.zeros((2, 2)))


def test_backward_twice_without_accumulate_is_identical(rng):
    group = ParamGroup("w", [rng.normal(size=(3, 3))])
    tape = Tape()
    out = nn.sum_all(nn.relu(nn.matmul(tape.param(group, 0), tape.constant(rng.normal(size=(3, 2))))))
    tape.backward(out)
    first = group.grads[0].copy()
    tape.backward(out)
    np.testing.assert_array_equal(group.grads[0], first)
    tape.backward(out, accumulate=True)
    np.testing.assert_array_equal(group.grads[0], 2 * first)


def test_backward_without_forward():
    with pytest.raises(StateError):
        Tape().backward()


def test_backward_seed_shape_checked():
    tape = Tape()
    out = nn.scale(tape.constant([[1.0, 2.0]]), 2.0)
    with pytest.raises(DimensionError):
        tape.backward(out, seed_grad=[[1.0]])


def test_constant_leaf_receives_no_gradient(rng):
    group = ParamGroup("w", [rng.normal(size=(2, 2))])
    tape = Tape()
    tape.backward(nn.sum_all(nn.square(tape.param(group, 0, trainable=False))))
    np.testing.assert_array_equal(group.grads[0], 0.0)


def test_record_rejects_non_finite():
    tape = Tape()
    with np.errstate(over="ignore"), pytest.raises(NumericError):
        nn.scale(tape.constant([[1e308]]), 10.0)


def test_sgd_step_scalar():
    group = ParamGroup("w", [[[1.0]]])
    group.grads = [np.array([[2.0]])]
    nn.sgd_step([group], 0.5)
    assert group.tensors[0][0, 0] == 0.0
    assert group.grads[0][0, 0] == 0.0


def test_sgd_frozen_and_zero_lr_leave_tensors_bit_identical(rng):
    frozen = ParamGroup("a", [rng.normal(size=(3, 3))], frozen=True)
    live = ParamGroup("b", [rng.normal(size=(3, 3))])
    before = [frozen.tensors[0].copy(), live.tensors[0].copy()]
    for g in (frozen, live):
        g.grads = [np.ones((3, 3))]
    nn.sgd_step([frozen], 0.1)
    nn.sgd_step([live], 0.0)
    assert frozen.tensors[0].tobytes() == before[0].tobytes()
    assert live.tensors[0].tobytes() == before[1].tobytes()


def test_sgd_rejects_negative_lr():
    with pytest.raises(ConfigError):
        nn.sgd_step([ParamGroup("w", [[[1.0]]])], -0.1)


def test_grad_check_quadratic(rng):
    group = ParamGroup("w", [rng.normal(size=(4, 5))])
    err = nn.grad_check(lambda t: nn.scale(nn.sum_all(nn.square(t.param(group, 0))), 0.5), group, eps=1e-5)
    assert err < 1e-7


def test_grad_check_constant_loss(rng):
    group = ParamGroup("w", [rng.normal(size=(3, 3))])
    err = nn.grad_check(lambda t: nn.sum_all(nn.scale(t.param(group, 0), 0.0)), group)
    assert err < 1e-8


def test_grad_check_restores_tensors(rng):
    group = ParamGroup("w", [rng.normal(size=(3, 3))])
    original = group.tensors[0]
    nn.grad_check(lambda t: nn.sum_all(nn.square(t.param(group, 0))), group)
    assert group.tensors[0] is original


def test_grad_check_non_finite_loss():
    group = ParamGroup("w", [[[0.0]]])
    with pytest.raises(NumericError):
        nn.grad_check(lambda t: nn.log(t.param(group, 0)), group)


ELEMENTWISE = {
    "sigmoid": nn.sigmoid,
    "softmax_rows": nn.softmax_rows,
    "log_softmax_rows": nn.log_softmax_rows,
    "square": nn.square,
    "sum_rows": nn.sum_rows,
    "log_of_exp": lambda x: nn.log(nn.add_const(nn.square(x), 0.5)),
    "relu": nn.relu,
    "absolute": nn.absolute,
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_unary_adjoints_match_finite_differences(name):
    op = ELEMENTWISE[name]
    weights = np.random.default_rng(99).normal(size=(4, 5))
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        group = ParamGroup("x", [r.normal(size=(4, 5))])

        def loss(t):
            return nn.sum_all(nn.mul(op(t.param(group, 0)), t.constant(weights)))

        worst = max(worst, nn.grad_check(loss, group, eps=1e-6))
    assert worst < 1e-4


BINARY = {
    "add_row": lambda a, b: nn.add(a, b),
    "sub_row": lambda a, b: nn.sub(a, b),
    "mul_row": lambda a, b: nn.mul(a, b),
    "div_row": lambda a, b: nn.div(a, nn.add_const(nn.square(b), 1.0)),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_broadcasting_adjoints(name):
    op = BINARY[name]
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        group = ParamGroup("p", [r.normal(size=(4, 3)), r.normal(size=(1, 3))])
        weights = r.normal(size=(4, 3))

        def loss(t):
            a, b = t.params(group)
            return nn.sum_all(nn.mul(op(a, b), t.constant(weights)))

        worst = max(worst, nn.grad_check(loss, group, eps=1e-6))
    assert worst < 1e-4


def test_linear_concat_pick_adjoints():
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        group = ParamGroup("p", [r.normal(size=(5, 3)), r.normal(size=(3, 2)), r.normal(size=(1, 2)), r.normal(size=(5, 1))])
        labels = r.integers(0, 3, size=5)

        def loss(t):
            x, W, b, extra = t.params(group)
            h = nn.concat_cols(nn.linear(x, W, b), extra)
            return nn.sum_all(nn.square(nn.pick(h, labels)))

        worst = max(worst, nn.grad_check(loss, group, eps=1e-6))
    assert worst < 1e-4


def test_replay_is_bit_identical(rng):
    x = rng.normal(size=(6, 4))
    group = ParamGroup("w", nn.linear_params(np.random.default_rng(5), 4, 3))

    def forward():
        t = Tape()
        return nn.softmax_rows(nn.relu(nn.linear(t.constant(x), *t.params(group)))).value

    assert forward().tobytes() == forward().tobytes()


def test_glorot_bounds():
    W = nn.glorot_uniform(np.random.default_rng(0), 30, 10)
    assert np.abs(W).max() <= np.sqrt(6 / 40)
