import numpy as np
import pytest

from infusion.autodiff import (
    BatchNormState,
    Parameter,
    Tape,
    Tensor,
    backward,
    batch_norm,
    gaussian_log_density,
    linear,
    logaddexp,
    no_grad,
    relu,
    reparam_sample,
    sigmoid,
    where,
)

from gradcheck import numerical_grad, rel_err


def grads_of(build, *leaves):
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = build()
    backward(tape, loss)
    return [t.grad for t in leaves]


def leaf(rng, *shape, positive=False):
    data = rng.uniform(0.1, 2.0, shape) if positive else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# -- linear -----------------------------------------------------------------


def test_linear_identity():
    out = linear(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))
    np.testing.assert_array_equal(out.data, [[1.0, 2.0]])


def test_linear_scalar_affine():
    out = linear(Tensor([[1.0]]), Tensor([[2.0]]), Tensor([3.0]))
    np.testing.assert_array_equal(out.data, [[5.0]])


def test_linear_shape_mismatch():
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones(2)))
    with pytest.raises(ValueError):
        linear(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))), Tensor(np.ones(3)))


def test_linear_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x, W, b = leaf(rng, 4, 3), leaf(rng, 3, 2), leaf(rng, 2)
    c = rng.standard_normal((4, 2))

    def f():
        return float(np.sum(c * linear(x, W, b).data))

    got = grads_of(lambda: (linear(x, W, b) * c).sum(), x, W, b)
    for g, t in zip(got, (x, W, b)):
        assert rel_err(g, numerical_grad(f, t.data)) < 1e-6


# -- relu / sigmoid ------------------------------------------------------------


def test_relu_values_and_gradient():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = Tensor([-1.0, 2.0], requires_grad=True)
    (g,) = grads_of(lambda: relu(x).sum(), x)
    np.testing.assert_array_equal(g, [0.0, 1.0])


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0], requires_grad=True)
    (g,) = grads_of(lambda: relu(x).sum(), x)
    assert g[0] == 0.0


def test_relu_finite_differences_away_from_zero():
    rng = np.random.default_rng(1)
    data = rng.standard_normal((5, 4))
    data[np.abs(data) < 0.1] += 0.5
    x = Tensor(data, requires_grad=True)
    c = rng.standard_normal((5, 4))
    (g,) = grads_of(lambda: (relu(x) * c).sum(), x)
    assert rel_err(g, numerical_grad(lambda: float(np.sum(c * relu(x).data)), x.data)) < 1e-6


def test_sigmoid_values():
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    out = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert out[0] == 0.0 and out[1] == 1.0
    assert np.all(np.isfinite(out))


def test_sigmoid_finite_differences():
    rng = np.random.default_rng(2)
    x = leaf(rng, 6, 3)
    c = rng.standard_normal((6, 3))
    (g,) = grads_of(lambda: (sigmoid(x) * c).sum(), x)
    assert rel_err(g, numerical_grad(lambda: float(np.sum(c * sigmoid(x).data)), x.data)) < 1e-6


# -- batch norm ----------------------------------------------------------------


def test_batch_norm_constant_column_is_zero():
    state = BatchNormState(2, n_steps=1)
    x = np.column_stack([np.full(5, 0.3), np.arange(5.0)])
    out = batch_norm(Tensor(x), state, 1, "train").data
    np.testing.assert_array_equal(out[:, 0], 0.0)


def test_batch_norm_train_output_standardized():
    rng = np.random.default_rng(3)
    state = BatchNormState(4, n_steps=1)
    out = batch_norm(Tensor(rng.normal(3.0, 2.0, (8, 4))), state, 1, "train").data
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    assert np.all(np.abs(out.var(axis=0) - 1.0) < 1e-5)


def test_batch_norm_steps_are_isolated():
    rng = np.random.default_rng(4)
    state = BatchNormState(3, n_steps=3)
    state.scale[3].data[:] = 5.0
    before = (state.scale[2].data.copy(), state.running_mean[2].copy())
    batch_norm(Tensor(rng.standard_normal((6, 3))), state, 3, "train")
    np.testing.assert_array_equal(state.scale[2].data, before[0])
    np.testing.assert_array_equal(state.running_mean[2], before[1])
    assert not np.array_equal(state.running_mean[3], before[1])


def test_batch_norm_eval_requires_statistics():
    state = BatchNormState(2, n_steps=1)
    with pytest.raises(RuntimeError):
        batch_norm(Tensor(np.ones((3, 2))), state, 1, "eval")


def test_batch_norm_train_needs_two_rows():
    with pytest.raises(ValueError):
        batch_norm(Tensor(np.ones((1, 2))), BatchNormState(2, 1), 1, "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batch_norm_finite_differences(mode):
    rng = np.random.default_rng(5)
    state = BatchNormState(3, n_steps=2)
    state.eval_mean[2] = rng.standard_normal(3)
    state.eval_var[2] = rng.uniform(0.5, 2.0, 3)
    state.scale[2].data = rng.uniform(0.5, 1.5, 3)
    state.shift[2].data = rng.standard_normal(3)
    x = leaf(rng, 7, 3)
    c = rng.standard_normal((7, 3))
    gamma, beta = state.scale[2], state.shift[2]

    def f():
        with no_grad():
            return float(np.sum(c * batch_norm(x, state, 2, mode).data))

    got = grads_of(lambda: (batch_norm(x, state, 2, mode) * c).sum(), x, gamma, beta)
    for g, t in zip(got, (x, gamma, beta)):
        assert rel_err(g, numerical_grad(f, t.data)) < 1e-6


# -- densities -------------------------------------------------------------------


def test_gaussian_log_density_constants():
    assert gaussian_log_density(Tensor([[0.0]]), [[0.0]], [[1.0]]).data[0] == pytest.approx(-0.9189385, abs=1e-7)
    assert gaussian_log_density(Tensor([[1.0]]), [[0.0]], [[1.0]]).data[0] == pytest.approx(-1.4189385, abs=1e-7)


def test_gaussian_log_density_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        gaussian_log_density(Tensor([[0.0]]), [[0.0]], [[0.0]])


def test_gaussian_log_density_gradients():
    rng = np.random.default_rng(6)
    x, mean, var = leaf(rng, 5, 3), leaf(rng, 5, 3), leaf(rng, 5, 3, positive=True)
    w = rng.standard_normal(5)

    def f():
        return float(np.sum(w * gaussian_log_density(x, mean, var).data))

    got = grads_of(lambda: (gaussian_log_density(x, mean, var) * w).sum(), x, mean, var)
    for g, t in zip(got, (x, mean, var)):
        assert rel_err(g, numerical_grad(f, t.data)) < 1e-5


def test_logaddexp_and_where_gradients():
    rng = np.random.default_rng(7)
    a, b = leaf(rng, 4, 2), leaf(rng, 4, 2)
    mask = rng.random((4, 2)) < 0.5

    def build():
        return (logaddexp(a, b) * 2.0 + where(mask, a, b)).sum()

    def f():
        return float(np.sum(2.0 * np.logaddexp(a.data, b.data) + np.where(mask, a.data, b.data)))

    got = grads_of(build, a, b)
    for g, t in zip(got, (a, b)):
        assert rel_err(g, numerical_grad(f, t.data)) < 1e-6


# -- reparameterized sampling ------------------------------------------------------


def test_reparam_tiny_variance_returns_mean():
    out = reparam_sample(np.random.default_rng(0), np.array([0.3, -2.0]), np.array([1e-30, 1e-30]))
    np.testing.assert_allclose(out.data, [0.3, -2.0], atol=1e-12)


def test_reparam_monte_carlo_mean():
    n, var = 100_000, 0.7
    out = reparam_sample(np.random.default_rng(1), np.full(n, 1.5), np.full(n, var)).data
    assert abs(out.mean() - 1.5) < 4 * np.sqrt(var / n)


def test_reparam_rejects_nonpositive_variance():
    with pytest.raises(ValueError):
        reparam_sample(np.random.default_rng(0), np.zeros(2), np.array([1.0, -1.0]))


def test_reparam_gradient_with_common_random_numbers():
    # E[sum sigmoid(mean + sqrt(var) eps)] estimated on one fixed batch of eps
    rng = np.random.default_rng(8)
    mean = Tensor(rng.standard_normal(3), requires_grad=True)
    var = Tensor(rng.uniform(0.2, 1.0, 3), requires_grad=True)
    eps = rng.standard_normal((2000, 3))

    def objective():
        s = mean.data + np.sqrt(var.data) * eps
        return float(np.mean(np.sum(1.0 / (1.0 + np.exp(-s)), axis=1)))

    g_mean, g_var = grads_of(lambda: sigmoid(reparam_sample(None, mean, var, noise=eps)).sum() * (1 / 2000), mean, var)
    assert rel_err(g_mean, numerical_grad(objective, mean.data)) < 1e-3
    assert rel_err(g_var, numerical_grad(objective, var.data)) < 1e-3


# -- backward --------------------------------------------------------------------


def test_backward_sum_of_affine_map():
    W = Parameter(np.zeros((3, 2)))
    x = np.array([[1.0, 2.0, 3.0]])
    with Tape() as tape:
        loss = linear(Tensor(x), W, Tensor(np.zeros(2))).sum()
    backward(tape, loss)
    np.testing.assert_array_equal(W.grad, np.outer(x[0], np.ones(2)))


def test_backward_accumulates_across_losses():
    W = Parameter(np.ones((2, 2)))
    x = Tensor(np.array([[1.0, -1.0]]))
    b = Tensor(np.zeros(2))
    for _ in range(2):
        with Tape() as tape:
            loss = linear(x, W, b).sum()
        backward(tape, loss)
    np.testing.assert_array_equal(W.grad, 2 * np.outer([1.0, -1.0], np.ones(2)))


def test_backward_rejects_non_scalar():
    W = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        out = linear(Tensor(np.ones((1, 2))), W, Tensor(np.zeros(2)))
    with pytest.raises(ValueError):
        backward(tape, out)


def test_no_grad_records_nothing():
    W = Parameter(np.ones((2, 2)))
    with Tape() as tape:
        with no_grad():
            linear(Tensor(np.ones((1, 2))), W, Tensor(np.zeros(2)))
    assert len(tape) == 0


def test_non_finite_output_is_an_error():
    with pytest.raises(FloatingPointError):
        linear(Tensor([[np.inf]]), Tensor([[1.0]]), Tensor([0.0]))


# -- invariants over many random instances ----------------------------------------

OPS = {
    "linear": lambda r: ((r.standard_normal((3, 4)), r.standard_normal((4, 2)), r.standard_normal(2)), linear),
    "relu": lambda r: ((r.standard_normal((3, 4)) + np.sign(r.standard_normal((3, 4))) * 0.05,), relu),
    "sigmoid": lambda r: ((3 * r.standard_normal((3, 4)),), sigmoid),
    "gaussian": lambda r: (
        (r.standard_normal((3, 4)), r.standard_normal((3, 4)), r.uniform(0.05, 2.0, (3, 4))),
        gaussian_log_density,
    ),
    "logaddexp": lambda r: ((r.standard_normal((3, 4)), r.standard_normal((3, 4))), logaddexp),
    "reparam": lambda r: (
        (r.standard_normal((3, 4)), r.uniform(0.05, 2.0, (3, 4))),
        lambda m, v: reparam_sample(None, m, v, noise=np.linspace(-1.5, 1.5, 12).reshape(3, 4)),
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_on_100_random_instances(name):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        arrays, op = OPS[name](rng)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out_shape = op(*leaves).shape
        c = rng.standard_normal(out_shape)

        def f():
            with no_grad():
                return float(np.sum(c * op(*leaves).data))

        got = grads_of(lambda: (op(*leaves) * c).sum(), *leaves)
        for g, t in zip(got, leaves):
            err = rel_err(g, numerical_grad(f, t.data))
            assert err < 1e-4, (name, seed, err)


def test_forward_backward_bit_identical():
    def run():
        rng = np.random.default_rng(11)
        W = Parameter(rng.standard_normal((3, 5)))
        b = Parameter(np.zeros(5))
        state = BatchNormState(5, 1)
        x = rng.standard_normal((6, 3))
        with Tape() as tape:
            h = relu(batch_norm(linear(Tensor(x), W, b), state, 1))
            s = reparam_sample(rng, sigmoid(h), sigmoid(h) * 0.1 + 1e-4)
            loss = gaussian_log_density(s, sigmoid(h), 0.5).sum()
        backward(tape, loss)
        return loss.data.copy(), W.grad.copy(), b.grad.copy()

    a, b = run(), run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
