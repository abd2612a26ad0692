"""Tests for the MLP policy: evaluation, VJPs, init, and checkpoints."""

import numpy as np
import pytest

from sdecontrol.errors import ConfigurationError
from sdecontrol.policy import (
    Activation,
    MlpPolicy,
    init_params,
    load_policy,
    save_policy,
)


def zero_policy(layer_dims, **kw):
    weights = [np.zeros((o, i)) for i, o in zip(layer_dims[:-1], layer_dims[1:])]
    biases = [np.zeros(o) for o in layer_dims[1:]]
    return MlpPolicy(weights, biases, **kw)


def reference_eval(policy, x):
    """Independent re-implementation of the forward pass."""
    a = np.asarray(x, dtype=float)
    last = len(policy.weights) - 1
    for k, (w, b) in enumerate(zip(policy.weights, policy.biases)):
        z = w @ a + b
        if k == last:
            a = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)  # softplus
        else:
            a = np.tanh(z)
    return a


class TestActivation:
    def test_unknown_tag(self):
        with pytest.raises(ConfigurationError):
            Activation("relu")

    @pytest.mark.parametrize("tag", ["softplus", "tanh", "identity"])
    def test_derivative_matches_fd(self, tag):
        act = Activation(tag)
        xs = np.linspace(-4.0, 4.0, 41)
        h = 1e-6
        fd = (act.value(xs + h) - act.value(xs - h)) / (2 * h)
        assert np.allclose(act.deriv(xs), fd, atol=1e-7)

    def test_softplus_at_zero(self):
        assert Activation("softplus").value(0.0) == pytest.approx(np.log(2.0))

    def test_softplus_stable_at_extremes(self):
        act = Activation("softplus")
        assert np.isfinite(act.value(1000.0))
        assert act.value(-1000.0) == 0.0
        assert act.deriv(1000.0) == pytest.approx(1.0)


class TestEval:
    def test_zero_network_softplus_ln2(self):
        policy = zero_policy([2, 8, 2])
        out = policy.eval(np.array([0.3, -1.2]))
        assert np.allclose(out, np.log(2.0))

    def test_identity_single_layer(self):
        policy = MlpPolicy(
            [np.eye(3)], [np.zeros(3)], output_activation="identity"
        )
        x = np.array([1.0, -2.0, 0.5])
        assert np.allclose(policy.eval(x), x)

    def test_matches_reference_implementation(self):
        policy = init_params([2, 32, 32, 32, 2], seed=5)
        rng = np.random.Generator(np.random.Philox(key=1))
        for _ in range(10):
            x = rng.standard_normal(2)
            assert np.allclose(policy.eval(x), reference_eval(policy, x), atol=1e-12)

    def test_batched_eval(self):
        policy = init_params([2, 8, 2], seed=0)
        xs = np.random.Generator(np.random.Philox(key=2)).standard_normal((7, 3, 2))
        out = policy.eval(xs)
        assert out.shape == (7, 3, 2)
        assert np.allclose(out[4, 1], policy.eval(xs[4, 1]), atol=1e-14)

    def test_softplus_outputs_positive(self):
        policy = init_params([2, 16, 2], seed=9)
        xs = np.random.Generator(np.random.Philox(key=3)).standard_normal((100, 2)) * 50
        assert np.all(policy.eval(xs) > 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            init_params([2, 4, 1], seed=0).eval(np.zeros(3))

    def test_with_time_appends_coordinate(self):
        policy = init_params([3, 4, 1], seed=0, with_time=True)
        x = np.array([1.0, 2.0])
        direct = policy.eval(np.array([1.0, 2.0, 0.7]))
        assert np.allclose(policy.control(0.7, x), direct)


class TestVjpInput:
    def test_identity_network(self):
        policy = MlpPolicy([np.eye(2)], [np.zeros(2)], output_activation="identity")
        cot = np.array([0.3, -0.7])
        assert np.allclose(policy.vjp_input(np.array([1.0, 2.0]), cot), cot)

    def test_zero_cotangent(self):
        policy = init_params([2, 8, 2], seed=0)
        out = policy.vjp_input(np.array([0.5, 0.5]), np.zeros(2))
        assert np.all(out == 0.0)

    def test_matches_finite_differences(self):
        policy = init_params([3, 16, 2], seed=4)
        rng = np.random.Generator(np.random.Philox(key=5))
        x = rng.standard_normal(3)
        cot = rng.standard_normal(2)
        analytic = policy.vjp_input(x, cot)
        h = 1e-6
        for j in range(3):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = cot @ (policy.eval(xp) - policy.eval(xm)) / (2 * h)
            assert abs(analytic[j] - fd) < 1e-5 * max(1.0, abs(fd))


class TestVjpParams:
    def test_zero_cotangent(self):
        policy = init_params([2, 8, 2], seed=0)
        out = policy.vjp_params(np.array([0.5, 0.5]), np.zeros(2))
        assert out.shape == (policy.n_params,)
        assert np.all(out == 0.0)

    def test_affine_layer_closed_form(self):
        policy = MlpPolicy(
            [np.array([[1.0, 2.0], [3.0, 4.0]])],
            [np.zeros(2)],
            output_activation="identity",
        )
        x = np.array([0.5, -1.0])
        cot = np.array([2.0, 3.0])
        grad = policy.vjp_params(x, cot)
        # layout: A row-major then b; dJ/dA = outer(cot, x), dJ/db = cot
        expected = np.concatenate([np.outer(cot, x).ravel(), cot])
        assert np.allclose(grad, expected, atol=1e-14)

    def test_matches_finite_differences(self):
        policy = init_params([2, 8, 2], seed=6)
        rng = np.random.Generator(np.random.Philox(key=7))
        x = rng.standard_normal(2)
        cot = rng.standard_normal(2)
        analytic = policy.vjp_params(x, cot)
        theta = policy.get_params()
        h = 1e-6
        for j in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            policy.set_params(tp)
            up = policy.eval(x)
            policy.set_params(tm)
            um = policy.eval(x)
            fd = cot @ (up - um) / (2 * h)
            assert abs(analytic[j] - fd) < 1e-5 * max(1.0, abs(fd))
        policy.set_params(theta)

    def test_vjp_jvp_duality(self):
        policy = init_params([3, 12, 2], seed=8)
        rng = np.random.Generator(np.random.Philox(key=9))
        for _ in range(5):
            x = rng.standard_normal(3)
            v = rng.standard_normal(3)
            w = rng.standard_normal(2)
            lhs = policy.vjp_input(x, w) @ v
            h = 1e-6
            jvp = (policy.eval(x + h * v) - policy.eval(x - h * v)) / (2 * h)
            rhs = w @ jvp
            assert abs(lhs - rhs) < 1e-6 * max(1.0, abs(rhs))

    def test_jacobians_consistent_with_vjps(self):
        policy = init_params([2, 6, 2], seed=10)
        x = np.array([0.4, -0.9])
        ji = policy.jacobian_input(x)
        jp = policy.jacobian_params(x)
        for cot in np.eye(2):
            assert np.allclose(cot @ ji, policy.vjp_input(x, cot), atol=1e-13)
            assert np.allclose(cot @ jp, policy.vjp_params(x, cot), atol=1e-13)


class TestInitParams:
    def test_deterministic(self):
        a = init_params([2, 32, 2], seed=3)
        b = init_params([2, 32, 2], seed=3)
        assert np.array_equal(a.get_params(), b.get_params())

    def test_parameter_count(self):
        policy = init_params([2, 32, 32, 32, 2], seed=0)
        assert policy.n_params == 2274
        assert policy.get_params().size == 2274

    def test_biases_zero(self):
        policy = init_params([2, 16, 3], seed=1)
        for b in policy.biases:
            assert np.all(b == 0.0)

    def test_weight_scale(self):
        policy = init_params([100, 50], seed=2)
        bound = 1.0 / np.sqrt(100)
        assert np.all(np.abs(policy.weights[0]) <= bound)

    def test_invalid_dims(self):
        with pytest.raises(ConfigurationError):
            init_params([2], seed=0)
        with pytest.raises(ConfigurationError):
            init_params([2, 0, 1], seed=0)

    def test_flatten_roundtrip(self):
        policy = init_params([2, 8, 3], seed=4)
        theta = policy.get_params()
        policy.set_params(theta)
        assert np.array_equal(policy.get_params(), theta)

    def test_set_params_wrong_length(self):
        policy = init_params([2, 4, 1], seed=0)
        with pytest.raises(ConfigurationError):
            policy.set_params(np.zeros(policy.n_params + 1))


class TestCheckpoint:
    def test_round_trip_bit_equality(self, tmp_path):
        policy = init_params([2, 32, 32, 32, 2], seed=7)
        policy.set_params(policy.get_params() * 1.2345)
        path = tmp_path / "policy.txt"
        save_policy(policy, path)
        loaded = load_policy(path)
        assert loaded.layer_dims == policy.layer_dims
        assert loaded.hidden.tag == policy.hidden.tag
        assert loaded.output.tag == policy.output.tag
        assert np.array_equal(loaded.get_params(), policy.get_params())

    def test_rejects_non_checkpoint(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("not a checkpoint\n")
        with pytest.raises(ConfigurationError):
            load_policy(path)

    def test_rejects_truncated(self, tmp_path):
        policy = init_params([2, 4, 1], seed=0)
        path = tmp_path / "policy.txt"
        save_policy(policy, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]) + "\n")
        with pytest.raises(ConfigurationError):
            load_policy(path)
