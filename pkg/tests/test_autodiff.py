import numpy as np
import pytest

from specfuse.autodiff import Param, Tape, backward, grad_check
from specfuse.linalg import CsrMatrix

RNG = np.random.default_rng(42)


def check_grad(build, params, tol=1e-4):
    err = grad_check(build, params)
    assert err < tol, f"gradient mismatch {err:.3e}"


class TestForwardExamples:
    def test_relu(self):
        t = Tape()
        assert np.array_equal(t.relu(t.leaf([[-1.0, 2.0]])).value, [[0.0, 2.0]])

    def test_log_softmax_uniform_row(self):
        t = Tape()
        out = t.log_softmax_rows(t.leaf([[0.0, 0.0]]))
        assert np.allclose(out.value, -np.log(2.0))

    def test_concat_cols_layout(self):
        t = Tape()
        a = t.leaf(np.ones((2, 3)))
        b = t.leaf(2 * np.ones((2, 5)))
        out = t.concat_cols(a, b)
        assert out.shape == (2, 8)
        assert np.array_equal(out.value[:, :3], np.ones((2, 3)))
        assert np.array_equal(out.value[:, 3:], 2 * np.ones((2, 5)))

    def test_mean_pair(self):
        t = Tape()
        out = t.mean_pair(t.leaf([[2.0]]), t.leaf([[4.0]]))
        assert out.value[0, 0] == 3.0

    def test_sigmoid_midpoint(self):
        t = Tape()
        assert t.sigmoid(t.leaf([[0.0]])).value[0, 0] == 0.5

    def test_shape_errors_at_construction(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.add(t.leaf(np.zeros((2, 2))), t.leaf(np.zeros((3, 2))))
        with pytest.raises(ValueError):
            t.matmul(t.leaf(np.zeros((2, 2))), t.leaf(np.zeros((3, 2))))
        with pytest.raises(ValueError):
            t.scale_by(t.leaf(np.zeros((2, 2))), t.leaf(np.zeros((2, 2))))


class TestNllLoss:
    def test_perfect_prediction_zero_loss(self):
        t = Tape()
        logp = np.full((3, 3), -50.0)
        np.fill_diagonal(logp, 0.0)
        loss = t.nll_loss(t.leaf(logp), np.array([0, 1, 2]), np.ones(3, bool))
        assert loss.value[0, 0] == 0.0

    def test_uniform_loss_is_log_c(self):
        t = Tape()
        logp = np.full((5, 4), -np.log(4.0))
        loss = t.nll_loss(t.leaf(logp), np.zeros(5, dtype=int), np.ones(5, bool))
        assert loss.value[0, 0] == pytest.approx(np.log(4.0), rel=1e-12)

    def test_random_instance_matches_direct_sum(self):
        logp = RNG.standard_normal((6, 3))
        labels = RNG.integers(0, 3, size=6)
        mask = np.array([True, False, True, True, False, True])
        t = Tape()
        loss = t.nll_loss(t.leaf(logp), labels, mask)
        idx = np.flatnonzero(mask)
        expected = -sum(logp[i, labels[i]] for i in idx) / len(idx)
        assert abs(loss.value[0, 0] - expected) < 1e-12

    def test_empty_mask_raises(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.nll_loss(t.leaf(np.zeros((2, 2))), np.zeros(2, int), np.zeros(2, bool))


class TestBackward:
    def test_sum_of_param_grad_is_ones(self):
        t = Tape()
        w = Param("w", np.ones((2, 2)))
        loss = t.sum_all(t.param(w))
        backward(loss, t)
        assert np.array_equal(w.grad, np.ones((2, 2)))

    def test_every_primitive_matches_finite_differences(self):
        a_csr = CsrMatrix.from_dense(RNG.random((4, 4)) * (RNG.random((4, 4)) < 0.6))
        x = RNG.standard_normal((4, 3))
        labels = RNG.integers(0, 2, size=4)
        mask = np.ones(4, bool)
        w = Param("w", RNG.standard_normal((3, 2)))
        s = Param("s", np.array([[0.4]]))

        check_grad(
            lambda t: t.nll_loss(
                t.log_softmax_rows(t.matmul(t.spmm(a_csr, t.leaf(x)), t.param(w))), labels, mask
            ),
            [w],
        )
        check_grad(lambda t: t.sum_all(t.relu(t.matmul(t.leaf(x), t.param(w)))), [w])
        check_grad(lambda t: t.sum_all(t.sigmoid(t.param(w))), [w])
        check_grad(
            lambda t: t.sum_all(t.concat_cols(t.param(w), t.scale(t.param(w), -2.0))), [w]
        )
        check_grad(
            lambda t: t.sum_all(
                t.scale_by(t.param(w), t.reciprocal(t.affine(t.param(s), 2.0, 0.3)))
            ),
            [w, s],
        )
        check_grad(lambda t: t.sum_all(t.mean_pair(t.param(w), t.affine(t.param(w), 0.5, 1.0))), [w])

    def test_fixed_mask_dropout_gradient(self):
        w = Param("w", RNG.standard_normal((4, 4)))

        def build(t):
            rng = np.random.default_rng(7)  # same mask every rebuild
            return t.sum_all(t.dropout(t.param(w), 0.5, rng, train=True))

        check_grad(build, [w])

    def test_unreachable_params_get_no_gradient_even_with_nan(self):
        t = Tape()
        alive = Param("alive", np.ones((2, 2)))
        dead = Param("dead", np.full((2, 2), np.nan))
        node_alive = t.param(alive)
        node_dead = t.param(dead)
        t.matmul(node_dead, node_dead)  # poisoned values, disconnected from loss
        loss = t.sum_all(node_alive)
        backward(loss, t)
        assert np.array_equal(alive.grad, np.ones((2, 2)))
        assert dead.grad is None

    def test_nan_loss_poisons_every_reachable_gradient(self):
        t = Tape()
        w = Param("w", np.ones((2, 2)))
        poisoned = t.add(t.param(w), t.leaf([[np.nan, 0.0], [0.0, 0.0]]))
        loss = t.sum_all(poisoned)
        backward(loss, t)
        # NaN reached the loss, and grads flow back as NaN times structure
        assert not np.isfinite(loss.value[0, 0])


class TestDropout:
    def test_eval_mode_is_identity(self):
        t = Tape()
        x = t.leaf(RNG.standard_normal((3, 3)))
        assert t.dropout(x, 0.5, None, train=False) is x

    def test_train_expectation_matches_identity(self):
        t = Tape()
        x = t.leaf(np.ones((100, 100)))
        out = t.dropout(x, 0.5, np.random.default_rng(0), train=True)
        assert abs(float(out.value.mean()) - 1.0) < 1e-2  # 10^4 mask entries

    def test_rate_validation(self):
        t = Tape()
        with pytest.raises(ValueError):
            t.dropout(t.leaf(np.ones((2, 2))), 1.0, np.random.default_rng(0), train=True)


class TestGradCheck:
    def test_linear_map_is_exact(self):
        w = Param("w", RNG.standard_normal((3, 3)))
        b = RNG.standard_normal((3, 3))
        err = grad_check(lambda t: t.sum_all(t.matmul(t.param(w), t.leaf(b))), [w])
        assert err < 1e-10

    def test_nonfinite_forward_rejected(self):
        w = Param("w", np.array([[np.inf]]))
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum_all(t.param(w)), [w])
