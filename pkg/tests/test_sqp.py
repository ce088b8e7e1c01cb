"""Hand-solvable NLP fixtures for the SQP solver."""

import numpy as np
import pytest

from gasgrid.sqp import ConstraintEval, NLPResult, SQPOptions, sqp_solve


def quadratic(Q, c):
    def f(x):
        return 0.5 * x @ Q @ x + c @ x, Q @ x + c

    return f


def linear_constraints(A, b):
    """g(x) = A x - b >= 0."""
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)

    def cons(x):
        return ConstraintEval(A @ x - b, lambda idx: A[idx])

    return cons


class TestUnconstrained:
    def test_convex_quadratic_in_three_iterations(self):
        Q = np.array([[2.0, 0.0], [0.0, 8.0]])
        c = np.array([-2.0, -8.0])
        res = sqp_solve(quadratic(Q, c), None, np.array([5.0, -3.0]))
        assert res.converged
        assert res.iterations <= 3
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-8)

    def test_rosenbrock(self):
        def f(x):
            v = (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2
            g = np.array(
                [-2 * (1 - x[0]) - 400 * x[0] * (x[1] - x[0] ** 2), 200 * (x[1] - x[0] ** 2)]
            )
            return v, g

        res = sqp_solve(f, None, np.array([-1.2, 1.0]), SQPOptions(epsx=1e-10, max_iter=300))
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 1.0], atol=1e-5)


class TestConstrained:
    def test_kkt_example(self):
        """min x1^2 + x2^2 s.t. x1 + x2 >= 1 has the hand solution (0.5, 0.5)."""
        res = sqp_solve(
            quadratic(2 * np.eye(2), np.zeros(2)),
            linear_constraints([[1.0, 1.0]], [1.0]),
            np.array([2.0, 0.0]),
            SQPOptions(epsx=1e-12),
        )
        assert res.converged
        np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-8)
        assert res.max_violation <= 1e-10

    def test_inactive_constraint_ignored(self):
        res = sqp_solve(
            quadratic(2 * np.eye(2), np.array([-2.0, -4.0])),
            linear_constraints([[1.0, 0.0]], [-10.0]),  # x1 >= -10, never active
            np.array([0.0, 0.0]),
        )
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 2.0], atol=1e-7)

    def test_box_bounds_via_rows(self):
        # min (x-3)^2 s.t. 0 <= x <= 1 -> x = 1
        res = sqp_solve(
            quadratic(2 * np.eye(1), np.array([-6.0])),
            linear_constraints([[1.0], [-1.0]], [0.0, -1.0]),
            np.array([0.5]),
        )
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0], atol=1e-8)

    def test_wrong_sign_multiplier_dropped(self):
        # min (x1-2)^2 + x2^2 s.t. x1 <= 1 and x1 >= -5; optimum on x1 = 1
        res = sqp_solve(
            quadratic(2 * np.eye(2), np.array([-4.0, 0.0])),
            linear_constraints([[-1.0, 0.0], [1.0, 0.0]], [-1.0, -5.0]),
            np.array([1.0, 1.0]),  # both rows near-active at start for x1 = 1
        )
        assert res.converged
        np.testing.assert_allclose(res.x, [1.0, 0.0], atol=1e-7)

    def test_merit_non_increasing(self):
        res = sqp_solve(
            quadratic(2 * np.eye(2), np.zeros(2)),
            linear_constraints([[1.0, 1.0]], [1.0]),
            np.array([4.0, -1.0]),
        )
        assert res.converged
        diffs = np.diff(res.merit_history)
        assert np.all(diffs <= 1e-12)

    def test_infeasible_bounds_detected(self):
        # x >= 1 and x <= 0 cannot both hold
        res = sqp_solve(
            quadratic(2 * np.eye(1), np.zeros(1)),
            linear_constraints([[1.0], [-1.0]], [1.0, 0.0]),
            np.array([0.5]),
            SQPOptions(max_iter=50),
        )
        assert res.status == "infeasible"
        assert res.max_violation > 1e-6

    def test_scaling_invariance_of_argmin(self):
        cons = linear_constraints([[1.0, 1.0]], [1.0])
        x0 = np.array([2.0, 0.5])
        res1 = sqp_solve(quadratic(2 * np.eye(2), np.zeros(2)), cons, x0, SQPOptions(epsx=1e-12))

        def scaled(x):
            f, g = quadratic(2 * np.eye(2), np.zeros(2))(x)
            return 100.0 * f, 100.0 * g

        res2 = sqp_solve(scaled, cons, x0, SQPOptions(epsx=1e-12))
        assert res1.converged and res2.converged
        np.testing.assert_allclose(res1.x, res2.x, atol=5e-4)

    def test_gradient_check_catches_bad_gradient(self):
        def bad(x):
            return float(x @ x), 3.0 * x  # wrong gradient

        with pytest.raises(ValueError, match="FD check"):
            sqp_solve(bad, None, np.array([1.0, 2.0]), SQPOptions(gradient_check=True))
