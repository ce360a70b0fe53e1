import numpy as np
import pytest

from app.engine.gradcheck import grad_check
from app.engine.tensor import Tape, Tensor, as_tensor, backward, make_op
from app.errors import NumericalError


def test_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True, name="x")
    with Tape():
        backward((x * x).sum())
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    x.zero_grad()

    report = grad_check(lambda: (x * x).sum(), {"x": x})
    assert report.passed
    assert report.checks["x"].max_rel_error < 1e-8


def test_wrong_backward_rule_is_caught():
    def bad_square(t):
        t = as_tensor(t)
        # deliberately wrong: d(x^2)/dx reported as 3x
        return make_op("bad_square", t.data ** 2, (t,), lambda g: (3.0 * t.data * g,))

    x = Tensor([0.5, -1.5], requires_grad=True, name="x")
    report = grad_check(lambda: bad_square(x).sum(), [x])
    assert not report.passed
    assert [c.name for c in report.failures()] == ["x"]
    assert report.worst.max_rel_error > 0.3


def test_non_finite_forward_raises():
    x = Tensor([-1.0], requires_grad=True, name="x")
    with np.errstate(invalid="ignore"):
        with pytest.raises(NumericalError):
            grad_check(lambda: x.log().sum(), [x])


def test_inputs_are_restored_and_grads_cleared():
    gen = np.random.default_rng(0)
    start = gen.normal(size=(3, 2))
    x = Tensor(start.copy(), requires_grad=True, name="x")
    grad_check(lambda: x.exp().sum(), [x])
    np.testing.assert_array_equal(x.data, start)
    assert x.grad is None


def test_report_names_worst_coordinate():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True, name="w")
    report = grad_check(lambda: (x * x * x).sum(), [x])
    check = report.checks["w"]
    assert check.passed
    assert len(check.worst_index) == 2
    assert check.analytic == pytest.approx(3.0 * x.data[check.worst_index] ** 2)
