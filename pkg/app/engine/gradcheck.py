import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from app.engine.tensor import Tape, Tensor, backward, no_grad
from app.errors import NumericalError

logger = logging.getLogger(__name__)


@dataclass
class ParameterCheck:
    name: str
    max_rel_error: float
    worst_index: Tuple[int, ...]
    analytic: float
    numeric: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    checks: Dict[str, ParameterCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks.values())

    @property
    def worst(self) -> ParameterCheck:
        return max(self.checks.values(), key=lambda c: c.max_rel_error)

    def failures(self) -> list[ParameterCheck]:
        return [c for c in self.checks.values() if not c.passed]


def _value(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    value = out.item()
    if not np.isfinite(value):
        raise NumericalError(f"non-finite forward value {value} during gradient check")
    return value


def grad_check(
    f: Callable[[], Tensor],
    inputs: Union[Mapping[str, Tensor], Sequence[Tensor]],
    step: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-3,
) -> GradCheckReport:
    """Compare tape gradients of a scalar function with central finite differences.

    `f` takes no arguments and reads the tensors in `inputs`, which are perturbed
    in place one coordinate at a time. The error of a coordinate is
    |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
    """
    if isinstance(inputs, Mapping):
        named = dict(inputs)
    else:
        named = {t.name or f"input{i}": t for i, t in enumerate(inputs)}

    for tensor in named.values():
        tensor.zero_grad()
    with Tape():
        out = f()
        if not np.isfinite(out.data).all():
            raise NumericalError("non-finite forward value during gradient check")
        backward(out)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in named.items()
    }

    report = GradCheckReport(tolerance=tol)
    for name, tensor in named.items():
        worst = (0.0, (), 0.0, 0.0)
        for index in np.ndindex(tensor.shape):
            original = tensor.data[index]
            tensor.data[index] = original + step
            plus = _value(f)
            tensor.data[index] = original - step
            minus = _value(f)
            tensor.data[index] = original
            numeric = (plus - minus) / (2.0 * step)
            a = float(analytic[name][index])
            error = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            if error > worst[0] or not worst[1]:
                worst = (error, index, a, numeric)
        report.checks[name] = ParameterCheck(
            name=name,
            max_rel_error=worst[0],
            worst_index=tuple(int(i) for i in worst[1]),
            analytic=worst[2],
            numeric=worst[3],
            passed=worst[0] < tol,
        )
        if worst[0] >= tol:
            logger.warning(f"Gradient check failed for {name}: rel error {worst[0]:.3e} at {worst[1]}")
    for tensor in named.values():
        tensor.zero_grad()
    return report
