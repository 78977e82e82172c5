"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NondeterministicError(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    errors: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def passed(self):
        return all(err < self.tol for err in self.errors.values())

    @property
    def worst(self):
        return max(self.errors.values(), default=0.0)

    def __str__(self):
        lines = []
        for name, err in self.errors.items():
            status = "ok  " if err < self.tol else "FAIL"
            lines.append(f"{status} {name:<28s} rel_err={err:.3e}")
        lines.append(f"{'PASS' if self.passed else 'FAIL'} worst={self.worst:.3e} tol={self.tol:g}")
        return "\n".join(lines)


def relative_error(analytic, numeric, floor=1e-10):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def _value(out):
    if isinstance(out, Tensor):
        return out.data.item()
    return float(out)


def numeric_gradient(f, param, h=1e-5):
    if not param.data.flags.c_contiguous:
        param.data = param.data.copy()
    flat = param.data.reshape(-1)  # a view, so edits reach f()
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _value(f())
        flat[i] = orig - h
        fm = _value(f())
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(param.shape)


def finite_diff_check(f, params, h=1e-5, tol=1e-4):
    """Compare backprop gradients of ``f()`` with central differences.

    ``params`` is a dict name -> Tensor (or a list, named by position). ``f``
    must rebuild the graph from the current parameter values on every call.
    """
    if not isinstance(params, dict):
        params = {f"p{i}": p for i, p in enumerate(params)}
    first, second = _value(f()), _value(f())
    if first != second:
        raise NondeterministicError(f"f() gave {first!r} then {second!r}")
    for p in params.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    report = GradCheckReport(tol=tol)
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        report.errors[name] = relative_error(analytic, numeric_gradient(f, p, h))
    return report
