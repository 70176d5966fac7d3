"""Finite-difference gradient verification against the analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .tensor import Tensor, backward, no_grad

# Parameters larger than this get a random coordinate subsample instead of a
# full sweep; keeps end-to-end model checks fast without losing coverage.
SUBSAMPLE_THRESHOLD = 512
SUBSAMPLE_COORDS = 64


@dataclass
class GradReport:
    """Per-parameter maximum relative error between analytic and
    central-finite-difference gradients.

    The relative error of a coordinate is |a - n| / max(|a|, |n|, 1.0), so
    coordinates whose true gradient is zero only contribute finite-difference
    noise, not spurious blowups.
    """

    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    checked_coords: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def format_table(self):
        lines = [f"{'parameter':<28} {'coords':>6} {'max rel err':>12}  status"]
        for name in self.errors:
            err = self.errors[name]
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"{name:<28} {self.checked_coords[name]:>6} {err:>12.3e}  {status}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"overall max {self.max_error:.3e} vs tolerance {self.tolerance:.1e}: {verdict}")
        return "\n".join(lines)


def _rel_err(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def grad_check(f, params, eps=1e-5, tolerance=1e-4, rng=None, full_sweep=False,
               threshold=SUBSAMPLE_THRESHOLD, sample=SUBSAMPLE_COORDS):
    """Compare f's analytic gradients to central finite differences.

    f is a zero-argument callable returning a scalar Tensor, deterministic
    given `params` (a mapping name -> leaf Tensor with requires_grad).
    Parameters larger than `threshold` coordinates get `sample` randomly
    chosen coordinates instead of a full sweep, unless full_sweep is set.
    """
    params = dict(params.items())
    rng = rng or np.random.RandomState(0)

    for p in params.values():
        p.zero_grad()
    loss = f()
    backward(loss)

    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite analytic gradient in {name}")
            analytic[name] = p.grad.copy()

    def eval_loss(where):
        with no_grad():
            value = f()
        v = value.data.reshape(-1)[0]
        if not np.isfinite(v):
            raise NumericError(f"non-finite loss while perturbing {where}")
        return float(v)

    report = GradReport(tolerance=tolerance)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n_coords = flat.size
        if not full_sweep and n_coords > threshold:
            coords = rng.choice(n_coords, size=min(sample, n_coords), replace=False)
        else:
            coords = range(n_coords)
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        count = 0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = eval_loss(name)
            flat[i] = orig - eps
            down = eval_loss(name)
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, _rel_err(a_flat[i], numeric))
            count += 1
        report.errors[name] = worst
        report.checked_coords[name] = count
    return report
