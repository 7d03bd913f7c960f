"""Analytic backward entry point and the central-difference gradient oracle."""
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import SamplePair, stack_pairs
from .model import batch_loss, loss_and_grad

SMALL = 1e-8
EXHAUSTIVE_LIMIT = 64


def _batch_arrays(pairs):
    if isinstance(pairs, SamplePair):
        pairs = [pairs]
    return stack_pairs(pairs)


def backward(model, pairs, alpha=None):
    """Zero the gradient buffers, then fill them with d(mean loss)/d(param).

    ``pairs`` may be a single SamplePair or a sequence. Returns the loss.
    """
    cur, prev, labels = _batch_arrays(pairs)
    model.store.zero_grad()
    return loss_and_grad(model, cur, prev, labels, alpha)


@dataclass
class SlotCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    checked: int
    skipped: int
    passed: bool


@dataclass
class GradCheckReport:
    slots: list = field(default_factory=list)
    epsilon: float = 1e-5
    tolerance: float = 1e-4

    @property
    def passed(self):
        return all(s.passed for s in self.slots)

    def worst(self):
        return max(self.slots, key=lambda s: (not s.passed, s.max_rel_error))

    def format_text(self):
        w = max([len(s.name) for s in self.slots] + [4])
        lines = [f"{'slot':<{w}}  {'max_rel':>10}  {'max_abs':>10}  {'n':>4}  {'skip':>4}  ok"]
        for s in self.slots:
            lines.append(f"{s.name:<{w}}  {s.max_rel_error:10.3e}  {s.max_abs_error:10.3e}  "
                         f"{s.checked:4d}  {s.skipped:4d}  {'yes' if s.passed else 'NO'}")
        lines.append(f"epsilon={self.epsilon:g} tolerance={self.tolerance:g} "
                     f"result={'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)

    def csv_rows(self):
        rows = [["slot", "max_rel_error", "max_abs_error", "checked", "skipped", "pass"]]
        for s in self.slots:
            rows.append([s.name, repr(s.max_rel_error), repr(s.max_abs_error),
                         s.checked, s.skipped, int(s.passed)])
        return rows


def nudge_kinks(model, epsilon):
    """Push coefficient entries with ``0 < |p| < 10 eps`` out to ``10 eps``,
    sign preserved, so no probe crosses the l1 kink or the selection gate."""
    for name in ("construction.p_spa", "construction.p_tem"):
        if name not in model.store:
            continue
        p = model.store[name]
        small = (p != 0.0) & (np.abs(p) < 10 * epsilon)
        p[small] = np.sign(p[small]) * 10 * epsilon


def check_slots(loss_fn, store, epsilon=1e-5, tolerance=1e-4, skip=None,
                max_coords=EXHAUSTIVE_LIMIT, seed=0):
    """Compare the gradients already in ``store`` against central differences of ``loss_fn``.

    Every coordinate is probed for slots up to ``max_coords`` entries, a
    seeded sample of ``max_coords`` coordinates otherwise. ``skip(name, flat
    index)`` marks non-differentiable coordinates.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(epsilon=epsilon, tolerance=tolerance)
    for name in store.names():
        value = store[name]
        analytic = store.grad(name).copy()
        flat = value.reshape(-1)
        if flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        max_rel = max_abs = 0.0
        ok = True
        checked = skipped = 0
        for j in coords:
            if skip is not None and skip(name, j):
                skipped += 1
                continue
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = loss_fn()
            flat[j] = orig - epsilon
            f_minus = loss_fn()
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2 * epsilon)
            a = analytic.reshape(-1)[j]
            checked += 1
            if not (math.isfinite(numeric) and math.isfinite(a)):
                ok = False
                max_rel = max_abs = math.inf
                continue
            err = abs(a - numeric)
            scale = max(abs(a), abs(numeric))
            rel = 0.0 if scale == 0.0 else err / scale
            max_abs = max(max_abs, err)
            if scale < SMALL:
                ok = ok and err <= tolerance
            else:
                max_rel = max(max_rel, rel)
                ok = ok and rel <= tolerance
        report.slots.append(SlotCheck(name, max_rel, max_abs, checked, skipped, ok))
    return report


def gradcheck(model, pairs, alpha=None, epsilon=1e-5, tolerance=1e-4, seed=0):
    """Certify ``backward`` against central finite differences.

    Modifies ``model`` only through the kink nudge; exact-zero coefficients
    are reported as skipped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    cur, prev, labels = _batch_arrays(pairs)
    nudge_kinks(model, epsilon)
    model.store.zero_grad()
    loss_and_grad(model, cur, prev, labels, alpha)

    def loss_fn():
        return batch_loss(model, cur, prev, labels, alpha)

    def skip(name, j):
        return name.startswith("construction.p_") and model.store[name].reshape(-1)[j] == 0.0

    return check_slots(loss_fn, model.store, epsilon, tolerance, skip, seed=seed)
