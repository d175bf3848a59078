"""Finite-difference verification of analytic gradients.

The check runs on a float64 copy of the network so the comparison is limited
by the central-difference step, not by single-precision accumulation.

ReLU, pooling and ranking make the loss piecewise smooth: it is
differentiable only where the ReLU masks, the pool argmax pattern and the
sort permutations are all locally constant. Inputs must therefore have
pairwise-distinct values within each channel, and each probed coordinate is
additionally verified to keep the selection pattern constant across its
[x-h, x+h] interval; coordinates that straddle a selection boundary have no
two-sided derivative and are resampled (and counted) rather than compared.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MaxPool2x2, Rank, ReLU, softmax_xent

# Coordinates whose analytic and numeric gradients are both below this scale
# are compared against it instead of their own magnitude; keeps difference
# noise on near-zero gradients from dominating the report.
_REL_FLOOR = 1e-4


@dataclass
class TensorCheck:
    tensor: str
    n_checked: int
    n_nonsmooth: int
    max_rel_err: float
    worst_coord: int
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    checks: list[TensorCheck]

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def failures(self) -> list[TensorCheck]:
        return [c for c in self.checks if c.max_rel_err > self.tolerance]

    def summary(self) -> str:
        lines = [f"grad check: step={self.step:g} tolerance={self.tolerance:g}"]
        for c in self.checks:
            flag = "ok " if c.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"  [{flag}] {c.tensor:<12} coords={c.n_checked:<6} "
                f"nonsmooth={c.n_nonsmooth:<4} max_rel_err={c.max_rel_err:.3e} "
                f"(analytic={c.analytic:+.6e} numeric={c.numeric:+.6e})")
        return "\n".join(lines)


def _selection_state(model) -> tuple:
    """ReLU masks, pool argmax patterns and sort permutations after a forward.

    These three selections define the linear region the loss is smooth on;
    the two-sided derivative exists only while all of them stay constant.
    """
    state = []
    for layer in model.layers:
        if isinstance(layer, MaxPool2x2):
            state.append(layer.argmax.copy())
        elif isinstance(layer, Rank):
            state.append(layer.perm.copy())
        elif isinstance(layer, ReLU):
            state.append(layer._mask.copy())
    return tuple(state)


def _same_selection(a: tuple, b: tuple) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(model, patch: np.ndarray, tolerance: float = 1e-3, *,
               step: float = 1e-4, true_bin: int = 1,
               max_coords_per_tensor: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    The scalar loss is the softmax cross-entropy of the network output
    against `true_bin`. Every parameter tensor and the input are covered;
    when `max_coords_per_tensor` is set, a seeded random subset of
    coordinates per tensor is probed instead of all of them (the exhaustive
    sweep over the full network takes minutes). Failures are reported, not
    raised.
    """
    m = model.astype(np.float64)
    x = np.array(patch, dtype=np.float64)
    xb = x[None]

    logits = m.forward(xb)
    _, dlogits = softmax_xent(logits[0], true_bin)
    gx = m.backward(dlogits[None])[0]

    targets = [("input", x, gx)]
    for layer in m.layers:
        for pname, param, grad in layer.param_grad_items():
            targets.append((f"{layer.name}.{pname}", param, grad))

    rng = np.random.default_rng(seed)
    checks = []
    for tname, arr, grad in targets:
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            pool = rng.permutation(n)
            quota = max_coords_per_tensor
        else:
            pool = np.arange(n)
            quota = n
        worst = TensorCheck(tname, 0, 0, 0.0, -1, 0.0, 0.0)
        for i in pool:
            if worst.n_checked >= quota:
                break
            orig = flat[i]
            flat[i] = orig + step
            lp = softmax_xent(m.forward(xb)[0], true_bin)[0]
            sel_plus = _selection_state(m)
            flat[i] = orig - step
            lm = softmax_xent(m.forward(xb)[0], true_bin)[0]
            sel_minus = _selection_state(m)
            flat[i] = orig
            if not _same_selection(sel_plus, sel_minus):
                worst.n_nonsmooth += 1
                continue
            numeric = (lp - lm) / (2.0 * step)
            analytic = gflat[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), _REL_FLOOR)
            worst.n_checked += 1
            if rel > worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_coord = int(i)
                worst.analytic = float(analytic)
                worst.numeric = float(numeric)
        checks.append(worst)
    return GradCheckReport(tolerance=tolerance, step=step, checks=checks)
