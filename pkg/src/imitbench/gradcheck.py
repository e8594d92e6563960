"""Central-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tape


class NonFiniteLoss(FloatingPointError):
    """Loss evaluated to nan/inf at a perturbed point."""


def finite_diff_check(
    loss_fn: Callable[[list], tape.Tensor],
    params: Sequence[np.ndarray],
    h: float = 1e-6,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``loss_fn`` maps a list of leaf Tensors (one per parameter array) to a
    scalar Tensor.  Every parameter entry is perturbed by +-h; the relative
    error for an entry uses denominator max(1, |central|).  The caller is
    responsible for evaluating at a point where the loss is twice
    differentiable (kinks invalidate the check).

    Raises NonFiniteLoss if any evaluation is non-finite.
    """
    if h <= 0.0:
        raise ValueError("h must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]

    leaves = [tape.leaf(p) for p in params]
    root = loss_fn(leaves)
    if not np.isfinite(root.value):
        raise NonFiniteLoss("loss is non-finite at the base point")
    analytic = tape.gradients(root, leaves)

    def eval_at(values: list) -> float:
        out = loss_fn([tape.const(v) for v in values]).value
        if not np.isfinite(out):
            raise NonFiniteLoss("loss is non-finite at a perturbed point")
        return float(out)

    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            work = [q if i != k else q.copy() for i, q in enumerate(params)]
            wflat = work[k].reshape(-1)
            wflat[j] = orig + h
            up = eval_at(work)
            wflat[j] = orig - h
            down = eval_at(work)
            central = (up - down) / (2.0 * h)
            a = analytic[k].reshape(-1)[j]
            err = abs(a - central) / max(1.0, abs(central))
            if err > worst:
                worst = err
    return worst
