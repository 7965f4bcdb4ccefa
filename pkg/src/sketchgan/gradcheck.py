"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .tensor import Tape, Tensor, backward, no_grad, using_tape


def _scalarize(out: Tensor, probe: Optional[np.ndarray]) -> Tensor:
    if out.values.size == 1:
        return out
    return ops.sum(ops.mul(out, Tensor(probe)))


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
    seed: int = 0,
) -> float:
    """Max over elements of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` may close over other tensors; ``x`` is perturbed in place and
    restored.  Non-scalar outputs are reduced with a fixed random projection.
    ``indices`` (flat) restricts the check to a subset of elements.
    """
    was = x.requires_grad
    x.requires_grad = True
    saved_grad = x.grad
    x.grad = None
    tape = Tape()
    try:
        with using_tape(tape):
            out = f(x)
            probe = None
            if out.values.size != 1:
                probe = np.random.default_rng(seed).standard_normal(out.shape)
            backward(_scalarize(out, probe), tape)
        analytic = np.zeros(x.size) if x.grad is None else x.grad.reshape(-1).copy()

        flat = x.values.reshape(-1)
        idx = range(flat.size) if indices is None else indices

        def value() -> float:
            with no_grad():
                o = f(x)
                return float(o.values.sum() if probe is None else (o.values * probe).sum())

        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(analytic[i] - num) / max(1.0, abs(analytic[i]))
            worst = max(worst, err)
        return worst
    finally:
        x.requires_grad = was
        x.grad = saved_grad
