"""Central finite-difference gradient oracle shared by the test suite.

The oracle only ever calls the forward pass (no tape), so it is independent
of every analytic backward rule it is used to check.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from kban.tensor import Tape, Tensor

H_DEFAULT = 1e-5
TOL_DEFAULT = 1e-4


def numeric_grad_entry(f: Callable[[], Tensor], t: Tensor, flat_index: int, h: float = H_DEFAULT) -> float:
    """d f / d t[flat_index] by central differences, forward evaluations only."""
    flat = t.data.reshape(-1)
    old = flat[flat_index]
    flat[flat_index] = old + h
    up = f().item()
    flat[flat_index] = old - h
    down = f().item()
    flat[flat_index] = old
    return (up - down) / (2.0 * h)


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def check_gradients(
    f: Callable[[], Tensor],
    tensors: Sequence[tuple[str, Tensor]],
    h: float = H_DEFAULT,
    tol: float = TOL_DEFAULT,
    sample_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients of the scalar f() against the oracle.

    Every tensor gets checked; with ``sample_per_tensor`` set, only that many
    (seeded) coordinates per tensor are compared, which keeps full-model
    checks fast while still touching every parameter tensor. Returns the
    worst relative error seen and asserts it is below ``tol``.
    """
    for _, t in tensors:
        t.grad = None
    with Tape() as tape:
        out = f()
        tape.backward(out)
    worst = 0.0
    for name, t in tensors:
        assert t.grad is not None, f"no gradient reached {name}"
        n_entries = t.data.size
        if sample_per_tensor is None or sample_per_tensor >= n_entries:
            indices = range(n_entries)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            indices = gen.choice(n_entries, size=sample_per_tensor, replace=False)
        analytic_flat = t.grad.reshape(-1)
        for i in indices:
            numeric = numeric_grad_entry(f, t, int(i), h=h)
            err = relative_error(float(analytic_flat[int(i)]), numeric)
            worst = max(worst, err)
            assert err < tol, (
                f"gradient mismatch at {name}[{i}]: analytic={analytic_flat[int(i)]:.10g} "
                f"numeric={numeric:.10g} rel_err={err:.3g}"
            )
    return worst
