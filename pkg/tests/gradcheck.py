"""Finite-difference gradient checking shared by the test modules.

Compares the analytic directional derivative <grad, v> against central
differences (f(x+hv) - f(x-hv)) / 2h for random unit directions v. The
numeric side never touches the autodiff path.
"""

import numpy as np

from alikekit.tensorgraph import Tensor


def directional_check(f, arrays, rng, h=1e-5):
    """Return (analytic, numeric) directional derivatives of scalar f.

    f maps a list of Tensors to a scalar Tensor; arrays are the float64
    base points. One random direction is drawn per array.
    """
    dirs = []
    for a in arrays:
        v = rng.standard_normal(a.shape)
        n = np.linalg.norm(v)
        dirs.append(v / n if n > 0 else v)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = f(leaves)
    out.backward()
    analytic = sum(float(np.sum(t.grad * v)) for t, v in zip(leaves, dirs)
                   if t.grad is not None)

    def val(eps):
        return f([Tensor(a + eps * v) for a, v in zip(arrays, dirs)]).item()

    numeric = (val(h) - val(-h)) / (2.0 * h)
    return analytic, numeric


def assert_grad_close(f, arrays, rng, h=1e-5, rtol=1e-5, atol=1e-8):
    analytic, numeric = directional_check(f, arrays, rng, h)
    denom = max(abs(analytic), abs(numeric), atol)
    assert abs(analytic - numeric) / denom < rtol, (
        f"gradient mismatch: analytic={analytic!r} numeric={numeric!r}")
