"""Central finite-difference gradient verification."""
from __future__ import annotations

import numpy as np

from .tensor import no_grad


def numerical_grad(loss_fn, param, h=1e-5, coords=None, richardson=False):
    """d loss / d param by central differences, one coordinate at a time.

    ``loss_fn`` is re-evaluated with ``param.data`` perturbed in place. When
    ``coords`` (flat indices) is given only those entries are filled in.
    ``richardson=True`` combines steps ``h`` and ``h/2`` so the error is
    O(h^4) instead of O(h^2), which allows a larger, less noisy step.
    """
    if richardson:
        coarse = numerical_grad(loss_fn, param, h, coords)
        fine = numerical_grad(loss_fn, param, h / 2, coords)
        return (4.0 * fine - coarse) / 3.0
    grad = np.zeros(param.shape, dtype=np.float64)
    flat = param.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in (range(flat.size) if coords is None else coords):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(loss_fn().data)
            flat[i] = orig - h
            fm = float(loss_fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic, numeric, floor=1e-6):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps structurally-zero gradients (e.g. attention key biases)
    from turning finite-difference round-off into a large ratio.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(loss_fn, named_params, h=1e-5, max_coords=None, rng=None, richardson=False):
    """Return ``{name: relative error}`` comparing backprop to finite differences.

    Parameters must be float64; at float32 the comparison is meaningless.
    With ``max_coords`` each tensor is probed at that many random entries
    (drawn from ``rng``) instead of all of them.
    """
    for _, p in named_params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    report = {}
    for name, p in named_params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        if max_coords is not None and p.data.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
            numeric = numerical_grad(loss_fn, p, h, coords=idx, richardson=richardson).reshape(-1)[idx]
            report[name] = relative_error(np.asarray(analytic).reshape(-1)[idx], numeric)
        else:
            report[name] = relative_error(analytic, numerical_grad(loss_fn, p, h, richardson=richardson))
    return report
