"""Central finite differences as an independent oracle for reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from msda import autodiff as ad

REL_TOL = 1e-3
ABS_FLOOR = 1e-6


def close(analytic, numeric, rel=REL_TOL, floor=ABS_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= np.maximum(rel * scale, floor)


def numeric_grad(f, arrays, eps=1e-6):
    """d f / d arrays[i] elementwise; ``f`` maps a list of ndarrays to a float."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[i][idx] += eps
            lo[i][idx] -= eps
            g[idx] = (f(hi) - f(lo)) / (2 * eps)
        grads.append(g)
    return grads


def check_op(op, arrays, rng, eps=1e-6):
    """Compare backward() through ``op`` with finite differences.

    The op output is contracted with fixed random weights so every output
    element contributes. Returns (ok, worst absolute error).
    """
    probe = None

    def scalar(xs):
        nonlocal probe
        out = op(*[ad.as_value(x) for x in xs])
        if probe is None:
            probe = rng.normal(size=out.shape)
        return float(np.sum(out.data * probe))

    scalar(arrays)
    params = [ad.parameter(a.copy()) for a in arrays]
    out = op(*params)
    loss = ad.sum_(ad.mul(out, probe))
    ad.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_grad(scalar, [a.copy() for a in arrays], eps)
    ok = all(np.all(close(a, n)) for a, n in zip(analytic, numeric))
    worst = max(float(np.max(np.abs(a - n), initial=0.0)) for a, n in zip(analytic, numeric))
    return ok, worst


def check_directional(loss_fn, params: dict, rng, eps=1e-6):
    """Directional-derivative check of a scalar loss over many named arrays.

    ``loss_fn(values)`` takes a dict name -> DiffValue and returns a scalar
    DiffValue. Compares <grad, v> with a central difference along a random
    unit direction v.
    """
    values = {k: ad.parameter(a.copy()) for k, a in params.items()}
    ad.backward(loss_fn(values))
    direction = {k: rng.normal(size=a.shape) for k, a in params.items()}
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in direction.values()))
    direction = {k: d / norm for k, d in direction.items()}
    analytic = sum(float(np.sum((values[k].grad if values[k].grad is not None else 0.0) * direction[k]))
                   for k in params)

    def at(sign):
        shifted = {k: ad.as_value(a + sign * eps * direction[k]) for k, a in params.items()}
        return float(loss_fn(shifted).data)

    numeric = (at(1.0) - at(-1.0)) / (2 * eps)
    return bool(close(analytic, numeric)), analytic, numeric
