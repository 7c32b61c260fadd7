"""Central finite-difference oracle for tape gradients."""

import numpy as np

from prflow import autodiff as ad

H = 1e-5
RTOL = 1e-4
ATOL = 1e-8


def analytic(build, params):
    """Gradients of the scalar ``build(tape)`` for every parameter."""
    for p in params:
        p.zero_grad()
    tape = ad.Tape()
    tape.backward(build(tape))
    return [p.grad.copy() for p in params]


def numeric(build, param, index):
    old = param.value[index]
    param.value[index] = old + H
    up = float(ad.value_of(build(None)))
    param.value[index] = old - H
    down = float(ad.value_of(build(None)))
    param.value[index] = old
    return (up - down) / (2 * H)


def worst_mismatch(build, params, rng, per_param=None):
    """Largest ``|a - n| / (RTOL * max(|a|, |n|) + ATOL)``; at most 1 means agreement.

    ``per_param`` limits the check to that many random coordinates of each parameter.
    """
    grads = analytic(build, params)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = np.arange(p.value.size)
        if per_param is not None and p.value.size > per_param:
            flat = rng.choice(flat, per_param, replace=False)
        for k in flat:
            idx = np.unravel_index(k, p.value.shape)
            a, n = g[idx], numeric(build, p, idx)
            worst = max(worst, abs(a - n) / (RTOL * max(abs(a), abs(n)) + ATOL))
    return worst
