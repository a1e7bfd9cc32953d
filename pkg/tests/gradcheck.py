"""Central finite-difference gradient checker, independent of the tape.

Used as the oracle for backward-pass correctness: perturbs each scalar
entry of each parameter by +/- h and compares the resulting quotient
against the analytic gradient produced by the tape.
"""

import numpy as np


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Per-entry central differences of ``loss_fn()`` w.r.t. each array.

    ``params`` is a dict name -> Tensor whose ``.data`` is mutated in place
    while probing; the original values are restored before returning.
    """
    grads = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads[name] = g
    return grads


def max_relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over matching dict entries."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
