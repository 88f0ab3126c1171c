"""Shared oracles for the test suite.

The central tool is a finite-difference gradient comparator: build the same
scalar loss twice, once on the tape and once as a plain value function, and
compare the tape gradients against central differences coordinate by
coordinate. 64-bit floats make eps=1e-6 comfortably accurate for the 1e-4
tolerances used throughout.
"""

import numpy as np

from tscorrect.autodiff import Tape, Var


def fd_worst_rel_err(build, arrays, rng, samples=20, eps=1e-6):
    """Worst relative error between tape gradients and central differences.

    build(tape, vars) must return a scalar Var computed from vars, which are
    created fresh from arrays (copied). Gradients are probed at up to
    samples random coordinates per input.
    """
    vars_ = [Var(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]

    def value():
        return build(Tape(), vars_).value.item()

    tape = Tape()
    out = build(tape, vars_)
    tape.backward(out)

    worst = 0.0
    for v in vars_:
        flat = v.value.reshape(-1)
        grad = v.grad.reshape(-1)
        take = min(samples, flat.size)
        idx = rng.choice(flat.size, size=take, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = value()
            flat[i] = keep - eps
            down = value()
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            ana = grad[i]
            worst = max(worst, abs(num - ana) / max(1e-8, abs(num), abs(ana)))
    return worst


def fd_model_worst_rel_err(params, loss_value_fn, samples=20, eps=1e-6, rng=None):
    """Same comparison for an already-built model.

    params: list of (name, Var) whose .grad is already populated by one
    backward pass of the loss that loss_value_fn() recomputes as a float.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _, p in params:
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        take = min(samples, flat.size)
        idx = rng.choice(flat.size, size=take, replace=False)
        for i in idx:
            keep = flat[i]
            flat[i] = keep + eps
            up = loss_value_fn()
            flat[i] = keep - eps
            down = loss_value_fn()
            flat[i] = keep
            num = (up - down) / (2.0 * eps)
            worst = max(worst, abs(num - grad[i]) / max(1e-8, abs(num), abs(grad[i])))
    return worst


def away_from_kinks(a, margin=0.05):
    """Push values away from 0 so abs/relu finite differences stay clean."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(np.abs(a) < margin, a + np.sign(a + 0.5) * margin, a)
