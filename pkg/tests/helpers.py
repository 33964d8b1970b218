"""Shared gradient-check utilities (finite differences in float64)."""

import numpy as np

from stormkan.tape import Tape


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function wrt array x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric)
                        / np.maximum(1.0, np.abs(numeric))))


def check_gradients(build, arrays, tol=1e-6, h=1e-5):
    """build(tape, leaf_vars) -> scalar loss Var; checks every array."""
    def run():
        tape = Tape()
        leaves = [tape.leaf(a, requires_grad=True) for a in arrays]
        return tape, leaves, build(tape, leaves)

    tape, leaves, loss = run()
    grads = tape.backprop(loss)
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = grads.wrt(leaf)
        numeric = numerical_grad(lambda: float(run()[2].data), arr, h=h)
        worst = max(worst, max_rel_err(analytic, numeric))
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol}"
    return worst
