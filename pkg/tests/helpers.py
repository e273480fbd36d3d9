"""Shared test utilities: an independent finite-difference gradient oracle.

Deliberately separate from the package's own gradient-check harness so the
two routes never share code.
"""

import numpy as np


def fd_grad(f, x, step=1e-5):
    """Central finite differences of the scalar function ``f`` wrt array ``x``.

    ``f`` takes no arguments and must re-read ``x`` (mutated in place here).
    """
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f()
        flat[k] = orig - step
        fm = f()
        flat[k] = orig
        gf[k] = (fp - fm) / (2.0 * step)
    return g


def max_rel_err(analytic, numeric):
    """max |a - n| scaled by max(1, |a|_inf, |n|_inf)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(1.0, np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    return np.abs(analytic - numeric).max(initial=0.0) / denom


# Verdict/progress lines from the acceptance gate, replayed after the run by
# the conftest terminal-summary hook (in-test prints are swallowed by
# pytest's fd-level capture when output is piped).
acceptance_transcript: list[str] = []
