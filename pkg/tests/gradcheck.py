"""Central finite-difference checks for Var-building functions."""
import numpy as np

from qiseg.tensor_core import autograd as ag

STEP = 1e-5
GUARD = 1e-12


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), GUARD))


def numeric_grad(f, x, h=STEP):
    """Central differences of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check(build, arrays, rng, which=None):
    """Max relative error between analytic and numeric gradients.

    ``build(*vars) -> Var``; the scalar probed is ``sum(W * out)`` for a
    random ``W``. ``which`` limits the inputs checked.
    """
    which = range(len(arrays)) if which is None else which
    leaves = [ag.param(np.array(a, dtype=float)) for a in arrays]
    out = build(*leaves)
    w = rng.normal(size=np.shape(out.value))
    ag.backward(out, np.asarray(w))
    worst = 0.0
    for k in which:
        def f(x, k=k):
            vals = [ag.as_var(x if j == k else a) for j, a in enumerate(arrays)]
            return float((build(*vals).value * w).sum())

        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k])
        worst = max(worst, rel_error(analytic, numeric_grad(f, arrays[k])))
    return worst
