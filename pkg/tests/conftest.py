import numpy as np

from corefuse.kernel import Tape


def tape_loss_grads(build, params):
    """Run build(tape, leaf_ids) -> loss node over fresh leaves of params.

    Returns (loss_value, grads) where grads maps param index -> adjoint array.
    """
    tape = Tape()
    ids = [tape.leaf(p) for p in params]
    loss = build(tape, ids)
    grads = tape.backward(loss)
    return float(tape.value(loss)[0, 0]), [grads[i] for i in ids]


def finite_diff_grad(f, x, h=1e-5, entries=None):
    """Central finite differences of scalar f at matrix x.

    ``entries`` limits the check to a subset of flat indices; returns a dict
    flat_index -> derivative estimate.
    """
    x = np.asarray(x, dtype=np.float64)
    flat = range(x.size) if entries is None else entries
    out = {}
    for i in flat:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        out[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2 * h)
    return out


def assert_grad_close(analytic, numeric, rtol, atol):
    """Compare an analytic gradient array against finite-difference entries."""
    flat = np.asarray(analytic, dtype=np.float64).reshape(-1)
    for i, fd in numeric.items():
        a = flat[i]
        assert abs(a - fd) <= atol + rtol * max(abs(a), abs(fd)), (
            f"grad mismatch at flat index {i}: analytic {a!r} vs fd {fd!r}"
        )
