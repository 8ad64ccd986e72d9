import numpy as np
import pytest

from xmac_edge import autodiff as ad


def numeric_grad(fn, arrays, i, step=1e-4):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        fp = fn(*arrays)
        x[idx] = old - step
        fm = fn(*arrays)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b):
    """Elementwise |a-b| / (|a|+|b|), with the denominator floored at 1e-3 of the
    largest gradient entry so float64 rounding on near-zero entries is not
    mistaken for a mismatch."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if not a.size:
        return 0.0
    floor = max(1e-8, 1e-3 * float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)))


def gradcheck(op, arrays, seed=0, step=1e-4, wrt=None):
    """Compare tape gradients with central differences in float64.

    ``op(*tensors) -> Tensor``; the checked scalar is ``sum(op(...) * R)`` for a
    fixed random ``R`` so that every output element carries a distinct weight.
    Returns the worst relative error over the checked inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    with ad.precision("float64"):
        with ad.no_grad():
            probe = op(*[ad.Tensor(a) for a in arrays])
        r = np.random.default_rng(seed).normal(size=probe.shape)

        def scalar(*arrs):
            with ad.no_grad():
                return float(np.sum(op(*[ad.Tensor(a) for a in arrs]).data * r))

        ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
        with ad.Tape() as tape:
            out = op(*ts)
            loss = ad.tensor_sum(ad.mul(out, ad.Tensor(r)))
        ad.backward(tape, loss)
        worst = 0.0
        for i in wrt:
            analytic = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
            numeric = numeric_grad(scalar, arrays, i, step)
            worst = max(worst, rel_error(analytic, numeric))
        return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
