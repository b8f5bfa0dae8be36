import numpy as np
import pytest

from protoseg import arraydiff as ad


def numeric_grad(f, arrays, h=1e-4, limit=None, rng=None):
    """Central differences of the scalar ``f()`` w.r.t. each array in place.

    ``limit`` caps the number of probed entries per array (chosen at
    random); unprobed entries are returned as NaN.
    """
    grads = []
    for arr in arrays:
        g = np.full(arr.shape, np.nan)
        flat_idx = np.arange(arr.size)
        if limit is not None and arr.size > limit:
            flat_idx = (rng or np.random.default_rng(0)).choice(arr.size, limit, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp = f()
            arr[idx] = old - h
            fm = f()
            arr[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_relative_error(analytic, numeric):
    """max |a - n| / max |n| over the probed entries of all arrays."""
    num, den = 0.0, 0.0
    for a, n in zip(analytic, numeric):
        probed = ~np.isnan(n)
        num = max(num, float(np.max(np.abs(a[probed] - n[probed]), initial=0.0)))
        den = max(den, float(np.max(np.abs(n[probed]), initial=0.0)))
    return num / max(den, 1e-300)


def check_op_gradient(build, shapes, seed=0, h=1e-4, positive=False):
    """Compare backward() of ``sum(build(*xs) * w)`` with central differences.

    A random weighting ``w`` makes every output element matter.
    """
    rng = np.random.default_rng(seed)
    with ad.precision("float64"):
        values = [rng.uniform(0.5, 2.0, s) if positive else rng.normal(size=s) for s in shapes]
        xs = [ad.Tensor(v.copy(), requires_grad=True) for v in values]
        out = build(*xs)
        w = rng.normal(size=out.shape)
        loss = ad.sum(ad.mul(out, ad.Tensor(w)))
        ad.backward(loss)
        analytic = [x.grad for x in xs]

        def f():
            return float(np.sum(build(*[ad.Tensor(v) for v in values]).value * w))

        numeric = numeric_grad(f, values, h)
    return max_relative_error(analytic, numeric)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
