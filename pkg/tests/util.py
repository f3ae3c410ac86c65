"""Independent oracles for the test suite.

Everything here is written for clarity, not speed: straight loops and
textbook formulas that the fast production kernels are checked against.
"""

import numpy as np


def conv2d_naive(x, w, b, stride):
    """Six-loop valid cross-correlation. (N,C,H,W) x (F,C,kh,kw) -> (N,F,H',W')."""
    n, c, h, ww = x.shape
    f, _, kh, kw = w.shape
    sh, sw = stride
    ho = (h - kh) // sh + 1
    wo = (ww - kw) // sw + 1
    out = np.zeros((n, f, ho, wo), dtype=x.dtype)
    for ni in range(n):
        for fi in range(f):
            for oi in range(ho):
                for oj in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += (x[ni, ci, oi * sh + ki, oj * sw + kj]
                                        * w[fi, ci, ki, kj])
                    out[ni, fi, oi, oj] = acc + b[fi]
    return out


def maxpool_naive(x, kernel):
    kh, kw = kernel
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for oi in range(ho):
        for oj in range(wo):
            out[:, :, oi, oj] = x[:, :, oi * kh:(oi + 1) * kh,
                                  oj * kw:(oj + 1) * kw].max(axis=(2, 3))
    return out


def avgpool_naive(x, kernel):
    kh, kw = kernel
    n, c, h, w = x.shape
    ho, wo = h // kh, w // kw
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for oi in range(ho):
        for oj in range(wo):
            out[:, :, oi, oj] = x[:, :, oi * kh:(oi + 1) * kh,
                                  oj * kw:(oj + 1) * kw].mean(axis=(2, 3))
    return out


def finite_diff(f, arr, coords=None, h=1e-6):
    """Central-difference gradient of scalar ``f`` w.r.t. entries of ``arr``.

    Mutates ``arr`` in place around each probed coordinate and restores
    it.  When ``coords`` is None every coordinate is probed.
    """
    flat = arr.reshape(-1)
    if coords is None:
        coords = range(flat.size)
    grad = {}
    for i in coords:
        keep = flat[i]
        flat[i] = keep + h
        up = float(f())
        flat[i] = keep - h
        dn = float(f())
        flat[i] = keep
        grad[i] = (up - dn) / (2.0 * h)
    return grad


def scalar_proj(out, proj):
    """Scalar node sum(out * proj) for probing gradients of a vector op."""
    from acdforge import tensor as T
    return T.Tensor(np.asarray((out.data * proj).sum()), requires_grad=True,
                    parents=(out,),
                    backward=lambda dy: T._acc(out, dy * proj), op="proj")


def scalar_sum(out):
    return scalar_proj(out, np.ones_like(out.data))


def rel_err(a, b, floor=1e-8):
    a = float(a)
    b = float(b)
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_grad(f, arr, analytic, coords=None, h=1e-6, tol=1e-4):
    """Assert analytic gradients match central differences coordinatewise."""
    num = finite_diff(f, arr, coords=coords, h=h)
    aflat = analytic.reshape(-1)
    worst = 0.0
    for i, g in num.items():
        scale = max(abs(g), abs(float(aflat[i])), 1e-4)
        err = abs(g - float(aflat[i])) / scale
        worst = max(worst, err)
        assert err < tol, f"coord {i}: numeric {g}, analytic {aflat[i]}, rel {err}"
    return worst
