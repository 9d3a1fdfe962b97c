"""Independent reference implementations used by several test modules."""

import cmath

import numpy as np

from oscidal.net import Architecture, LayerParams, init_params


def random_net(rng, max_width=8, max_depth=4, input_dim=1):
    depth = int(rng.integers(1, max_depth + 1))
    widths = tuple(int(w) for w in rng.integers(1, max_width + 1, size=depth))
    params = init_params(Architecture(widths, input_dim=input_dim), int(rng.integers(1 << 30)), 1.5)
    return [LayerParams(p.weights, rng.standard_normal(p.biases.shape) * 0.3) for p in params]


def _forward_ld(ws, bs, x):
    h = x
    for W, b in zip(ws[:-1], bs[:-1]):
        h = np.sin(h @ W.T + b)
    return h @ ws[-1].T + bs[-1]


def fd_gradient(params, x, target, step=1e-6):
    """Central differences of ``sum (N(x) - target)^2`` in extended precision.

    A separate forward pass in ``longdouble`` keeps round-off of the
    difference quotient (about eps * loss / step) far below 1e-6 relative.
    """
    ws = [p.weights.astype(np.longdouble) for p in params]
    bs = [p.biases.astype(np.longdouble) for p in params]
    X = np.asarray(x).astype(np.longdouble)
    T = np.asarray(target).astype(np.longdouble)

    def loss():
        return np.sum((_forward_ld(ws, bs, X) - T) ** 2)

    out = []
    for k in range(len(params)):
        for arr in (ws[k], bs[k]):
            g = np.zeros(arr.shape, dtype=np.longdouble)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + step
                up = loss()
                arr[idx] = orig - step
                down = loss()
                arr[idx] = orig
                g[idx] = (up - down) / (2 * step)
            out.append(g.astype(float))
    return out


def sq_loss(target):
    def loss(out):
        r = out - target
        return float(np.sum(r * r)), 2.0 * r
    return loss


def brute_force_matrix(kernel, kappa, p, q):
    """Entry-by-entry evaluation of the b_{j,l} rule with 1-based indices."""
    n = p * q + 1
    x = [-1.0 + 2.0 * (j - 1) / (n - 1) for j in range(1, n + 1)]
    omega = cmath.exp(2j * kappa / (q * p))
    quad_cols = {d * q + 1 for d in range(1, p)}
    M = [[0j] * n for _ in range(n)]
    for j in range(1, n + 1):
        for l in range(1, n + 1):
            if l == 1 or l == n:
                b = kernel(x[j - 1], x[l - 1]) * omega ** abs(j - l)
            elif l in quad_cols:
                b = 2 * kernel(x[j - 1], x[l - 1]) * omega ** abs(j - l)
            else:
                b = 0j
            M[j - 1][l - 1] = (1.0 if j == l else 0.0) - b / p
    return np.array(M)
