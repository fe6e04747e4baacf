"""Tensor-product cubic Hermite interpolation on rectangular grids.

Node data are values together with first derivatives along every axis and
all mixed derivatives (one differentiation per axis at most).  Data are
stored in ``D[..., s, c]`` where ``s`` enumerates subsets of axes as bit
masks (bit a set = differentiated along axis a) and ``c`` is the field
component.  The resulting interpolant is C^1 across cell faces.
"""

from __future__ import annotations

import numpy as np

# 1-D cubic Hermite basis on [0, 1]: value at 0, value at 1, slope at 0, slope at 1


def _basis(u: np.ndarray, order: int):
    """Rows: (h00, h10, h01, h11) where hXY = basis for corner Y, X=0 value/1 slope."""
    if order == 0:
        u2, u3 = u * u, u * u * u
        return (2 * u3 - 3 * u2 + 1, u3 - 2 * u2 + u, -2 * u3 + 3 * u2, u3 - u2)
    if order == 1:
        u2 = u * u
        return (6 * u2 - 6 * u, 3 * u2 - 4 * u + 1, -6 * u2 + 6 * u, 3 * u2 - 2 * u)
    return (12 * u - 6, 6 * u - 4, -12 * u + 6, 6 * u - 2)


def hermite_eval(corner_data: np.ndarray, u: np.ndarray, h: np.ndarray, order: int = 1):
    """Evaluate the interpolant inside cells.

    corner_data: (P, 2**d, 2**d, C) data per corner (bit a of corner index =
        upper corner along axis a) and per derivative subset.
    u: (P, d) local coordinates, h: (P, d) or (d,) cell widths.
    Returns value (P, C), gradient (P, C, d) and, for order 2, Hessian
    (P, C, d, d), all with respect to the global coordinates.
    """
    P, ncorner, nsub, C = corner_data.shape
    d = u.shape[1]
    h = np.broadcast_to(np.asarray(h, dtype=float), (P, d))
    bases = [[_basis(u[:, a], o) for a in range(d)] for o in range(order + 1)]
    corner_bits = np.arange(ncorner)
    sub_bits = np.arange(nsub)

    def weights(orders):
        # weight for (corner, subset) given per-axis derivative orders
        W = np.ones((P, ncorner, nsub))
        for a in range(d):
            b = bases[orders[a]][a]
            ha = h[:, a]
            # table[p, up, deriv]
            table = np.stack([np.stack([b[0], b[1] * ha], -1), np.stack([b[2], b[3] * ha], -1)], 1)
            table *= (ha ** (-orders[a]))[:, None, None]
            W *= table[:, (corner_bits >> a)[:, None] & 1, (sub_bits >> a)[None, :] & 1]
        return W

    val = np.einsum("pcs,pcsk->pk", weights([0] * d), corner_data)
    grad = np.empty((P, C, d))
    for a in range(d):
        o = [0] * d
        o[a] = 1
        grad[:, :, a] = np.einsum("pcs,pcsk->pk", weights(o), corner_data)
    if order < 2:
        return val, grad
    hess = np.empty((P, C, d, d))
    for a in range(d):
        for b in range(a, d):
            o = [0] * d
            o[a] += 1
            o[b] += 1
            v = np.einsum("pcs,pcsk->pk", weights(o), corner_data)
            hess[:, :, a, b] = v
            hess[:, :, b, a] = v
    return val, grad, hess


_T = np.array([[1.0, 0.0, 0.0, 0.0],
               [1.0, 1.0 / 3.0, 0.0, 0.0],
               [0.0, 0.0, 1.0, -1.0 / 3.0],
               [0.0, 0.0, 1.0, 0.0]])


def bezier_net(corner_data: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Bezier control net (P, 4**d, C) of each cell; its hull bounds the patch."""
    P, ncorner, nsub, C = corner_data.shape
    d = int(round(np.log2(ncorner)))
    h = np.broadcast_to(np.asarray(h, dtype=float), (P, d))
    # rearrange into per-axis [f0, f0', f1, f1'] ordering
    shape = (P,) + (4,) * d + (C,)
    G = np.empty(shape)
    for c in range(ncorner):
        for sub in range(nsub):
            idx = [slice(None)]
            scale = np.ones(P)
            for a in range(d):
                up = (c >> a) & 1
                der = (sub >> a) & 1
                idx.append(2 * up + der)
                if der:
                    scale = scale * h[:, a]
            G[tuple(idx)] = corner_data[:, c, sub, :] * scale[:, None]
    for a in range(d):
        G = np.moveaxis(np.tensordot(G, _T, axes=([a + 1], [1])), -1, a + 1)
    return G.reshape(P, -1, C)
