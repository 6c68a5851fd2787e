"""Pure numpy implementation of the stencil gather/contract kernels."""
from __future__ import annotations

import numpy as np
from scipy import sparse


def stencil_forward(kt: np.ndarray, nbr: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``Z[b, v, c, r] = sum_{j, d} kt[v, j, r, d] * x[b, nbr[v, j], c, d]``."""
    B, _, C, D = x.shape
    V, J, R, _ = kt.shape
    xg = x[:, nbr]  # (B, V, J, C, D)
    lhs = kt.transpose(0, 2, 1, 3).reshape(V, R, J * D)
    rhs = xg.transpose(1, 2, 4, 0, 3).reshape(V, J * D, B * C)
    z = np.matmul(lhs, rhs)  # (V, R, B*C)
    return np.ascontiguousarray(z.reshape(V, R, B, C).transpose(2, 0, 3, 1))


def stencil_adjoint(kt: np.ndarray, nbr: np.ndarray, gz: np.ndarray, num_src: int) -> np.ndarray:
    """Adjoint of :func:`stencil_forward` with respect to ``x``."""
    B, V, C, R = gz.shape
    _, J, _, D = kt.shape
    lhs = kt.transpose(0, 1, 3, 2).reshape(V, J * D, R)
    rhs = gz.transpose(1, 3, 0, 2).reshape(V, R, B * C)
    g = np.matmul(lhs, rhs).reshape(V * J, D * B * C)
    scatter = sparse.csr_matrix(
        (np.ones(V * J, dtype=g.dtype), (nbr.ravel(), np.arange(V * J))), shape=(num_src, V * J)
    )
    gx = np.asarray(scatter @ g).reshape(num_src, D, B, C)
    return np.ascontiguousarray(gx.transpose(2, 0, 3, 1))


_CHUNK = 1 << 22  # samples materialized at once


def _chunks(B, per_item):
    step = max(1, _CHUNK // max(per_item, 1))
    for s in range(0, B, step):
        yield slice(s, min(B, s + step))


def nl_forward(a: np.ndarray, cs: np.ndarray, sn: np.ndarray):
    """Project ReLU'd samples of ``s + r_x cos + r_y sin`` back onto ``(1, cos, sin)``.

    ``a``: ``(B, V, W, 3)``; ``cs``/``sn``: ``(V, N)``.  Returns the raw sums
    ``(sum y, sum y cos, sum y sin)`` per ``(b, v, w)`` plus per-unit totals
    of ``y`` and ``y**2`` over batch, vertices and samples.
    """
    B, V, W, _ = a.shape
    N = cs.shape[1]
    proj = np.empty_like(a)
    sy = np.zeros(W, dtype=a.dtype)
    sy2 = np.zeros(W, dtype=a.dtype)
    for sl in _chunks(B, V * W * N):
        x = a[sl]
        y = x[..., 0:1] + x[..., 1:2] * cs[:, None] + x[..., 2:3] * sn[:, None]  # (b, V, W, N)
        np.maximum(y, 0, out=y)
        proj[sl, ..., 0] = y.sum(-1)
        proj[sl, ..., 1] = np.einsum("bvwk,vk->bvw", y, cs)
        proj[sl, ..., 2] = np.einsum("bvwk,vk->bvw", y, sn)
        sy += y.sum(axis=(0, 1, 3))
        sy2 += np.einsum("bvwk,bvwk->w", y, y)
    return proj, sy, sy2


def nl_backward(a, cs, sn, gd, c0, c1, mu):
    """Input gradient given ``dL/dy_k = gd_0 + gd_1 cos_k + gd_2 sin_k + c0 + c1 (y_k - mu)`` on active samples."""
    B, V, W, _ = a.shape
    N = cs.shape[1]
    ga = np.empty_like(a)
    for sl in _chunks(B, V * W * N):
        x = a[sl]
        g = gd[sl]
        y = x[..., 0:1] + x[..., 1:2] * cs[:, None] + x[..., 2:3] * sn[:, None]
        d = g[..., 0:1] + g[..., 1:2] * cs[:, None] + g[..., 2:3] * sn[:, None]
        d += c0[:, None] + c1[:, None] * (y - mu[:, None])
        d *= y > 0
        ga[sl, ..., 0] = d.sum(-1)
        ga[sl, ..., 1] = np.einsum("bvwk,vk->bvw", d, cs)
        ga[sl, ..., 2] = np.einsum("bvwk,vk->bvw", d, sn)
    return ga
