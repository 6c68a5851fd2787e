"""Brute-force oracles for the optimized paths.

Everything here uses explicit Python loops and recomputes what it needs from
first principles; speed is irrelevant.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, ResolutionError, ResourceLimitError
from .geometry import GeometryStencil, IcosphereGrid, TWO_PI
from .steerable import CENTER, FeatureType, as_type, basis_first_order, basis_second_order

NAIVE_MAX_LEVEL = 2


# ---------------------------------------------------------------------------
# classical discrete Volterra series
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class VolterraKernelSet:
    """``h0`` plus ``h[k-1]`` of shape ``(W,) * (k * ndim)`` with ``W = 2 * radius + 1``.

    Index ``i`` along an offset axis means offset ``i - radius``.
    """

    h0: float
    h: tuple
    radius: int
    ndim: int = 1

    def __post_init__(self):
        w = 2 * self.radius + 1
        for k, hk in enumerate(self.h, start=1):
            if hk.shape != (w,) * (k * self.ndim):
                raise ContractViolation(f"h^{k} has shape {hk.shape}, expected {(w,) * (k * self.ndim)}")
            if not np.all(np.isfinite(hk)):
                raise ContractViolation(f"h^{k} has non-finite entries")


def _offsets(radius: int, ndim: int):
    return list(itertools.product(range(-radius, radius + 1), repeat=ndim))


def _sample(signal: np.ndarray, pos) -> float:
    if all(0 <= p < n for p, n in zip(pos, signal.shape)):
        return float(signal[tuple(pos)])
    return 0.0


def volterra_discrete(kernels: VolterraKernelSet, signal: np.ndarray, m: int) -> np.ndarray:
    """``Vf(x) = sum_k sum_{tau_1..tau_k} h^k(tau) prod_i f(x - tau_i)`` with zero padding."""
    if m < 0:
        raise ContractViolation("Volterra order must be >= 0")
    if m > len(kernels.h):
        raise ContractViolation(f"order {m} requested but only {len(kernels.h)} kernels given")
    signal = np.asarray(signal, dtype=np.float64)
    if signal.ndim != kernels.ndim:
        raise ContractViolation("signal and kernel dimensionality differ")
    r = kernels.radius
    offs = _offsets(r, kernels.ndim)
    out = np.zeros(signal.shape)
    for x in itertools.product(*(range(n) for n in signal.shape)):
        acc = float(kernels.h0)
        for k in range(1, m + 1):
            hk = kernels.h[k - 1]
            for taus in itertools.product(offs, repeat=k):
                idx = tuple(t + r for tau in taus for t in tau)
                prod = 1.0
                for tau in taus:
                    prod *= _sample(signal, [xi - ti for xi, ti in zip(x, tau)])
                acc += hk[idx] * prod
        out[x] = acc
    return out


# ---------------------------------------------------------------------------
# generic expansion over neighbour tuples
# ---------------------------------------------------------------------------


def expansion_evaluate(targets, neighbours, kernels, product, feature, h0=None):
    """Evaluate ``K0 + sum_k sum_{(v_1..v_k)} K_k(v_1..v_k) . prod(T_1 f(q_1), ..., T_k f(q_k))``.

    ``neighbours(p)`` yields ``(f_q, v, T)`` triples: the feature at ``q`` (or
    ``None`` outside the domain), the tangent offset ``v`` and the transporter
    matrix.  ``kernels[k-1](vs)`` returns the order-``k`` kernel matrix and
    ``product(vectors)`` forms the (restricted) tensor product.
    """
    out = {}
    for p in targets:
        nb = list(neighbours(p))
        acc = None if h0 is None else np.array(h0, dtype=np.float64)
        for k, K in enumerate(kernels, start=1):
            for combo in itertools.product(nb, repeat=k):
                if any(f is None for f, _, _ in combo):
                    continue
                vecs = [T @ f for f, _, T in combo]
                term = K([v for _, v, _ in combo]) @ product(vecs)
                acc = term if acc is None else acc + term
        out[p] = acc
    return out


def planar_reduction_check(window: int, kernels: VolterraKernelSet, signal: np.ndarray) -> float:
    """Run the expansion on a flat lattice with trivial transport and compare to :func:`volterra_discrete`.

    Tangent offsets are lattice offsets ``v = q - x = -tau`` and the kernels
    are read as ``K_k(v_1..v_k) = h^k(-v_1, ..., -v_k)``.
    """
    if window != kernels.radius:
        raise ContractViolation("window radius must equal the kernel radius")
    signal = np.asarray(signal, dtype=np.float64)
    r = kernels.radius
    offs = _offsets(r, kernels.ndim)
    one = np.eye(1)

    def neighbours(x):
        for v in offs:
            q = [xi + vi for xi, vi in zip(x, v)]
            inside = all(0 <= qi < n for qi, n in zip(q, signal.shape))
            yield (np.array([signal[tuple(q)]]) if inside else None), v, one

    def make_kernel(hk):
        return lambda vs: np.array([[hk[tuple(-t + r for v in vs for t in v)]]])

    def product(vecs):
        out = np.ones(1)
        for v in vecs:
            out = np.kron(out, v)
        return out

    targets = list(itertools.product(*(range(n) for n in signal.shape)))
    res = expansion_evaluate(
        targets, neighbours, [make_kernel(hk) for hk in kernels.h], product, None, h0=[kernels.h0]
    )
    flat = np.zeros(signal.shape)
    for x, val in res.items():
        flat[x] = float(val[0]) if val is not None else kernels.h0
    direct = volterra_discrete(kernels, signal, len(kernels.h))
    return float(np.max(np.abs(flat - direct)))


# ---------------------------------------------------------------------------
# naive gauge-equivariant Volterra convolution on the sphere
# ---------------------------------------------------------------------------


def _rep(ftype: FeatureType, t: float) -> np.ndarray:
    m = np.zeros((ftype.dim, ftype.dim))
    for k in range(ftype.n0):
        m[k, k] = 1.0
    c, s = np.cos(t), np.sin(t)
    for k in range(ftype.n1):
        i = ftype.n0 + 2 * k
        m[i : i + 2, i : i + 2] = [[c, -s], [s, c]]
    return m


def _restricted_product(ftype: FeatureType, u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``u (x) w`` with every block pairing a scalar with a vector zeroed out."""
    kind = [0] * ftype.n0 + [1] * (2 * ftype.n1)
    out = np.zeros(ftype.dim * ftype.dim)
    for i in range(ftype.dim):
        for j in range(ftype.dim):
            if kind[i] == kind[j]:
                out[i * ftype.dim + j] = u[i] * w[j]
    return out


def gevconv_naive(
    grid: IcosphereGrid,
    geom: GeometryStencil,
    rho_in,
    rho_out,
    params: dict,
    field: np.ndarray,
    Q: int = 1000,
) -> np.ndarray:
    """Per-vertex, per-pair loop evaluation of the steerable Volterra convolution.

    ``field`` is ``(V, C, d_in)``; ``params`` uses the same layout as the
    optimized layer (``w1``, optional ``w2`` and ``b``).
    """
    if grid.level > NAIVE_MAX_LEVEL:
        raise ResourceLimitError(f"naive evaluation is limited to level <= {NAIVE_MAX_LEVEL}")
    rho_in, rho_out = as_type(rho_in), as_type(rho_out)
    valence = geom.mask[:, 1:].sum(axis=1)
    if Q < 4 * int(valence.max()):
        raise ResolutionError("Q too small for the stencil valence")
    b1 = basis_first_order(rho_in, rho_out)
    b2 = basis_second_order(rho_in, rho_out) if "w2" in params else None
    field = np.asarray(field, dtype=np.float64)
    V, C, _ = field.shape
    K = params["w1"].shape[0]
    out = np.zeros((V, K, rho_out.dim))
    for v in range(V):
        slots = [j for j in range(geom.nbr.shape[1]) if geom.mask[v, j]]
        avg = _homogenized(geom, v, Q)
        k1 = [[avg(e, j) for e in b1.elements] for j in slots]
        moved = [
            [_rep(rho_in, float(geom.transport[v, j])) @ field[geom.nbr[v, j], c] for c in range(C)] for j in slots
        ]
        for k in range(K):
            acc = np.zeros(rho_out.dim)
            for a in range(len(slots)):
                for c in range(C):
                    for e in range(len(b1)):
                        acc += params["w1"][k, c, e] * (k1[a][e] @ moved[a][c])
            out[v, k] = acc
        if b2 is None:
            continue
        fa = [[avg(e.a, j) for e in b2.elements] for j in slots]
        fb = [[avg(e.b, j) for e in b2.elements] for j in slots]
        w2 = params["w2"]
        full = w2.ndim == 4
        for a in range(len(slots)):
            for b in range(len(slots)):
                k2 = [b2.elements[e].placement @ np.kron(fa[a][e], fb[b][e]) for e in range(len(b2))]
                for c1 in range(C):
                    for c2 in range(C) if full else (c1,):
                        prod = _restricted_product(rho_in, moved[a][c1], moved[b][c2])
                        resp = np.array([m @ prod for m in k2])  # (E, d_out)
                        coef = w2[:, c1, c2] if full else w2[:, c1]
                        out[v] += coef @ resp
    if "b" in params:
        out[:, :, : rho_out.n0] += params["b"]
    return out


def _homogenized(geom: GeometryStencil, v: int, Q: int):
    """Return ``avg(element, slot)``: cell-averaged kernel value by explicit sampling."""
    k = int(geom.mask[v, 1:].sum())
    ang = [float(np.arctan2(geom.log_coords[v, j, 1], geom.log_coords[v, j, 0])) for j in range(1, k + 1)]
    cells = {}
    for j in range(k):
        nxt = (ang[(j + 1) % k] - ang[j]) % TWO_PI
        prv = (ang[j] - ang[j - 1]) % TWO_PI
        width = (nxt + prv) / 2
        n = max(1, int(np.rint(Q * width / TWO_PI)))
        lo = ang[j] - prv / 2
        cells[j + 1] = (lo + (np.arange(n) + 0.5) * width / n, width / TWO_PI)
    memo = {}

    def avg(element, slot):
        key = (id(element), slot)
        if key in memo:
            return memo[key]
        shape = element.coeffs.shape[:2]
        if slot == 0:
            val = element(0.0) if element.tag == CENTER else np.zeros(shape)
        elif element.tag == CENTER:
            val = np.zeros(shape)
        else:
            samples, frac = cells[slot]
            val = element(samples).mean(axis=0) * frac
        memo[key] = val
        return val

    return avg


def regular_nonlinearity_naive(x, ftype, N, affine=None, mean=None, var=None, phases=None, eps=1e-5):
    """Materialize every sample, ReLU, normalize and project back by least squares.

    ``x`` is ``(B, V, C, D)``.  With ``affine`` given and ``mean``/``var``
    omitted, statistics come from the batch (over batch, vertices, samples).
    """
    ftype = as_type(ftype)
    x = np.asarray(x, dtype=np.float64)
    B, V, C, _ = x.shape
    ph = np.zeros(V) if phases is None else np.asarray(phases)
    U = ftype.n0
    out = np.zeros_like(x)
    ys = np.zeros((B, V, C, U, N))
    th = ph[:, None] + TWO_PI * np.arange(N) / N
    for u in range(U):
        s = x[..., u]
        if u < ftype.n1:
            rx = x[..., ftype.n0 + 2 * u]
            ry = x[..., ftype.n0 + 2 * u + 1]
        else:
            rx = ry = np.zeros_like(s)
        g = s[..., None] + rx[..., None] * np.cos(th)[None, :, None] + ry[..., None] * np.sin(th)[None, :, None]
        ys[:, :, :, u] = np.maximum(g, 0.0)
    if affine is not None:
        scale, shift = affine
        if mean is None:
            mean = ys.mean(axis=(0, 1, 4))
            var = ys.var(axis=(0, 1, 4))
        ys = (ys - mean[..., None]) / np.sqrt(var[..., None] + eps) * scale[..., None] + shift[..., None]
    basis = np.stack([np.ones_like(th), np.cos(th), np.sin(th)], -1)  # (V, N, 3)
    for v in range(V):
        coef, *_ = np.linalg.lstsq(basis[v], ys[:, v].reshape(-1, N).T, rcond=None)
        coef = coef.T.reshape(B, C, U, 3)
        out[:, v, :, : ftype.n0] = coef[..., 0]
        for u in range(ftype.n1):
            out[:, v, :, ftype.n0 + 2 * u : ftype.n0 + 2 * u + 2] = coef[:, :, u, 1:]
    return out
