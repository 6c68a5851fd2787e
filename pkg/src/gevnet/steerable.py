"""SO(2)-steerable kernel bases (orders 1 and 2) and homogenized conv stencils.

Angular kernels are stored as coefficient tensors over the circular harmonics
``[1, cos t, sin t, cos 2t, sin 2t]``; every element carries a radial tag,
either ``"ring"`` (the one-ring of neighbours) or ``"center"`` (``v = 0``).

A steerable kernel satisfies ``K(theta - t) = rho_out(-t) K(theta) rho_in(t)``
and, for order two, ``K(theta1 - t, theta2 - t) = rho_out(-t) K (rho_in(t) x
rho_in(t))``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation, ResolutionError, UnsupportedTypeError
from .geometry import GeometryStencil, IcosphereGrid, TWO_PI, rot2

NUM_HARMONICS = 5
RING, CENTER = "ring", "center"
DEDUP_RTOL = 1e-8


def harmonics(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack(
        [np.ones_like(theta), np.cos(theta), np.sin(theta), np.cos(2 * theta), np.sin(2 * theta)], -1
    )


# ---------------------------------------------------------------------------
# feature types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class FeatureType:
    """``rho0^n0 (+) rho1^n1``; scalars occupy the first ``n0`` slots."""

    n0: int
    n1: int

    def __post_init__(self):
        if self.n0 < 0 or self.n1 < 0 or self.n0 + self.n1 == 0:
            raise UnsupportedTypeError(f"invalid feature type n0={self.n0}, n1={self.n1}")

    @property
    def dim(self) -> int:
        return self.n0 + 2 * self.n1

    @property
    def is_scalar(self) -> bool:
        return self.n1 == 0

    def copies(self) -> list[tuple[int, int]]:
        """``(irrep, first slot)`` for each irrep copy, scalars first."""
        return [(0, i) for i in range(self.n0)] + [(1, self.n0 + 2 * i) for i in range(self.n1)]

    def rep(self, t) -> np.ndarray:
        """Block-diagonal representation matrices, shape ``(..., dim, dim)``."""
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros(t.shape + (self.dim, self.dim))
        idx = np.arange(self.n0)
        out[..., idx, idx] = 1.0
        r = rot2(t)
        for k in range(self.n1):
            s = self.n0 + 2 * k
            out[..., s : s + 2, s : s + 2] = r
        return out

    def __str__(self) -> str:
        parts = []
        if self.n0:
            parts.append("rho0" if self.n0 == 1 else f"rho0^{self.n0}")
        if self.n1:
            parts.append("rho1" if self.n1 == 1 else f"rho1^{self.n1}")
        return "+".join(parts)


RHO0 = FeatureType(1, 0)
RHO1 = FeatureType(0, 1)
RHO01 = FeatureType(1, 1)


def as_type(rho) -> FeatureType:
    if isinstance(rho, FeatureType):
        return rho
    if isinstance(rho, (int, np.integer)) and not isinstance(rho, bool):
        if rho == 0:
            return RHO0
        if rho == 1:
            return RHO1
    raise UnsupportedTypeError(f"unsupported representation {rho!r}; only rho0 and rho1 are available")


# ---------------------------------------------------------------------------
# first-order basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BasisElement:
    """One angular kernel ``theta -> coeffs @ harmonics(theta)`` with a radial tag."""

    coeffs: np.ndarray  # (d_out, d_in, 5)
    tag: str
    name: str

    def __call__(self, theta) -> np.ndarray:
        return np.einsum("oih,...h->...oi", self.coeffs, harmonics(theta))


def _irrep_elements(out_irrep: int, in_irrep: int) -> list[BasisElement]:
    def el(shape, entries, tag, name):
        c = np.zeros(shape + (NUM_HARMONICS,))
        for (o, i, h), val in entries.items():
            c[o, i, h] = val
        c.setflags(write=False)
        return BasisElement(c, tag, name)

    if (out_irrep, in_irrep) == (0, 0):
        const = {(0, 0, 0): 1.0}
        return [el((1, 1), const, RING, "1"), el((1, 1), const, CENTER, "1@c")]
    if (out_irrep, in_irrep) == (1, 0):
        return [
            el((2, 1), {(0, 0, 1): 1.0, (1, 0, 2): 1.0}, RING, "(cos,sin)^T"),
            el((2, 1), {(0, 0, 2): -1.0, (1, 0, 1): 1.0}, RING, "(-sin,cos)^T"),
        ]
    if (out_irrep, in_irrep) == (0, 1):
        return [
            el((1, 2), {(0, 0, 1): 1.0, (0, 1, 2): 1.0}, RING, "(cos,sin)"),
            el((1, 2), {(0, 0, 2): -1.0, (0, 1, 1): 1.0}, RING, "(-sin,cos)"),
        ]
    if (out_irrep, in_irrep) == (1, 1):
        eye = {(0, 0, 0): 1.0, (1, 1, 0): 1.0}
        rot = {(0, 1, 0): -1.0, (1, 0, 0): 1.0}
        f2a = {(0, 0, 3): 1.0, (0, 1, 4): 1.0, (1, 0, 4): 1.0, (1, 1, 3): -1.0}
        f2b = {(0, 0, 4): -1.0, (0, 1, 3): 1.0, (1, 0, 3): 1.0, (1, 1, 4): 1.0}
        return [
            el((2, 2), eye, RING, "I"),
            el((2, 2), rot, RING, "J"),
            el((2, 2), f2a, RING, "F2a"),
            el((2, 2), f2b, RING, "F2b"),
            el((2, 2), eye, CENTER, "I@c"),
            el((2, 2), rot, CENTER, "J@c"),
        ]
    raise UnsupportedTypeError(f"no basis for irreps ({out_irrep} <- {in_irrep})")


@dataclass(frozen=True, eq=False)
class BankElement:
    """First-order irrep kernel acting on one input copy (a 'factor')."""

    element: BasisElement  # coefficients on the full input type
    out_irrep: int
    in_copy: int
    row: int  # first row index in the response bank


@dataclass(frozen=True, eq=False)
class ResponseBank:
    """All first-order factor kernels for an input type, stacked row-wise.

    Both layer orders are (bi)linear in the per-row responses
    ``Z[r] = sum_j kt[j, r, :] @ f(q_j)``.
    """

    rho_in: FeatureType
    factors: tuple
    coeffs: np.ndarray  # (R, d_in, 5)
    center: np.ndarray  # (R,) bool

    @property
    def num_rows(self) -> int:
        return self.coeffs.shape[0]


@lru_cache(maxsize=None)
def response_bank(rho_in: FeatureType) -> ResponseBank:
    d_in = rho_in.dim
    factors, rows, center = [], [], []
    r = 0
    for ci, (in_irrep, slot) in enumerate(rho_in.copies()):
        w = 1 if in_irrep == 0 else 2
        for out_irrep in (0, 1):
            for e in _irrep_elements(out_irrep, in_irrep):
                c = np.zeros((e.coeffs.shape[0], d_in, NUM_HARMONICS))
                c[:, slot : slot + w] = e.coeffs
                c.setflags(write=False)
                factors.append(BankElement(BasisElement(c, e.tag, f"{e.name}[in{ci}]"), out_irrep, ci, r))
                rows.append(c)
                center += [e.tag == CENTER] * c.shape[0]
                r += c.shape[0]
    coeffs = np.concatenate(rows)
    center = np.array(center)
    coeffs.setflags(write=False)
    center.setflags(write=False)
    return ResponseBank(rho_in, tuple(factors), coeffs, center)


def _out_slots(rho_out: FeatureType, irrep: int) -> list[int]:
    return [s for k, s in rho_out.copies() if k == irrep]


@dataclass(frozen=True, eq=False)
class KernelBasis1:
    rho_in: FeatureType
    rho_out: FeatureType
    elements: tuple  # BasisElement with coeffs (d_out, d_in, 5)
    placement: np.ndarray  # (B1, R, d_out): element e = sum of bank rows into output slots

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def tags(self) -> list[str]:
        return [e.tag for e in self.elements]


def basis_first_order(rho_in, rho_out) -> KernelBasis1:
    """Enumerated first-order steerable basis for a pair of types (irreps or sums of them)."""
    return _basis_first_order(as_type(rho_in), as_type(rho_out))


@lru_cache(maxsize=None)
def _basis_first_order(rho_in: FeatureType, rho_out: FeatureType) -> KernelBasis1:
    bank = response_bank(rho_in)
    elements, place = [], []
    for out_irrep, oslot in rho_out.copies():
        w = 1 if out_irrep == 0 else 2
        for f in bank.factors:
            if f.out_irrep != out_irrep:
                continue
            c = np.zeros((rho_out.dim, rho_in.dim, NUM_HARMONICS))
            c[oslot : oslot + w] = f.element.coeffs
            c.setflags(write=False)
            elements.append(BasisElement(c, f.element.tag, f"{f.element.name}->out{oslot}"))
            p = np.zeros((bank.num_rows, rho_out.dim))
            for r in range(w):
                p[f.row + r, oslot + r] = 1.0
            place.append(p)
    placement = np.array(place).reshape(len(place), bank.num_rows, rho_out.dim)
    placement.setflags(write=False)
    return KernelBasis1(rho_in, rho_out, tuple(elements), placement)


# ---------------------------------------------------------------------------
# second-order basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BasisElement2:
    """``(theta1, theta2) -> P @ kron(A(theta1), B(theta2))`` on the full input type."""

    a: BasisElement  # (d_a, d_in, 5)
    b: BasisElement  # (d_b, d_in, 5)
    placement: np.ndarray  # (d_out, d_a * d_b)
    name: str

    @property
    def tags(self) -> tuple[str, str]:
        return (self.a.tag, self.b.tag)

    def __call__(self, theta1, theta2) -> np.ndarray:
        ka = self.a(theta1)
        kb = self.b(theta2)
        kron = np.einsum("...ai,...bj->...abij", ka, kb)
        sh = kron.shape
        kron = kron.reshape(sh[:-4] + (sh[-4] * sh[-3], sh[-2] * sh[-1]))
        return self.placement @ kron


@dataclass(frozen=True, eq=False)
class KernelBasis2:
    rho_in: FeatureType
    rho_out: FeatureType
    elements: tuple  # BasisElement2
    # monomial form used by the fast path: output slot od[m] += Z[ia[m]] * Z[ib[m]]
    mono_element: np.ndarray
    mono_a: np.ndarray
    mono_b: np.ndarray
    mono_out: np.ndarray

    def __len__(self) -> int:
        return len(self.elements)

    @property
    def num_monomials(self) -> int:
        return len(self.mono_element)


def basis_second_order(rho_in, rho_out) -> KernelBasis2:
    """All type-consistent products of first-order factors, deduplicated by rank."""
    return _basis_second_order(as_type(rho_in), as_type(rho_out))


def _candidate_products(rho_in: FeatureType, rho_out: FeatureType):
    bank = response_bank(rho_in)
    in_kind = [k for k, _ in rho_in.copies()]
    for out_irrep, oslot in rho_out.copies():
        pairs = [(0, 0)] if out_irrep == 0 else [(1, 0), (0, 1)]
        for ka, kb in pairs:
            for fa in bank.factors:
                if fa.out_irrep != ka:
                    continue
                for fb in bank.factors:
                    if fb.out_irrep != kb or in_kind[fb.in_copy] != in_kind[fa.in_copy]:
                        continue
                    da, db = fa.element.coeffs.shape[0], fb.element.coeffs.shape[0]
                    w = da * db
                    P = np.zeros((rho_out.dim, w))
                    rows = []
                    for r in range(w):
                        P[oslot + r, r] = 1.0
                        rows.append((fa.row + (r if da > 1 else 0), fb.row + (r if db > 1 else 0), oslot + r))
                    P.setflags(write=False)
                    name = f"{fa.element.name}*{fb.element.name}->out{oslot}"
                    yield BasisElement2(fa.element, fb.element, P, name), rows


def _sample_grid(n: int = 8):
    g = np.arange(n) * TWO_PI / n + 0.123
    t1, t2 = np.meshgrid(g, g, indexing="ij")
    return t1.ravel(), t2.ravel()


def _element2_samples(el: BasisElement2, t1, t2) -> np.ndarray:
    """Samples over all four radial-tag combinations so tags participate in independence."""
    vals = el(t1, t2).reshape(len(t1), -1)
    out = np.zeros((4,) + vals.shape)
    slot = {RING: 0, CENTER: 1}
    out[2 * slot[el.a.tag] + slot[el.b.tag]] = vals
    return out.ravel()


@lru_cache(maxsize=None)
def _basis_second_order(rho_in: FeatureType, rho_out: FeatureType) -> KernelBasis2:
    t1, t2 = _sample_grid()
    kept, kept_rows, vecs = [], [], []
    smax = 0.0
    rank = 0
    for el, rows in _candidate_products(rho_in, rho_out):
        v = _element2_samples(el, t1, t2)
        trial = np.array(vecs + [v])
        s = np.linalg.svd(trial, compute_uv=False)
        smax = max(smax, float(s[0]))
        new_rank = int(np.sum(s > DEDUP_RTOL * smax))
        if new_rank > rank:
            kept.append(el)
            kept_rows.append(rows)
            vecs.append(v)
            rank = new_rank
    mono = [(e, a, b, o) for e, rows in enumerate(kept_rows) for a, b, o in rows]
    arr = np.array(mono, dtype=np.int64).reshape(-1, 4)
    cols = [arr[:, i].copy() for i in range(4)]
    for c in cols:
        c.setflags(write=False)
    return KernelBasis2(rho_in, rho_out, tuple(kept), *cols)


def gram_rank(basis: KernelBasis2) -> int:
    t1, t2 = _sample_grid()
    m = np.array([_element2_samples(e, t1, t2) for e in basis.elements])
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > DEDUP_RTOL * s[0]))


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def verify_steerability(basis, order: int, samples: int, seed: int = 0) -> float:
    """Max abs steerability residual over ``samples`` random (t, angles) draws."""
    if samples < 1:
        raise ContractViolation("samples must be >= 1")
    rng = np.random.default_rng(seed)
    t = rng.uniform(0, TWO_PI, samples)
    return _residual(basis, order, t, rng)


def _residual(basis, order: int, t: np.ndarray, rng: np.random.Generator) -> float:
    rin = basis.rho_in.rep(t)  # (S, d, d)
    rout_inv = basis.rho_out.rep(-t)
    worst = 0.0
    if order == 1:
        th = rng.uniform(0, TWO_PI, len(t))
        for e in basis.elements:
            lhs = e(th - t)
            rhs = rout_inv @ e(th) @ rin
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    elif order == 2:
        th1 = rng.uniform(0, TWO_PI, len(t))
        th2 = rng.uniform(0, TWO_PI, len(t))
        d = basis.rho_in.dim
        rin2 = np.einsum("sij,skl->sikjl", rin, rin).reshape(len(t), d * d, d * d)
        for e in basis.elements:
            lhs = e(th1 - t, th2 - t)
            rhs = rout_inv @ e(th1, th2) @ rin2
            worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    else:
        raise ContractViolation("order must be 1 or 2")
    return worst


def corrupt_first_order(basis: KernelBasis1) -> KernelBasis1:
    """Negative control: replace cos(theta) by cos(2 theta) in the first rho0 -> rho1 element."""
    for i, e in enumerate(basis.elements):
        c = e.coeffs
        if np.any(c[..., 1]) and not np.any(c[..., 3:]) and e.tag == RING and c.shape[1] >= 1:
            nz_in = np.nonzero(np.any(c != 0, axis=(0, 2)))[0]
            nz_out = np.nonzero(np.any(c != 0, axis=(1, 2)))[0]
            if len(nz_in) == 1 and len(nz_out) == 2:
                bad = c.copy()
                bad[..., 3] = bad[..., 1]
                bad[..., 1] = 0.0
                elems = list(basis.elements)
                elems[i] = BasisElement(bad, e.tag, e.name + "(corrupt)")
                return KernelBasis1(basis.rho_in, basis.rho_out, tuple(elems), basis.placement)
    raise UnsupportedTypeError("basis has no rho0 -> rho1 element to corrupt")


# ---------------------------------------------------------------------------
# homogenized stencils
# ---------------------------------------------------------------------------


def ring_moments(stencil: GeometryStencil, Q: int) -> np.ndarray:
    """Per-slot quadrature averages of the harmonics, weighted by angular-cell fraction.

    Each neighbour owns the angular cell bounded by the bisectors to its two
    angular neighbours.  A cell of fraction ``f`` receives ``max(1, round(Q f))``
    midpoint samples placed relative to the cell, so the weights move rigidly
    with the gauge.  Returns ``(V, 7, 5)``; the center slot is zero and padded
    slots are zero.
    """
    nv = stencil.num_vertices
    valence = stencil.mask[:, 1:].sum(axis=1)
    if Q < 4 * int(valence.max()):
        raise ResolutionError(f"Q={Q} is below 4 x max valence ({4 * int(valence.max())})")
    out = np.zeros((nv, stencil.nbr.shape[1], NUM_HARMONICS))
    ang = np.arctan2(stencil.log_coords[..., 1], stencil.log_coords[..., 0])
    for k in np.unique(valence):
        rows = np.nonzero(valence == k)[0]
        a = ang[rows, 1 : k + 1]
        nxt = np.mod(np.roll(a, -1, axis=1) - a, TWO_PI)
        prv = np.mod(a - np.roll(a, 1, axis=1), TWO_PI)
        width = 0.5 * (nxt + prv)
        centre = a + 0.25 * (nxt - prv)
        frac = width / TWO_PI
        n = np.maximum(1, np.rint(Q * frac))
        m = out[rows, 1 : k + 1]
        m[..., 0] = frac
        for h, freq in ((1, 1), (3, 2)):
            half = 0.5 * freq * width
            damp = np.sin(half) / (n * np.sin(half / n))
            m[..., h] = frac * damp * np.cos(freq * centre)
            m[..., h + 1] = frac * damp * np.sin(freq * centre)
        out[rows, 1 : k + 1] = m
    return out


@dataclass(frozen=True, eq=False)
class ConvStencil:
    """Homogenized, transport-composed kernel values for one input type.

    ``kt[v, j, r, :]`` is bank row ``r`` evaluated on slot ``j`` of vertex
    ``v`` and right-multiplied by ``rho_in(t_{v<-q_j})``.  Second-order pair
    kernels are the outer products of these rows, so they are not stored.
    """

    level: int
    Q: int
    rho_in: FeatureType
    nbr: np.ndarray  # (V, 7)
    kt: np.ndarray  # (V, 7, R, d_in)

    @property
    def num_vertices(self) -> int:
        return self.nbr.shape[0]


def homogenize_stencil(
    grid: IcosphereGrid,
    stencil_geom: GeometryStencil,
    rho_in,
    Q: int = 1000,
) -> ConvStencil:
    rho_in = as_type(rho_in)
    bank = response_bank(rho_in)
    mom = ring_moments(stencil_geom, Q)  # (V, 7, 5)
    ring = bank.coeffs * (~bank.center)[:, None, None]
    k = np.einsum("rdh,vjh->vjrd", ring, mom)
    k[:, 0] = (bank.coeffs[:, :, 0] * bank.center[:, None])[None]
    rep = rho_in.rep(stencil_geom.transport)  # (V, 7, d, d)
    kt = np.einsum("vjrd,vjde->vjre", k, rep)
    kt[~stencil_geom.mask] = 0.0
    kt.setflags(write=False)
    return ConvStencil(grid.level, Q, rho_in, stencil_geom.nbr, kt)


def evaluate_kernels(conv: ConvStencil, basis1: KernelBasis1) -> np.ndarray:
    """Transport-composed first-order kernels per slot: ``(V, 7, B1, d_out, d_in)``."""
    return np.einsum("erO,vjrd->vjeOd", basis1.placement, conv.kt)
