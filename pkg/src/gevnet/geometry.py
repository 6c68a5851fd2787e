"""Icospherical grids and the differential geometry the convolutions need.

Conventions
-----------
* A gauge at ``p`` is an orthonormal, positively oriented tangent frame
  ``(e1, e2)`` with ``e1 x e2 = p``.  Tangent coordinates ``a`` of a vector
  ``v`` are ``(v.e1, v.e2)``.
* ``transport_angle(p, q)`` is the angle ``t`` such that a vector with
  coordinates ``a`` in the gauge at ``q`` has coordinates ``rot(t) @ a`` in
  the gauge at ``p`` after parallel transport along the geodesic ``q -> p``.
* Rotating a gauge by ``t`` (``w~ = w o t``) turns the frame by ``+t``;
  coordinates of fixed vectors then change by ``rot(-t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .container import read_container, write_container
from .errors import ContractViolation, FormatError, ResourceLimitError, SingularGeometryError

MAX_LEVEL = 7
STENCIL_SLOTS = 7  # self + at most six neighbours
TWO_PI = 2.0 * np.pi
_ANTIPODAL_EPS = 1e-8
_POLE_EPS = 1e-8

_PHI = (1.0 + 5.0**0.5) / 2.0
_BASE_VERTICES = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=np.float64,
)
_BASE_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


def rot2(t):
    """2x2 rotation matrices for an angle or array of angles (shape ``(..., 2, 2)``)."""
    t = np.asarray(t, dtype=np.float64)
    c, s = np.cos(t), np.sin(t)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


# ---------------------------------------------------------------------------
# grid construction
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IcosphereGrid:
    """Subdivided icosahedron with per-vertex gauges.

    ``neighbors`` is padded with ``-1`` to six columns; ``valence`` holds the
    true neighbour count (5 or 6).  Neighbours are listed counter-clockwise
    around the outward normal, starting from the smallest vertex index.
    """

    level: int
    vertices: np.ndarray
    faces: np.ndarray
    neighbors: np.ndarray
    valence: np.ndarray
    gauge_frames: np.ndarray
    ring_radius: float

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def adjacency(self) -> list[np.ndarray]:
        return [row[: int(k)] for row, k in zip(self.neighbors, self.valence)]

    def with_gauges(self, frames: np.ndarray) -> "IcosphereGrid":
        """Same grid with a different gauge field (used by gauge-equivariance checks)."""
        frames = np.asarray(frames, dtype=np.float64)
        check_frames(self.vertices, frames)
        return replace(self, gauge_frames=frames)


def num_vertices_at(level: int) -> int:
    return 10 * 4**level + 2


def _orient_outward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    normal = np.cross(b - a, c - a)
    flip = np.einsum("ij,ij->i", normal, a + b + c) < 0
    faces = faces.copy()
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def _subdivide(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nv = vertices.shape[0]
    e01 = faces[:, [0, 1]]
    e12 = faces[:, [1, 2]]
    e20 = faces[:, [2, 0]]
    edges = np.sort(np.concatenate([e01, e12, e20]), axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    mid = vertices[uniq[:, 0]] + vertices[uniq[:, 1]]
    mid /= np.linalg.norm(mid, axis=1, keepdims=True)
    nf = faces.shape[0]
    m01 = nv + inverse[:nf]
    m12 = nv + inverse[nf : 2 * nf]
    m20 = nv + inverse[2 * nf :]
    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    new_faces = np.concatenate(
        [
            np.stack([a, m01, m20], 1),
            np.stack([b, m12, m01], 1),
            np.stack([c, m20, m12], 1),
            np.stack([m01, m12, m20], 1),
        ]
    )
    return np.concatenate([vertices, mid]), new_faces


def build_gauges(vertices: np.ndarray) -> np.ndarray:
    """Local east/north frames; poles fall back to ``e1 = x``-hat projected."""
    p = np.asarray(vertices, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    east = np.cross(z, p)
    norm = np.linalg.norm(east, axis=-1, keepdims=True)
    polar = norm[..., 0] < _POLE_EPS
    e1 = np.where(norm > _POLE_EPS, east / np.where(norm > 0, norm, 1.0), 0.0)
    if np.any(polar):
        xp = x - (p[polar] @ x)[:, None] * p[polar]
        e1[polar] = xp / np.linalg.norm(xp, axis=-1, keepdims=True)
    e2 = np.cross(p, e1)
    return np.stack([e1, e2], axis=-2)


def check_frames(vertices: np.ndarray, frames: np.ndarray, tol: float = 1e-10) -> None:
    e1, e2 = frames[:, 0], frames[:, 1]
    dots = [
        np.abs(np.einsum("ij,ij->i", e1, vertices)),
        np.abs(np.einsum("ij,ij->i", e2, vertices)),
        np.abs(np.einsum("ij,ij->i", e1, e2)),
        np.abs(np.linalg.norm(e1, axis=1) - 1),
        np.abs(np.linalg.norm(e2, axis=1) - 1),
    ]
    if max(float(d.max()) for d in dots) > tol:
        raise ContractViolation("gauge frames are not orthonormal tangent frames")
    if np.any(np.einsum("ij,ij->i", np.cross(e1, e2), vertices) <= 0):
        raise ContractViolation("gauge frames are not positively oriented")


def rotate_gauges(frames: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Apply the gauge transformation ``w -> w o t`` vertex-wise (frame turns by ``+t``)."""
    c = np.cos(angles)[:, None]
    s = np.sin(angles)[:, None]
    e1, e2 = frames[:, 0], frames[:, 1]
    return np.stack([c * e1 + s * e2, -s * e1 + c * e2], axis=1)


def _ordered_adjacency(vertices, faces, frames):
    nv = vertices.shape[0]
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    valence = np.bincount(src, minlength=nv)
    if valence.max() > 6 or valence.min() < 5:
        raise AssertionError("icosphere valence outside {5, 6}")
    d = vertices[dst] - vertices[src]
    ang = np.arctan2(
        np.einsum("ij,ij->i", d, frames[src, 1]), np.einsum("ij,ij->i", d, frames[src, 0])
    )
    order = np.lexsort((ang, src))
    src, dst = src[order], dst[order]
    neighbors = np.full((nv, 6), -1, dtype=np.int64)
    start = np.concatenate([[0], np.cumsum(valence)[:-1]])
    for v in range(nv):
        ring = dst[start[v] : start[v] + valence[v]]
        k = int(np.argmin(ring))
        neighbors[v, : valence[v]] = np.roll(ring, -k)
    return neighbors, valence


@lru_cache(maxsize=None)
def _cached_icosphere(level: int) -> IcosphereGrid:
    vertices = _BASE_VERTICES / np.linalg.norm(_BASE_VERTICES, axis=1, keepdims=True)
    faces = _orient_outward(vertices, _BASE_FACES)
    for _ in range(level):
        vertices, faces = _subdivide(vertices, faces)
    vertices = vertices / np.linalg.norm(vertices, axis=1, keepdims=True)
    frames = build_gauges(vertices)
    neighbors, valence = _ordered_adjacency(vertices, faces, frames)
    mask = neighbors >= 0
    rows = np.repeat(np.arange(len(vertices)), 6)[mask.ravel()]
    cols = neighbors[mask]
    cosang = np.clip(np.einsum("ij,ij->i", vertices[rows], vertices[cols]), -1.0, 1.0)
    ring_radius = float(np.mean(np.arccos(cosang)))
    for arr in (vertices, faces, neighbors, valence, frames):
        arr.setflags(write=False)
    return IcosphereGrid(level, vertices, faces, neighbors, valence, frames, ring_radius)


def build_icosphere(level: int) -> IcosphereGrid:
    """Icosphere with ``10 * 4**level + 2`` vertices; deterministic per level."""
    if not isinstance(level, (int, np.integer)) or level < 0 or level > MAX_LEVEL:
        raise ResourceLimitError(f"icosphere level must be an integer in [0, {MAX_LEVEL}], got {level!r}")
    return _cached_icosphere(int(level))


def vertex_areas(grid: IcosphereGrid) -> np.ndarray:
    """Spherical area per vertex (a third of each incident triangle); sums to ``4 pi``."""
    v, f = grid.vertices, grid.faces
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    num = np.abs(np.einsum("ij,ij->i", a, np.cross(b, c)))
    den = 1 + np.einsum("ij,ij->i", a, b) + np.einsum("ij,ij->i", b, c) + np.einsum("ij,ij->i", c, a)
    tri = 2 * np.arctan2(num, den)
    return np.bincount(f.ravel(), weights=np.repeat(tri / 3, 3), minlength=len(v))


# ---------------------------------------------------------------------------
# exponential / log maps and transport
# ---------------------------------------------------------------------------


def exp_map(p, v):
    """Riemannian exponential on the unit sphere (vectorised over leading axes)."""
    p = np.asarray(p, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(np.sum(p * v, axis=-1)) > 1e-10):
        raise ContractViolation("exp_map: velocity is not tangent at p")
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    small = n < 1e-14
    safe = np.where(small, 1.0, n)
    out = np.cos(n) * p + np.sin(n) * v / safe
    return np.where(small, p, out)


def log_map(p, q):
    """Inverse of :func:`exp_map`: tangent vector at ``p`` pointing to ``q``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    c = np.sum(p * q, axis=-1, keepdims=True)
    if np.any(c <= -1.0 + _ANTIPODAL_EPS):
        raise SingularGeometryError("log_map: antipodal points")
    w = q - c * p
    s = np.linalg.norm(w, axis=-1, keepdims=True)
    theta = np.arctan2(s, c)
    small = s < 1e-14  # coincident points up to roundoff
    return np.where(small, 0.0, w * (theta / np.where(small, 1.0, s)))


def parallel_transport(p, q, v):
    """Transport tangent vector ``v`` at ``q`` along the geodesic to ``p``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = np.sum(p * q, axis=-1, keepdims=True)
    if np.any(c <= -1.0 + _ANTIPODAL_EPS):
        raise SingularGeometryError("parallel_transport: antipodal points")
    n = np.cross(q, p)
    s = np.linalg.norm(n, axis=-1, keepdims=True)
    ident = s < 1e-300
    axis = n / np.where(ident, 1.0, s)
    # Rodrigues with cos = c and sin = s
    ax_v = np.sum(axis * v, axis=-1, keepdims=True)
    out = v * c + np.cross(axis, v) * s + axis * ax_v * (1.0 - c)
    return np.where(ident, v, out)


def transport_angle(p, q, gauge_p, gauge_q):
    """Angle of the SO(2) map from ``q``'s transported gauge to ``p``'s gauge, in [0, 2pi)."""
    gauge_p = np.asarray(gauge_p, dtype=np.float64)
    gauge_q = np.asarray(gauge_q, dtype=np.float64)
    a = parallel_transport(p, q, gauge_q[..., 0, :])
    ang = np.arctan2(np.sum(a * gauge_p[..., 1, :], -1), np.sum(a * gauge_p[..., 0, :], -1))
    ang = np.mod(ang, TWO_PI)
    return np.where(ang >= TWO_PI, 0.0, ang)  # mod of a tiny negative rounds to 2 pi


def tangent_coords(frames, v):
    """Coordinates of tangent vectors ``v`` in the given frames (``(..., 2)``)."""
    return np.stack([np.sum(v * frames[..., 0, :], -1), np.sum(v * frames[..., 1, :], -1)], -1)


# ---------------------------------------------------------------------------
# stencils and hierarchies
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GeometryStencil:
    """Per-vertex neighbourhood geometry.

    Slot 0 is the vertex itself (zero log coordinates, zero transport); slots
    1..valence are the neighbours in adjacency order; a padding slot on
    valence-5 vertices points at the vertex itself and is masked out.
    """

    nbr: np.ndarray  # (V, 7) int
    mask: np.ndarray  # (V, 7) bool
    log_coords: np.ndarray  # (V, 7, 2)
    transport: np.ndarray  # (V, 7) angles in [0, 2pi)

    @property
    def num_vertices(self) -> int:
        return self.nbr.shape[0]


def build_stencil(grid: IcosphereGrid) -> GeometryStencil:
    nv = grid.num_vertices
    nbr = np.empty((nv, STENCIL_SLOTS), dtype=np.int64)
    nbr[:, 0] = np.arange(nv)
    nbr[:, 1:] = grid.neighbors
    mask = nbr >= 0
    nbr = np.where(mask, nbr, np.arange(nv)[:, None])
    p = np.broadcast_to(grid.vertices[:, None, :], (nv, STENCIL_SLOTS, 3))
    q = grid.vertices[nbr]
    frames_p = np.broadcast_to(grid.gauge_frames[:, None], (nv, STENCIL_SLOTS, 2, 3))
    logs = tangent_coords(frames_p, log_map(p, q))
    ang = transport_angle(p, q, frames_p, grid.gauge_frames[nbr])
    logs[:, 0] = 0.0
    ang[:, 0] = 0.0
    logs[~mask] = 0.0
    ang[~mask] = 0.0
    for arr in (nbr, mask, logs, ang):
        arr.setflags(write=False)
    return GeometryStencil(nbr, mask, logs, ang)


@dataclass(frozen=True, eq=False)
class PoolStep:
    """Fine-to-coarse averaging map between consecutive grid levels."""

    fine_level: int
    nbr: np.ndarray  # (Vc, 7) indices into the fine grid
    mask: np.ndarray
    transport: np.ndarray  # (Vc, 7) fine -> coarse transport angles
    weights: np.ndarray  # (Vc, 7), zero on padding, rows sum to one


@dataclass(frozen=True, eq=False)
class GridHierarchy:
    grids: list
    steps: list = field(default_factory=list)  # steps[k] pools level k+1 -> k

    @property
    def max_level(self) -> int:
        return len(self.grids) - 1

    def step_from(self, fine_level: int) -> PoolStep:
        if not 1 <= fine_level <= self.max_level:
            raise ContractViolation(f"no pooling step from level {fine_level}")
        return self.steps[fine_level - 1]


def build_hierarchy(max_level: int) -> GridHierarchy:
    if max_level < 1:
        raise ContractViolation("hierarchy needs max_level >= 1")
    grids = [build_icosphere(lv) for lv in range(max_level + 1)]
    steps = []
    for lv in range(max_level):
        coarse, fine = grids[lv], grids[lv + 1]
        nc = coarse.num_vertices
        if not np.allclose(fine.vertices[:nc], coarse.vertices, atol=1e-13, rtol=0):
            raise AssertionError("icosphere levels are not nested")
        st = build_stencil(fine)
        weights = st.mask[:nc].astype(np.float64)
        weights /= weights.sum(axis=1, keepdims=True)
        # coarse and fine gauges coincide at shared vertices, so the fine stencil's
        # transport angles are already fine -> coarse
        steps.append(PoolStep(lv + 1, st.nbr[:nc], st.mask[:nc], st.transport[:nc], weights))
    return GridHierarchy(grids, steps)


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RotationOp:
    """Resampling plan for ``(R f)(p) = push_R f(R^-1 p)``.

    ``src``/``weights``/``angles`` have shape ``(V, 3)``: source vertices of
    the triangle containing ``R^-1 p``, barycentric weights, and for each
    corner the angle turning that corner's gauge (transported to ``R^-1 p``
    and pushed forward by ``R``) onto the gauge at ``p``.
    """

    rotation: np.ndarray
    level: int
    src: np.ndarray
    weights: np.ndarray
    angles: np.ndarray

    @property
    def is_permutation(self) -> bool:
        return bool(np.all(self.weights[:, 0] == 1.0))


def check_rotation(R, tol: float = 1e-12) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ContractViolation("rotation must be a 3x3 matrix")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol or abs(np.linalg.det(R) - 1.0) > tol:
        raise ContractViolation("matrix is not in SO(3)")
    return R


def quaternion_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a uniformly random unit quaternion."""
    q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


@lru_cache(maxsize=None)
def _face_tables(level: int):
    grid = build_icosphere(level)
    corners = grid.vertices[grid.faces]  # (F, 3 corners, 3 xyz)
    inv = np.linalg.inv(np.transpose(corners, (0, 2, 1)))
    incident = [[] for _ in range(grid.num_vertices)]
    for f, tri in enumerate(grid.faces):
        for v in tri:
            incident[v].append(f)
    width = max(len(x) for x in incident)
    table = np.full((grid.num_vertices, width), -1, dtype=np.int64)
    for v, fs in enumerate(incident):
        table[v, : len(fs)] = fs
    return cKDTree(grid.vertices), inv, table


def _locate(level: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Containing face and gnomonic barycentric weights for unit vectors."""
    grid = build_icosphere(level)
    tree, inv, table = _face_tables(level)
    _, near = tree.query(points, k=3)
    cand = table[near].reshape(len(points), -1)
    valid = cand >= 0
    lam = np.einsum("nkij,nj->nki", inv[np.where(valid, cand, 0)], points)
    with np.errstate(divide="ignore", invalid="ignore"):  # padded or far-side faces are masked below
        lam = lam / lam.sum(axis=-1, keepdims=True)
    lam = np.nan_to_num(lam, nan=-np.inf)
    score = np.where(valid, lam.min(axis=-1), -np.inf)
    best = np.argmax(score, axis=1)
    rows = np.arange(len(points))
    face = cand[rows, best]
    bary = lam[rows, best]
    bad = score[rows, best] < -1e-9
    if np.any(bad):
        all_lam = np.einsum("fij,nj->nfi", inv, points[bad])
        with np.errstate(divide="ignore", invalid="ignore"):
            all_lam = np.nan_to_num(all_lam / all_lam.sum(axis=-1, keepdims=True), nan=-np.inf)
        fbest = np.argmax(all_lam.min(axis=-1), axis=1)
        face[bad] = fbest
        bary[bad] = all_lam[np.arange(bad.sum()), fbest]
    bary = np.clip(bary, 0.0, None)
    bary /= bary.sum(axis=1, keepdims=True)
    return grid.faces[face], bary


def build_rotation_plan(R, grid: IcosphereGrid) -> RotationOp:
    R = check_rotation(R)
    targets = grid.vertices
    sources = targets @ R  # rows are R^T p = R^-1 p
    corners, bary = _locate(grid.level, sources)
    snap = bary.max(axis=1) > 1.0 - 1e-9
    if np.any(snap):
        pick = np.argmax(bary[snap], axis=1)
        corners[snap] = np.stack(
            [corners[snap][np.arange(snap.sum()), pick]] + [corners[snap][np.arange(snap.sum()), pick]] * 2, 1
        )
        bary[snap] = np.array([1.0, 0.0, 0.0])
    frames = grid.gauge_frames
    s = np.repeat(sources[:, None, :], 3, axis=1)
    vi = grid.vertices[corners]
    e1 = parallel_transport(s, vi, frames[corners][..., 0, :])
    pushed = e1 @ R.T
    fp = frames[:, None]
    ang = np.arctan2(np.sum(pushed * fp[..., 1, :], -1), np.sum(pushed * fp[..., 0, :], -1))
    return RotationOp(R, grid.level, corners, bary, np.mod(ang, TWO_PI))


@lru_cache(maxsize=None)
def icosahedral_rotations() -> np.ndarray:
    """The 60 rotations mapping the base icosahedron (hence every level) onto itself."""
    v = _BASE_VERTICES / np.linalg.norm(_BASE_VERTICES, axis=1, keepdims=True)
    grid0 = build_icosphere(0)

    def frame(a, b):
        b = b - (a @ b) * a
        b = b / np.linalg.norm(b)
        return np.stack([a, b, np.cross(a, b)], axis=1)

    ref = frame(v[0], v[grid0.neighbors[0, 0]])
    mats = []
    for i in range(12):
        for n in grid0.neighbors[i, :5]:
            mats.append(frame(v[i], v[n]) @ ref.T)
    mats = np.array(mats)
    tree = cKDTree(v)
    for R in mats:
        d, _ = tree.query(v @ R.T)
        if d.max() > 1e-12:
            raise AssertionError("generated rotation is not an icosahedral symmetry")
    mats.setflags(write=False)
    return mats


@lru_cache(maxsize=None)
def vertex_permutations(level: int) -> np.ndarray:
    """``perm[g, v]`` = index of ``R_g v`` for each icosahedral rotation."""
    grid = build_icosphere(level)
    tree = cKDTree(grid.vertices)
    out = []
    for R in icosahedral_rotations():
        d, idx = tree.query(grid.vertices @ R.T)
        if d.max() > 1e-10:
            raise AssertionError("icosahedral rotation does not permute grid vertices")
        out.append(idx)
    perms = np.array(out)
    perms.setflags(write=False)
    return perms


@lru_cache(maxsize=None)
def sampling_phases(level: int) -> np.ndarray:
    """Per-vertex angular offsets that the icosahedral group maps onto each other.

    Within every vertex orbit the offsets are pushed forward from the orbit's
    smallest index, so an icosahedral rotation shifts each vertex's offset by
    exactly its gauge-correction angle, up to a stabiliser rotation (a
    multiple of 72 or 180 degrees).
    """
    grid = build_icosphere(level)
    perms = vertex_permutations(level)
    rep = perms.min(axis=0)
    phase = np.full(grid.num_vertices, np.nan)
    e1 = grid.gauge_frames[:, 0]
    for R, perm in zip(icosahedral_rotations(), perms):
        pushed = e1 @ R.T  # R e1(v), a tangent vector at perm[v]
        tgt = grid.gauge_frames[perm]
        beta = np.arctan2(np.sum(pushed * tgt[:, 1], -1), np.sum(pushed * tgt[:, 0], -1))
        is_rep = rep == np.arange(grid.num_vertices)
        targets = perm[is_rep]
        fresh = np.isnan(phase[targets])
        phase[targets[fresh]] = np.mod(beta[is_rep][fresh], TWO_PI)
    assert not np.any(np.isnan(phase))
    phase.setflags(write=False)
    return phase


# ---------------------------------------------------------------------------
# geometry cache
# ---------------------------------------------------------------------------

GEOMETRY_KIND = "geometry"


def save_geometry(path: str | Path, grid: IcosphereGrid, extra: dict | None = None) -> None:
    st = build_stencil(grid)
    arrays = {
        "vertices": grid.vertices,
        "faces": grid.faces,
        "neighbors": grid.neighbors,
        "valence": grid.valence,
        "gauge_frames": grid.gauge_frames,
        "stencil_nbr": st.nbr,
        "stencil_mask": st.mask,
        "log_coords": st.log_coords,
        "transport": st.transport,
    }
    if extra:
        arrays.update(extra)
    meta = {"kind": GEOMETRY_KIND, "level": grid.level, "ring_radius": grid.ring_radius}
    write_container(path, meta, arrays)


def load_geometry(path: str | Path) -> tuple[IcosphereGrid, GeometryStencil, dict]:
    """Load and validate a geometry cache; returns grid, stencil and any extra sections."""
    meta, arrays = read_container(path)
    if meta.get("kind") != GEOMETRY_KIND:
        raise FormatError(f"{path}: not a geometry cache")
    try:
        level = int(meta["level"])
        grid = IcosphereGrid(
            level,
            arrays.pop("vertices"),
            arrays.pop("faces"),
            arrays.pop("neighbors"),
            arrays.pop("valence"),
            arrays.pop("gauge_frames"),
            float(meta["ring_radius"]),
        )
        st = GeometryStencil(
            arrays.pop("stencil_nbr"),
            arrays.pop("stencil_mask").astype(bool),
            arrays.pop("log_coords"),
            arrays.pop("transport"),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing section {exc}") from exc
    validate_grid(grid)
    return grid, st, arrays


def validate_grid(grid: IcosphereGrid) -> None:
    if grid.num_vertices != num_vertices_at(grid.level):
        raise FormatError("vertex count does not match level")
    if np.max(np.abs(np.linalg.norm(grid.vertices, axis=1) - 1.0)) > 1e-12:
        raise FormatError("vertices are not unit vectors")
    if int(np.sum(grid.valence == 5)) != 12 or np.any((grid.valence != 5) & (grid.valence != 6)):
        raise FormatError("valence pattern is not that of an icosphere")
    try:
        check_frames(grid.vertices, grid.gauge_frames)
    except ContractViolation as exc:
        raise FormatError(str(exc)) from exc
    adj = grid.adjacency
    for v, ring in enumerate(adj):
        for q in ring:
            if v not in adj[q]:
                raise FormatError("adjacency is not symmetric")
