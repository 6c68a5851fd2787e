"""Layers with hand-written adjoints: steerable convolutions, regular
nonlinearity, transport-aware pooling, global pooling and a dense head.

Feature arrays are laid out ``(batch, vertices, channels, type_dim)``; every
channel of a field carries the same :class:`~gevnet.steerable.FeatureType`.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, ContractViolation, ResolutionError, ShapeMismatchError, UnsupportedTypeError
from .geometry import (
    GeometryStencil,
    GridHierarchy,
    IcosphereGrid,
    PoolStep,
    RotationOp,
    TWO_PI,
    build_icosphere,
    build_stencil,
    load_geometry,
    sampling_phases,
    save_geometry,
)
from .steerable import (
    RHO0,
    RHO01,
    RHO1,
    ConvStencil,
    FeatureType,
    as_type,
    basis_first_order,
    basis_second_order,
    homogenize_stencil,
    response_bank,
)


@dataclass(frozen=True, eq=False)
class FeatureField:
    values: np.ndarray  # (B, V, C, D) or (V, C, D)
    level: int
    ftype: FeatureType

    def __post_init__(self):
        v = self.values
        if v.ndim not in (3, 4):
            raise ShapeMismatchError("field values must be (V, C, D) or (B, V, C, D)")
        if v.shape[-1] != self.ftype.dim:
            raise ShapeMismatchError(f"type dim {self.ftype.dim} != trailing axis {v.shape[-1]}")
        if v.shape[-3] != 10 * 4**self.level + 2:
            raise ShapeMismatchError(f"{v.shape[-3]} vertices do not match level {self.level}")
        if not np.all(np.isfinite(v)):
            raise ContractViolation("field contains non-finite values")

    @property
    def channels(self) -> int:
        return self.values.shape[-2]

    def replace(self, values) -> "FeatureField":
        return FeatureField(values, self.level, self.ftype)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatchError("expected (B, V, C, D) features")
    return x, False


# ---------------------------------------------------------------------------
# steerable convolution (orders 1 and 2)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _conv_tables(rho_in: FeatureType, rho_out: FeatureType):
    b1 = basis_first_order(rho_in, rho_out)
    b2 = basis_second_order(rho_in, rho_out)
    R = response_bank(rho_in).num_rows
    M = b2.num_monomials
    gather_a = np.zeros((R, M))
    gather_a[b2.mono_a, np.arange(M)] = 1.0
    gather_b = np.zeros((R, M))
    gather_b[b2.mono_b, np.arange(M)] = 1.0
    scatter = np.zeros((M, rho_out.dim))
    scatter[np.arange(M), b2.mono_out] = 1.0
    elem = np.zeros((len(b2), M))
    elem[b2.mono_element, np.arange(M)] = 1.0
    return b1, b2, gather_a, gather_b, scatter, elem


def conv_param_shapes(c_in, rho_in, c_out, rho_out, order: int, pairing: str = "full", bias: bool = True):
    rho_in, rho_out = as_type(rho_in), as_type(rho_out)
    b1 = basis_first_order(rho_in, rho_out)
    shapes = {"w1": (c_out, c_in, len(b1))}
    if order == 2:
        b2 = basis_second_order(rho_in, rho_out)
        if pairing == "full":
            shapes["w2"] = (c_out, c_in, c_in, len(b2))
        elif pairing == "diagonal":
            shapes["w2"] = (c_out, c_in, len(b2))
        else:
            raise ContractViolation(f"unknown pairing {pairing!r}")
    elif order != 1:
        raise ContractViolation("order must be 1 or 2")
    if bias and rho_out.n0:
        shapes["b"] = (c_out, rho_out.n0)
    return shapes


def _conv_forward(stencil: ConvStencil, params: dict, x: np.ndarray, rho_out: FeatureType):
    x, squeeze = _batched(x)
    if x.shape[1] != stencil.num_vertices or x.shape[3] != stencil.rho_in.dim:
        raise ShapeMismatchError("input field does not match the stencil's level or type")
    b1, b2, ga, gb, sc, el = _conv_tables(stencil.rho_in, rho_out)
    w1 = params["w1"]
    if w1.shape[1] != x.shape[2] or w1.shape[2] != len(b1):
        raise ShapeMismatchError("first-order coefficients do not match input channels/basis")
    dt = x.dtype
    kt = stencil.kt.astype(dt, copy=False)
    z = kernels.stencil_forward(kt, stencil.nbr, x)  # (B, V, C, R)
    w1eff = np.einsum("kce,erO->kcrO", w1, b1.placement.astype(dt, copy=False))
    y = np.einsum("bvcr,kcrO->bvkO", z, w1eff, optimize=True)
    cache = {"x": x, "z": z, "w1eff": w1eff, "squeeze": squeeze}
    if "w2" in params:
        w2m = params["w2"] @ el.astype(dt, copy=False)  # (..., M)
        za = z @ ga.astype(dt, copy=False)  # (B, V, C, M)
        zb = z @ gb.astype(dt, copy=False)
        if w2m.ndim == 4:
            mono = np.zeros((x.shape[0], x.shape[1], w2m.shape[0], w2m.shape[3]), dtype=dt)
            for c1 in range(x.shape[2]):
                mono += np.einsum("kdm,bvdm->bvkm", w2m[:, c1], zb) * za[:, :, None, c1]
        else:
            mono = np.einsum("kcm,bvcm->bvkm", w2m, za * zb)
        y = y + mono @ sc.astype(dt, copy=False)
        cache.update(za=za, zb=zb, w2m=w2m)
    if "b" in params:
        y[..., : rho_out.n0] += params["b"]
    return (y[0] if squeeze else y), cache


def gevconv_forward(stencil: ConvStencil, params: dict, x: np.ndarray, rho_out) -> np.ndarray:
    """Order-1 (``w1`` only) or order-2 (``w1`` and ``w2``) steerable convolution.

    ``w2`` of shape ``(c_out, c_in, c_in, B2)`` pairs every ordered channel
    pair; shape ``(c_out, c_in, B2)`` pairs each channel with itself.
    """
    return _conv_forward(stencil, params, np.asarray(x), as_type(rho_out))[0]


def _conv_backward(stencil: ConvStencil, params: dict, cache: dict, gy: np.ndarray, rho_out: FeatureType):
    b1, b2, ga, gb, sc, el = _conv_tables(stencil.rho_in, rho_out)
    x, z = cache["x"], cache["z"]
    if cache["squeeze"]:
        gy = gy[None]
    if gy.shape[:2] != x.shape[:2] or gy.shape[3] != rho_out.dim:
        raise ShapeMismatchError("output gradient shape does not match forward output")
    dt = x.dtype
    grads = {}
    if "b" in params:
        grads["b"] = gy[..., : rho_out.n0].sum(axis=(0, 1))
    gw1eff = np.einsum("bvcr,bvkO->kcrO", z, gy, optimize=True)
    grads["w1"] = np.einsum("kcrO,erO->kce", gw1eff, b1.placement.astype(dt, copy=False))
    gz = np.einsum("bvkO,kcrO->bvcr", gy, cache["w1eff"], optimize=True)
    if "w2" in params:
        za, zb, w2m = cache["za"], cache["zb"], cache["w2m"]
        gmono = gy @ sc.T.astype(dt, copy=False)  # (B, V, K, M)
        if w2m.ndim == 4:
            gw2m = np.zeros_like(w2m)
            gza = np.zeros_like(za)
            gzb = np.zeros_like(zb)
            for c1 in range(x.shape[2]):
                t = gmono * za[:, :, None, c1]  # (B, V, K, M)
                gw2m[:, c1] = np.einsum("bvkm,bvdm->kdm", t, zb, optimize=True)
                gzb += np.einsum("bvkm,kdm->bvdm", t, w2m[:, c1], optimize=True)
                gza[:, :, c1] = np.einsum("bvkm,kdm,bvdm->bvm", gmono, w2m[:, c1], zb, optimize=True)
        else:
            gw2m = np.einsum("bvkm,bvcm->kcm", gmono, za * zb, optimize=True)
            gp = np.einsum("bvkm,kcm->bvcm", gmono, w2m, optimize=True)
            gza, gzb = gp * zb, gp * za
        grads["w2"] = gw2m @ el.T.astype(dt, copy=False)
        gz = gz + gza @ ga.T.astype(dt, copy=False) + gzb @ gb.T.astype(dt, copy=False)
    kt = stencil.kt.astype(dt, copy=False)
    gx = kernels.stencil_adjoint(kt, stencil.nbr, gz, x.shape[1])
    return grads, (gx[0] if cache["squeeze"] else gx)


def gevconv_backward(stencil: ConvStencil, params: dict, x: np.ndarray, grad_out: np.ndarray, rho_out):
    """Exact adjoint of :func:`gevconv_forward`: returns ``(param_grads, grad_in)``."""
    rho_out = as_type(rho_out)
    _, cache = _conv_forward(stencil, params, np.asarray(x), rho_out)
    return _conv_backward(stencil, params, cache, np.asarray(grad_out), rho_out)


# ---------------------------------------------------------------------------
# regular nonlinearity
# ---------------------------------------------------------------------------


def _units(ftype: FeatureType) -> int:
    if ftype.n1 > ftype.n0:
        raise UnsupportedTypeError("regular nonlinearity needs at least one scalar per vector component")
    return ftype.n0


def _to_units(x: np.ndarray, ftype: FeatureType) -> np.ndarray:
    """``(..., D)`` -> ``(..., U, 3)`` Fourier coefficients ``(s, r_x, r_y)``."""
    u = _units(ftype)
    a = np.zeros(x.shape[:-1] + (u, 3), dtype=x.dtype)
    a[..., :, 0] = x[..., : ftype.n0]
    a[..., : ftype.n1, 1:] = x[..., ftype.n0 :].reshape(x.shape[:-1] + (ftype.n1, 2))
    return a


def _from_units(a: np.ndarray, ftype: FeatureType) -> np.ndarray:
    out = np.empty(a.shape[:-2] + (ftype.dim,), dtype=a.dtype)
    out[..., : ftype.n0] = a[..., :, 0]
    out[..., ftype.n0 :] = a[..., : ftype.n1, 1:].reshape(a.shape[:-2] + (2 * ftype.n1,))
    return out


def sample_matrices(N: int, phases: np.ndarray | None, num_vertices: int, dtype=np.float64):
    """Synthesis ``S[v, k, q]`` and least-squares analysis ``P[v, k, q]`` matrices."""
    if N < 3:
        raise ResolutionError("regular nonlinearity needs N >= 3 samples")
    ph = np.zeros(num_vertices) if phases is None else np.asarray(phases, dtype=np.float64)
    th = ph[:, None] + TWO_PI * np.arange(N)[None] / N
    S = np.stack([np.ones_like(th), np.cos(th), np.sin(th)], -1)
    P = S * np.array([1.0, 2.0, 2.0]) / N
    return S.astype(dtype), P.astype(dtype)


def regular_nonlinearity(
    x: np.ndarray,
    ftype,
    N: int,
    affine: tuple | None = None,
    mode: str = "eval",
    running: dict | None = None,
    phases: np.ndarray | None = None,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> np.ndarray:
    """Sample, ReLU, optionally batch-normalize, project back to ``(s, r)``.

    ``affine=None`` disables normalization.  Otherwise ``affine = (scale,
    shift)`` with shape ``(C, U)`` each.  In ``"train"`` mode batch statistics
    are used and ``running`` (``mean``/``var`` arrays) is updated in place; in
    ``"eval"`` mode the running statistics are used.
    """
    return _nl_forward(np.asarray(x), as_type(ftype), N, affine, mode, running, phases, momentum, eps)[0]


def _nl_forward(x, ftype, N, affine, mode, running, phases, momentum=0.1, eps=1e-5):
    x, squeeze = _batched(x)
    S, _ = sample_matrices(N, phases, x.shape[1], x.dtype)
    B, V, C, _ = x.shape
    a = _to_units(x, ftype)
    U = a.shape[3]
    a = a.reshape(B, V, C * U, 3)
    cs, sn = np.ascontiguousarray(S[..., 1]), np.ascontiguousarray(S[..., 2])
    raw, sy, sy2 = kernels.nl_forward(a, cs, sn)
    weights = np.array([1.0, 2.0, 2.0], dtype=x.dtype) / N
    proj = raw * weights
    cache = {"a": a, "cs": cs, "sn": sn, "weights": weights, "squeeze": squeeze, "ftype": ftype, "shape": (B, V, C, U)}
    if affine is not None:
        scale, shift = (np.asarray(t).reshape(-1) for t in affine)
        if mode == "train":
            n = B * V * N
            mean = sy / n
            var = np.maximum(sy2 / n - mean**2, 0.0)
            if running is not None:
                running["mean"] *= 1 - momentum
                running["mean"] += momentum * mean.reshape(C, U)
                running["var"] *= 1 - momentum
                running["var"] += momentum * var.reshape(C, U) * n / max(n - 1, 1)
        elif mode == "eval":
            if running is None:
                raise ContractViolation("eval mode needs running statistics")
            mean = running["mean"].reshape(-1).astype(x.dtype)
            var = running["var"].reshape(-1).astype(x.dtype)
        else:
            raise ContractViolation(f"unknown mode {mode!r}")
        inv = 1.0 / np.sqrt(var + eps)
        # normalization is affine in the samples and the projection is linear,
        # so it commutes to the projected coefficients; cos and sin sum to 0
        centred = proj.copy()
        centred[..., 0] -= mean
        yhat = centred * inv[:, None]
        out = yhat * scale[:, None]
        out[..., 0] += shift
        cache.update(yhat=yhat, inv=inv, mean=mean, scale=scale, mode=mode, n=B * V * N)
    else:
        out = proj
    out = _from_units(out.reshape(B, V, C, U, 3), ftype)
    return (out[0] if squeeze else out), cache


def nl_moments(x, ftype, N: int, phases=None):
    """Per-unit sums of ReLU samples and their squares, plus the sample count."""
    x, _ = _batched(np.asarray(x))
    S, _ = sample_matrices(N, phases, x.shape[1], x.dtype)
    B, V, C, _ = x.shape
    a = _to_units(x, as_type(ftype))
    a = a.reshape(B, V, C * a.shape[3], 3)
    _, sy, sy2 = kernels.nl_forward(a, np.ascontiguousarray(S[..., 1]), np.ascontiguousarray(S[..., 2]))
    return sy, sy2, B * V * N


def _nl_backward(cache, gy):
    ftype = cache["ftype"]
    if cache["squeeze"]:
        gy = gy[None]
    B, V, C, U = cache["shape"]
    g = _to_units(gy, ftype).reshape(B, V, C * U, 3)
    W = C * U
    grads = {}
    zero = np.zeros(W, dtype=g.dtype)
    c0, c1, mu = zero, zero, zero
    if "yhat" in cache:
        inv, scale = cache["inv"], cache["scale"]
        gscale = np.einsum("bvwq,bvwq->w", g, cache["yhat"])
        gshift = g[..., 0].sum(axis=(0, 1))
        grads["bn_scale"] = gscale.reshape(C, U)
        grads["bn_shift"] = gshift.reshape(C, U)
        gd = g * (scale * inv)[:, None] * cache["weights"]
        if cache["mode"] == "train":
            n = cache["n"]
            A = gscale / inv
            c0 = -scale * inv * gshift / n
            c1 = -scale * A * inv**3 / n
            mu = cache["mean"]
    else:
        gd = g * cache["weights"]
    ga = kernels.nl_backward(cache["a"], cache["cs"], cache["sn"], gd, c0, c1, mu)
    gx = _from_units(ga.reshape(B, V, C, U, 3), ftype)
    return grads, (gx[0] if cache["squeeze"] else gx)


# ---------------------------------------------------------------------------
# pooling, rotation and gauge transforms (all via the stencil kernel)
# ---------------------------------------------------------------------------


def _transport_stencil(angles, weights, ftype: FeatureType) -> np.ndarray:
    return weights[..., None, None] * ftype.rep(angles)


def pool_features(step: PoolStep, x: np.ndarray, ftype) -> np.ndarray:
    """Average transported fine-level features onto the coarse vertices."""
    ftype = as_type(ftype)
    x, squeeze = _batched(np.asarray(x))
    if x.shape[1] != 10 * 4**step.fine_level + 2:
        raise ShapeMismatchError("field is not at the pooling step's fine level")
    kt = _transport_stencil(step.transport, step.weights, ftype).astype(x.dtype)
    y = kernels.stencil_forward(kt, step.nbr, x)
    return y[0] if squeeze else y


def _pool_backward(step: PoolStep, gy: np.ndarray, ftype: FeatureType, num_fine: int) -> np.ndarray:
    gy, squeeze = _batched(gy)
    kt = _transport_stencil(step.transport, step.weights, ftype).astype(gy.dtype)
    gx = kernels.stencil_adjoint(kt, step.nbr, gy, num_fine)
    return gx[0] if squeeze else gx


def rotate_field(op: RotationOp, x: np.ndarray, ftype) -> np.ndarray:
    """Resample ``x`` under the rotation with per-corner gauge correction."""
    ftype = as_type(ftype)
    x, squeeze = _batched(np.asarray(x))
    if x.shape[1] != op.src.shape[0]:
        raise ShapeMismatchError("rotation plan was built for a different grid")
    kt = _transport_stencil(op.angles, op.weights, ftype).astype(x.dtype)
    y = kernels.stencil_forward(kt, op.src, x)
    return y[0] if squeeze else y


def gauge_transform_field(x: np.ndarray, angles: np.ndarray, ftype) -> np.ndarray:
    """Coordinates after turning each vertex frame by ``angles`` (``rho(-angle)`` on vectors)."""
    ftype = as_type(ftype)
    x = np.asarray(x)
    angles = np.asarray(angles, dtype=np.float64)
    if angles.shape != (x.shape[-3],):
        raise ShapeMismatchError("need exactly one angle per vertex")
    rep = ftype.rep(-angles).astype(x.dtype)
    return np.einsum("vde,...vce->...vcd", rep, x)


def global_invariant_pool(x: np.ndarray, ftype) -> np.ndarray:
    """Mean over vertices of a purely scalar field: ``(B, C * n0)``."""
    ftype = as_type(ftype)
    if not ftype.is_scalar:
        raise UnsupportedTypeError("global pooling needs a pure rho0 field")
    x = np.asarray(x)
    m = x.mean(axis=-3)
    return m.reshape(m.shape[:-2] + (-1,))


def dense_head(params: dict, v: np.ndarray) -> np.ndarray:
    """Affine map ``v @ W.T + b``."""
    W, b = params["W"], params["b"]
    if v.shape[-1] != W.shape[1]:
        raise ShapeMismatchError(f"dense layer expects {W.shape[1]} inputs, got {v.shape[-1]}")
    return v @ W.T + b


# ---------------------------------------------------------------------------
# geometry context shared by layers
# ---------------------------------------------------------------------------


CACHE_ENV = "GEVNET_CACHE_DIR"
CACHED_TYPES = (RHO0, RHO1, RHO01)


def cache_dir() -> Path | None:
    """Directory named by ``GEVNET_CACHE_DIR``, or None when unset."""
    d = os.environ.get(CACHE_ENV)
    return Path(d) if d else None


def cache_path(directory, level: int) -> Path:
    return Path(directory) / f"geometry_L{level}.gevc"


def _kt_section(t: FeatureType) -> str:
    return f"kt_{t.n0}_{t.n1}"


def write_geometry_cache(path, level: int, Q: int = 1000, types=CACHED_TYPES) -> None:
    """Grid, stencil geometry and homogenized kernels for ``types`` in one container."""
    grid = build_icosphere(level)
    geom = build_stencil(grid)
    extra = {"stencil_Q": np.array([Q], dtype=np.int64)}
    for t in types:
        extra[_kt_section(t)] = homogenize_stencil(grid, geom, t, Q).kt
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_geometry(path, grid, extra)


class GeometryContext:
    """Lazily builds and caches stencils, pooling steps and sampling phases.

    ``frames`` optionally overrides the gauge field per level, which is how
    the gauge-equivariance checks rebuild every stencil in a new gauge.
    With ``cache`` (a directory) levels are read from geometry caches when
    present; a cache baked with a different Q is a configuration error.
    """

    def __init__(self, Q: int = 1000, frames: dict | None = None, cache=None):
        self.Q = int(Q)
        self.frames = dict(frames or {})
        self.cache = Path(cache) if cache else None
        self._grids: dict = {}
        self._geom: dict = {}
        self._conv: dict = {}
        self._steps: dict = {}
        self._loaded: set = set()

    def with_gauges(self, level: int, frames: np.ndarray) -> "GeometryContext":
        fr = dict(self.frames)
        fr[level] = frames
        return GeometryContext(self.Q, fr)

    def load_cache(self, path) -> int:
        """Adopt a geometry cache file; returns its level."""
        grid, geom, extra = load_geometry(path)
        lv = grid.level
        if lv in self.frames:
            raise ConfigError("cannot combine a geometry cache with overridden gauges")
        if "stencil_Q" in extra and int(extra["stencil_Q"][0]) != self.Q:
            raise ConfigError(f"{path}: cache baked with Q={int(extra['stencil_Q'][0])}, expected Q={self.Q}")
        self._grids[lv], self._geom[lv] = grid, geom
        for t in CACHED_TYPES:
            kt = extra.get(_kt_section(t))
            if kt is not None:
                self._conv[(lv, t)] = ConvStencil(lv, self.Q, t, geom.nbr, kt)
        self._loaded.add(lv)
        return lv

    def _from_cache(self, level: int) -> None:
        if self.cache is None or level in self._loaded or level in self.frames:
            return
        self._loaded.add(level)
        path = cache_path(self.cache, level)
        if path.exists():
            got = self.load_cache(path)
            if got != level:
                raise ConfigError(f"{path}: holds level {got}, expected {level}")

    def grid(self, level: int) -> IcosphereGrid:
        self._from_cache(level)
        if level not in self._grids:
            g = build_icosphere(level)
            if level in self.frames:
                g = g.with_gauges(self.frames[level])
            self._grids[level] = g
        return self._grids[level]

    def geometry(self, level: int) -> GeometryStencil:
        self._from_cache(level)
        if level not in self._geom:
            self._geom[level] = build_stencil(self.grid(level))
        return self._geom[level]

    def conv_stencil(self, level: int, rho_in: FeatureType) -> ConvStencil:
        self._from_cache(level)
        key = (level, rho_in)
        if key not in self._conv:
            self._conv[key] = homogenize_stencil(self.grid(level), self.geometry(level), rho_in, self.Q)
        return self._conv[key]

    def pool_step(self, fine_level: int) -> PoolStep:
        if fine_level < 1:
            raise ContractViolation("cannot pool below level 0")
        if fine_level not in self._steps:
            fine, coarse = self.grid(fine_level), self.grid(fine_level - 1)
            st = self.geometry(fine_level)
            nc = coarse.num_vertices
            if not np.allclose(fine.gauge_frames[:nc], coarse.gauge_frames, atol=1e-12):
                raise ContractViolation("coarse and fine gauges differ at shared vertices")
            w = st.mask[:nc].astype(np.float64)
            w /= w.sum(axis=1, keepdims=True)
            self._steps[fine_level] = PoolStep(fine_level, st.nbr[:nc], st.mask[:nc], st.transport[:nc], w)
        return self._steps[fine_level]

    def phases(self, level: int) -> np.ndarray:
        return sampling_phases(level)


def hierarchy_context(hierarchy: GridHierarchy, Q: int = 1000) -> GeometryContext:
    ctx = GeometryContext(Q)
    for g in hierarchy.grids:
        ctx._grids[g.level] = g
    for s in hierarchy.steps:
        ctx._steps[s.fine_level] = s
    return ctx


# ---------------------------------------------------------------------------
# layer objects
# ---------------------------------------------------------------------------


class Layer:
    kind = "Layer"

    def __init__(self):
        self.params: dict = {}
        self.grads: dict = {}
        self.buffers: dict = {}

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def _accumulate(self, grads: dict):
        for k, g in grads.items():
            if k in self.grads:
                self.grads[k] += g
            else:
                self.grads[k] = g.copy()

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class SteerableConv(Layer):
    """GEConv (``order=1``) or GEVConv (``order=2``)."""

    def __init__(self, c_in, rho_in, c_out, rho_out, order, level, bias=True, pairing="full"):
        super().__init__()
        self.kind = "GEVConv" if order == 2 else "GEConv"
        self.c_in, self.c_out = int(c_in), int(c_out)
        self.rho_in, self.rho_out = as_type(rho_in), as_type(rho_out)
        self.order, self.level, self.pairing = order, level, pairing
        self.shapes = conv_param_shapes(c_in, rho_in, c_out, rho_out, order, pairing, bias)
        self.params = {k: np.zeros(s) for k, s in self.shapes.items()}

    def init(self, rng: np.random.Generator):
        for k, s in self.shapes.items():
            if k == "b":
                self.params[k] = np.zeros(s)
            else:
                fan = int(np.prod(s[1:-1])) * s[-1]
                self.params[k] = rng.normal(0.0, 1.0 / np.sqrt(fan), s)

    def forward(self, x, ctx: GeometryContext, train: bool = False):
        st = ctx.conv_stencil(self.level, self.rho_in)
        params = {k: v.astype(x.dtype, copy=False) for k, v in self.params.items()}
        y, self._cache = _conv_forward(st, params, x, self.rho_out)
        self._stencil, self._p = st, params
        return y

    def backward(self, gy):
        grads, gx = _conv_backward(self._stencil, self._p, self._cache, gy, self.rho_out)
        self._accumulate(grads)
        return gx


class RegularNonlinearity(Layer):
    kind = "Nonlinearity"

    def __init__(self, channels, ftype, level, N=101, batchnorm=True, momentum=0.1):
        super().__init__()
        self.ftype, self.level, self.N = as_type(ftype), level, int(N)
        self.units = _units(self.ftype)
        self.batchnorm, self.momentum = batchnorm, momentum
        if batchnorm:
            self.params = {"bn_scale": np.ones((channels, self.units)), "bn_shift": np.zeros((channels, self.units))}
            self.buffers = {"mean": np.zeros((channels, self.units)), "var": np.ones((channels, self.units))}

    def init(self, rng):
        pass

    def forward(self, x, ctx: GeometryContext, train: bool = False):
        affine = None
        if self.batchnorm:
            affine = (self.params["bn_scale"].astype(x.dtype), self.params["bn_shift"].astype(x.dtype))
        y, self._cache = _nl_forward(
            x, self.ftype, self.N, affine, "train" if train else "eval",
            self.buffers if self.batchnorm else None, ctx.phases(self.level), self.momentum,
        )
        return y

    def moments(self, x, ctx: GeometryContext):
        return nl_moments(x, self.ftype, self.N, ctx.phases(self.level))

    def set_statistics(self, total, total_sq, count):
        """Replace the running statistics by exact population values."""
        mean = np.asarray(total) / count
        var = np.maximum(np.asarray(total_sq) / count - mean**2, 0.0) * count / max(count - 1, 1)
        self.buffers["mean"] = mean.reshape(self.buffers["mean"].shape).astype(np.float64)
        self.buffers["var"] = var.reshape(self.buffers["var"].shape).astype(np.float64)

    def backward(self, gy):
        grads, gx = _nl_backward(self._cache, gy)
        self._accumulate(grads)
        return gx


class Pool(Layer):
    kind = "Pool"

    def __init__(self, ftype, level):
        super().__init__()
        self.ftype, self.level = as_type(ftype), level  # level of the input (fine) grid

    def init(self, rng):
        pass

    def forward(self, x, ctx, train=False):
        self._step = ctx.pool_step(self.level)
        self._nfine = x.shape[-3]
        return pool_features(self._step, x, self.ftype)

    def backward(self, gy):
        return _pool_backward(self._step, gy, self.ftype, self._nfine)


class GlobalPool(Layer):
    kind = "GlobalPool"

    def __init__(self, ftype):
        super().__init__()
        self.ftype = as_type(ftype)

    def init(self, rng):
        pass

    def forward(self, x, ctx, train=False):
        self._shape = x.shape
        return global_invariant_pool(x, self.ftype)

    def backward(self, gy):
        B, V, C, D = self._shape
        return np.broadcast_to((gy / V).reshape(B, 1, C, D), self._shape).copy()


class Dense(Layer):
    kind = "Dense"

    def __init__(self, n_in, n_out):
        super().__init__()
        self.n_in, self.n_out = int(n_in), int(n_out)
        self.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}

    def init(self, rng):
        self.params["W"] = rng.normal(0.0, np.sqrt(2.0 / self.n_in), (self.n_out, self.n_in))
        self.params["b"] = np.zeros(self.n_out)

    def forward(self, x, ctx=None, train=False):
        self._x = x
        p = {k: v.astype(x.dtype, copy=False) for k, v in self.params.items()}
        return dense_head(p, x)

    def backward(self, gy):
        self._accumulate({"W": gy.T @ self._x, "b": gy.sum(axis=0)})
        return gy @ self.params["W"].astype(gy.dtype, copy=False)


class ReLU(Layer):
    kind = "ReLU"

    def init(self, rng):
        pass

    def forward(self, x, ctx=None, train=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, gy):
        return np.where(self._mask, gy, 0.0)
