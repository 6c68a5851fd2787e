"""Verification suites: steerability, oracles, planar reduction, equivariance
and gradient checks.  Each returns a JSON-serializable report with a
``passed`` flag.
"""
from __future__ import annotations

import itertools

import numpy as np

from .architecture import Architecture, Network
from .geometry import (
    build_icosphere,
    build_rotation_plan,
    build_stencil,
    icosahedral_rotations,
    random_rotation,
    rotate_gauges,
)
from .network import (
    Dense,
    GeometryContext,
    GlobalPool,
    Pool,
    ReLU,
    RegularNonlinearity,
    SteerableConv,
    gauge_transform_field,
    rotate_field,
)
from .optim import cross_entropy
from .reference import VolterraKernelSet, gevconv_naive, planar_reduction_check
from .steerable import (
    RHO0,
    RHO01,
    RHO1,
    basis_first_order,
    basis_second_order,
    corrupt_first_order,
    gram_rank,
    homogenize_stencil,
    verify_steerability,
)

SCHEMA_VERSION = 1
STEER_TOL = 1e-12
GAUGE_TOL = 1e-10
ISO_TOL = 1e-9
ORACLE_TOL = 1e-12
REDUCTION_TOL = 1e-12
GRAD_TOL = 1e-4
EXACT_N = 100  # multiple of 10: icosahedral stabilizers act by exact sample shifts

TYPES = (RHO0, RHO1, RHO01)


def _report(name: str, passed: bool, **fields) -> dict:
    return {"suite": name, "schema_version": SCHEMA_VERSION, "passed": bool(passed), **fields}


# ---------------------------------------------------------------------------
# basis and oracle suites
# ---------------------------------------------------------------------------


def steerability_report(orders=(1, 2), samples: int = 1000, seed: int = 0, corrupt: bool = False) -> dict:
    rows = []
    for order in orders:
        for rin, rout in itertools.product(TYPES, TYPES):
            if order == 1:
                basis = basis_first_order(rin, rout)
                if corrupt and rin == RHO0 and rout in (RHO1, RHO01):
                    basis = corrupt_first_order(basis)
            else:
                basis = basis_second_order(rin, rout)
            res = verify_steerability(basis, order, samples, seed)
            row = {"order": order, "rho_in": str(rin), "rho_out": str(rout), "count": len(basis), "residual": res}
            if order == 2:
                row["gram_rank"] = gram_rank(basis)
            rows.append(row)
    worst = max(r["residual"] for r in rows)
    ranks_ok = all(r.get("gram_rank", r["count"]) == r["count"] for r in rows)
    return _report("steerability", worst <= STEER_TOL and ranks_ok, tolerance=STEER_TOL, max_residual=worst, bases=rows)


def oracle_report(instances: int = 20, seed: int = 0, level: int = 1) -> dict:
    """Optimized layer vs. the naive loop on random types, channels and coefficients."""
    rng = np.random.default_rng(seed)
    grid = build_icosphere(level)
    geom = build_stencil(grid)
    ctx = GeometryContext(1000)
    errs = []
    for i in range(instances):
        rin, rout = TYPES[rng.integers(3)], TYPES[rng.integers(3)]
        c_in, c_out = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        order = 2 if i % 4 else 1
        pairing = "full" if i % 2 else "diagonal"
        layer = SteerableConv(c_in, rin, c_out, rout, order, level, True, pairing)
        layer.init(rng)
        if "b" in layer.params:
            layer.params["b"] = rng.standard_normal(layer.params["b"].shape)
        x = rng.standard_normal((grid.num_vertices, c_in, rin.dim))
        fast = layer.forward(x[None], ctx)[0]
        slow = gevconv_naive(grid, geom, rin, rout, layer.params, x, 1000)
        errs.append(float(np.max(np.abs(fast - slow))))
    return _report("oracle", max(errs) <= ORACLE_TOL, tolerance=ORACLE_TOL, max_error=max(errs), errors=errs)


def random_volterra(rng: np.random.Generator, radius: int, ndim: int, m: int) -> VolterraKernelSet:
    w = 2 * radius + 1
    return VolterraKernelSet(float(rng.standard_normal()), tuple(rng.standard_normal((w,) * (k * ndim)) for k in range(1, m + 1)), radius, ndim)


def reduction_report(instances: int = 20, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(instances):
        ndim = 1 if i % 2 == 0 else 2
        radius = 1 + (i % 3 == 0 and ndim == 1)
        shape = (int(rng.integers(5, 10)),) if ndim == 1 else (int(rng.integers(3, 6)), int(rng.integers(3, 6)))
        kernels = random_volterra(rng, radius, ndim, 2)
        errs.append(planar_reduction_check(radius, kernels, rng.standard_normal(shape)))
    return _report("planar_reduction", max(errs) <= REDUCTION_TOL, tolerance=REDUCTION_TOL, max_error=max(errs), errors=errs)


def stencil_covariance_report(level: int = 2, seed: int = 0, Q: int = 1000) -> dict:
    """Rebuilt stencils under a rotated gauge equal the representation-transformed originals."""
    rng = np.random.default_rng(seed)
    grid = build_icosphere(level)
    alpha = rng.uniform(0, 2 * np.pi, grid.num_vertices)
    g2 = grid.with_gauges(rotate_gauges(grid.gauge_frames, alpha))
    worst = 0.0
    for rin, rout in itertools.product(TYPES, TYPES):
        b1 = basis_first_order(rin, rout)
        k = np.einsum("erO,vjrd->vjeOd", b1.placement, homogenize_stencil(grid, build_stencil(grid), rin, Q).kt)
        k2 = np.einsum("erO,vjrd->vjeOd", b1.placement, homogenize_stencil(g2, build_stencil(g2), rin, Q).kt)
        nbr = build_stencil(grid).nbr
        expect = np.einsum("vab,vjebc,vjcd->vjead", rout.rep(-alpha), k, rin.rep(alpha[nbr]))
        worst = max(worst, float(np.max(np.abs(k2 - expect))))
    return _report("stencil_gauge_covariance", worst <= GAUGE_TOL, tolerance=GAUGE_TOL, max_error=worst)


def quadrature_report(level: int = 3, q_lo: int = 1000, q_hi: int = 5000) -> dict:
    grid = build_icosphere(level)
    geom = build_stencil(grid)
    worst = 0.0
    for rin in TYPES:
        a = homogenize_stencil(grid, geom, rin, q_lo).kt
        b = homogenize_stencil(grid, geom, rin, q_hi).kt
        worst = max(worst, float(np.max(np.abs(a - b))))
    return _report("quadrature_stability", worst <= 1e-3, tolerance=1e-3, max_error=worst, Q=[q_lo, q_hi])


def verify_all(orders=(1, 2), samples: int = 1000, seed: int = 0, corrupt: bool = False, instances: int = 20) -> dict:
    suites = [
        steerability_report(orders, samples, seed, corrupt),
        oracle_report(instances, seed),
        reduction_report(instances, seed),
        stencil_covariance_report(2, seed),
    ]
    return {"schema_version": SCHEMA_VERSION, "passed": all(s["passed"] for s in suites), "suites": suites}


# ---------------------------------------------------------------------------
# equivariance
# ---------------------------------------------------------------------------


def gauge_suite(level: int = 2, seed: int = 0, Q: int = 1000) -> dict:
    """Random per-vertex gauge rotations; stencils rebuilt in the new gauge."""
    rng = np.random.default_rng(seed)
    ctx = GeometryContext(Q)
    grid = ctx.grid(level)
    alpha = rng.uniform(0, 2 * np.pi, grid.num_vertices)
    ctx2 = ctx.with_gauges(level, rotate_gauges(grid.gauge_frames, alpha))
    rows = []
    for order, pairing in ((1, "full"), (2, "full"), (2, "diagonal")):
        for rin, rout in ((RHO0, RHO01), (RHO01, RHO01), (RHO01, RHO0)):
            layer = SteerableConv(2, rin, 3, rout, order, level, True, pairing)
            layer.init(rng)
            x = rng.standard_normal((2, grid.num_vertices, 2, rin.dim))
            y = layer.forward(x, ctx)
            y2 = layer.forward(gauge_transform_field(x, alpha, rin), ctx2)
            err = float(np.max(np.abs(y2 - gauge_transform_field(y, alpha, rout))))
            rows.append({"layer": layer.kind, "pairing": pairing, "rho_in": str(rin), "rho_out": str(rout), "max_error": err})
    worst = max(r["max_error"] for r in rows)
    return _report("gauge", worst <= GAUGE_TOL, tolerance=GAUGE_TOL, level=level, max_error=worst, layers=rows)


def smooth_field(level: int, coeffs: np.ndarray) -> np.ndarray:
    """Degree-2 polynomial in the embedding coordinates evaluated on the grid."""
    p = build_icosphere(level).vertices
    x, y, z = p.T
    monos = np.stack([np.ones_like(x), x, y, z, x * y, y * z, z * x, x * x - y * y, 3 * z * z - 1], 1)
    return monos @ coeffs


def _network_for(arch: Architecture, seed: int, ctx: GeometryContext, warm: np.ndarray) -> Network:
    net = Network(arch).init(seed)
    net.forward(warm, ctx, train=True)  # populate normalization statistics
    net.zero_grad()
    return net


def icosahedral_suite(level: int = 3, seed: int = 0, net: Network | None = None, Q: int = 1000) -> dict:
    """All 60 icosahedral rotations: per-layer feature and logit discrepancies (eval mode)."""
    rng = np.random.default_rng(seed)
    ctx = GeometryContext(Q)
    grid = ctx.grid(level)
    x = rng.uniform(0, 1, (2, grid.num_vertices, 1, 1))
    if net is None:
        arch = Architecture.preset("gevnet3", level=level, N=EXACT_N)
        net = _network_for(arch, seed, ctx, rng.uniform(0, 1, (4, grid.num_vertices, 1, 1)))
    elif net.arch.level != level:
        raise ValueError("network level differs from requested level")
    # feature types and levels after every layer, for per-layer comparisons
    stages, lv, ftype = [], level, None
    for i, layer in enumerate(net.layers):
        if isinstance(layer, SteerableConv):
            ftype = layer.rho_out
        if isinstance(layer, Pool):
            lv -= 1
        if isinstance(layer, GlobalPool):
            break
        stages.append((i + 1, layer.kind, lv, ftype))
    base = [net.features(x, ctx, upto) for upto, *_ in stages]
    logits = net.forward(x, ctx)
    per_layer = np.zeros(len(stages))
    logit_err = 0.0
    for R in icosahedral_rotations():
        ops = {lv: build_rotation_plan(R, ctx.grid(lv)) for lv in {s[2] for s in stages} | {level}}
        xr = rotate_field(ops[level], x, RHO0)
        for s, (upto, _, lv, ft) in enumerate(stages):
            got = net.features(xr, ctx, upto)
            per_layer[s] = max(per_layer[s], float(np.max(np.abs(got - rotate_field(ops[lv], base[s], ft)))))
        logit_err = max(logit_err, float(np.max(np.abs(net.forward(xr, ctx) - logits))))
    layers = [{"after": k, "kind": kind, "level": lv, "max_error": float(e)} for (k, kind, lv, _), e in zip(stages, per_layer)]
    return _report(
        "icosahedral", logit_err <= ISO_TOL and per_layer.max() <= ISO_TOL,
        tolerance=ISO_TOL, level=level, N=int(net.arch.N), logit_error=logit_err, layers=layers,
    )


def generic_rotation_suite(levels=(1, 2, 3), seed: int = 0, Q: int = 1000, trials: int = 4) -> dict:
    """Logit discrepancy under Haar-random rotations for the same network at increasing resolution.

    Uses a pool-free net (pooling twice is impossible from level 1) and a
    smooth input field so that only discretization error remains.
    """
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal(9)
    rots = [random_rotation(rng) for _ in range(trials)]
    errors = []
    for lv in levels:
        ctx = GeometryContext(Q)
        arch = Architecture.preset("gevnet3_flat", level=lv, N=EXACT_N)
        net = Network(arch).init(seed)
        f = smooth_field(lv, coeffs)[None, :, None, None]
        net.forward(f, ctx, train=True)
        logits = net.forward(f, ctx)
        scale = float(np.max(np.abs(logits))) or 1.0
        worst = 0.0
        for R in rots:
            fr = rotate_field(build_rotation_plan(R, ctx.grid(lv)), f, RHO0)
            worst = max(worst, float(np.max(np.abs(net.forward(fr, ctx) - logits))) / scale)
        errors.append(worst)
    decreasing = all(b < a for a, b in zip(errors, errors[1:]))
    return _report("generic_rotation", decreasing, levels=list(levels), relative_logit_error=errors, strictly_decreasing=decreasing)


def equivariance_report(level: int = 3, seed: int = 0, net: Network | None = None, Q: int = 1000) -> dict:
    suites = [
        gauge_suite(min(level, 2), seed, Q),
        icosahedral_suite(level, seed, net, Q),
        generic_rotation_suite(seed=seed, Q=Q),
    ]
    return {"schema_version": SCHEMA_VERSION, "passed": all(s["passed"] for s in suites), "suites": suites}


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _numeric_grad(f, x: np.ndarray, eps: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * eps)
    return g


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


def check_layer(layer, x: np.ndarray, ctx, train: bool, rng, eps: float = 1e-5) -> dict:
    """Full central-difference gradients w.r.t. input and every parameter."""
    y = layer.forward(x, ctx, train)
    gy = rng.standard_normal(y.shape)
    state = {k: v.copy() for k, v in layer.buffers.items()}

    def loss():
        for k, v in state.items():
            layer.buffers[k][...] = v
        return float(np.sum(layer.forward(x, ctx, train) * gy))

    loss()
    layer.zero_grad()
    gx = layer.backward(gy)
    out = {"input": _rel(_numeric_grad(loss, x, eps), gx)}
    analytic = {k: g.copy() for k, g in layer.grads.items()}
    for k, p in layer.params.items():
        out[k] = _rel(_numeric_grad(loss, p, eps), analytic[k])
    for k, v in state.items():
        layer.buffers[k][...] = v
    return out


def gradcheck_suite(seed: int = 0, level: int = 1, Q: int = 1000) -> dict:
    rng = np.random.default_rng(seed)
    ctx = GeometryContext(Q)
    V = ctx.grid(level).num_vertices
    cases = []

    def add(name, layer, x, train=False):
        layer.init(rng)
        for k in layer.params:
            layer.params[k] = layer.params[k] + 0.1 * rng.standard_normal(layer.params[k].shape)
        res = check_layer(layer, x, ctx, train, rng)
        cases.append({"layer": name, "max_rel_error": max(res.values()), "errors": res})

    for order, pairing in ((1, "full"), (2, "full"), (2, "diagonal")):
        kind = "GEVConv" if order == 2 else "GEConv"
        add(f"{kind}[{pairing}]", SteerableConv(2, RHO01, 2, RHO01, order, level, True, pairing),
            rng.standard_normal((2, V, 2, 3)))
    for train in (True, False):
        nl = RegularNonlinearity(2, RHO01, level, N=7)
        nl.buffers = {"mean": rng.uniform(0.2, 0.8, (2, 1)), "var": rng.uniform(0.5, 1.5, (2, 1))}
        add(f"Nonlinearity[{'train' if train else 'eval'}]", nl, rng.standard_normal((3, V, 2, 3)), train)
    add("Pool", Pool(RHO01, level), rng.standard_normal((2, V, 2, 3)))
    add("GlobalPool", GlobalPool(RHO0), rng.standard_normal((2, V, 3, 1)))
    add("Dense", Dense(4, 3), rng.standard_normal((5, 4)))
    add("ReLU", ReLU(), rng.standard_normal((5, 4)))

    logits = rng.standard_normal((4, 10))
    labels = rng.dirichlet(np.ones(10), 4)
    _, g = cross_entropy(logits, labels)
    num = _numeric_grad(lambda: cross_entropy(logits, labels)[0], logits, 1e-6)
    cases.append({"layer": "CrossEntropy", "max_rel_error": _rel(num, g), "errors": {"input": _rel(num, g)}})
    worst = max(c["max_rel_error"] for c in cases)
    return _report("gradcheck", worst <= GRAD_TOL, tolerance=GRAD_TOL, max_rel_error=worst, layers=cases)
