import numpy as np
import pytest
from scipy.integrate import quad
from scipy.signal import convolve

from gevnet.errors import ContractViolation, ResourceLimitError
from gevnet.geometry import build_icosphere, build_stencil, rot2
from gevnet.reference import VolterraKernelSet, gevconv_naive, planar_reduction_check, volterra_discrete
from gevnet.steerable import RHO0, RHO01, basis_first_order
from gevnet.verify import random_volterra


def test_first_order_is_convolution():
    rng = np.random.default_rng(0)
    h = rng.standard_normal(5)
    f = rng.standard_normal(12)
    k = VolterraKernelSet(0.0, (h,), 2)
    np.testing.assert_allclose(volterra_discrete(k, f, 1), convolve(f, h, mode="same"), atol=1e-13)


def test_first_order_2d_is_convolution():
    rng = np.random.default_rng(1)
    h = rng.standard_normal((3, 3))
    f = rng.standard_normal((6, 5))
    k = VolterraKernelSet(0.0, (h,), 1, ndim=2)
    np.testing.assert_allclose(volterra_discrete(k, f, 1), convolve(f, h, mode="same"), atol=1e-13)


def test_separable_second_order():
    rng = np.random.default_rng(2)
    h = rng.standard_normal(3)
    f = rng.standard_normal(10)
    k = VolterraKernelSet(0.0, (np.zeros(3), np.outer(h, h)), 1)
    np.testing.assert_allclose(volterra_discrete(k, f, 2), convolve(f, h, mode="same") ** 2, atol=1e-13)


def test_delta_is_identity():
    f = np.random.default_rng(3).standard_normal(9)
    k = VolterraKernelSet(0.0, (np.array([0.0, 1.0, 0.0]),), 1)
    np.testing.assert_array_equal(volterra_discrete(k, f, 1), f)


def test_order_zero_is_constant():
    k = VolterraKernelSet(1.25, (np.ones(3),), 1)
    np.testing.assert_array_equal(volterra_discrete(k, np.ones(4), 0), 1.25)


def test_symmetrization_invariance():
    rng = np.random.default_rng(4)
    h2 = rng.standard_normal((5, 5))
    f = rng.standard_normal(11)
    a = volterra_discrete(VolterraKernelSet(0.0, (np.zeros(5), h2), 2), f, 2)
    b = volterra_discrete(VolterraKernelSet(0.0, (np.zeros(5), (h2 + h2.T) / 2), 2), f, 2)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_volterra_errors():
    k = VolterraKernelSet(0.0, (np.ones(3),), 1)
    with pytest.raises(ContractViolation):
        volterra_discrete(k, np.ones(4), -1)
    with pytest.raises(ContractViolation):
        VolterraKernelSet(0.0, (np.ones(4),), 1)
    with pytest.raises(ContractViolation):
        VolterraKernelSet(0.0, (np.array([0.0, np.nan, 1.0]),), 1)


@pytest.mark.parametrize("ndim,m", [(1, 1), (1, 2), (1, 3), (2, 1), (2, 2)])
def test_planar_reduction(ndim, m):
    rng = np.random.default_rng(10 * ndim + m)
    k = random_volterra(rng, 1, ndim, m)
    f = rng.standard_normal((7,) * ndim if ndim == 1 else (5, 4))
    assert planar_reduction_check(1, k, f) <= 1e-12


def test_planar_reduction_trivial_kernels():
    f = np.random.default_rng(5).standard_normal(8)
    assert planar_reduction_check(1, VolterraKernelSet(0.0, (np.zeros(3), np.zeros((3, 3))), 1), f) == 0.0
    assert planar_reduction_check(1, VolterraKernelSet(0.0, (np.array([0.0, 1.0, 0.0]),), 1), f) == 0.0


def test_naive_zero_field():
    g = build_icosphere(1)
    w = {"w1": np.ones((2, 2, 12)), "w2": np.ones((2, 2, 2, 40))}
    out = gevconv_naive(g, build_stencil(g), RHO01, RHO01, w, np.zeros((42, 2, 3)))
    np.testing.assert_array_equal(out, 0.0)


def test_naive_level_guard():
    g = build_icosphere(3)
    with pytest.raises(ResourceLimitError):
        gevconv_naive(g, build_stencil(g), RHO0, RHO0, {"w1": np.ones((1, 1, 2))}, np.zeros((642, 1, 1)))


def _cell_average_exact(element, angles, j):
    """Exact angular integral of a ring element over the Voronoi cell of slot ``j``, divided by 2 pi."""
    k = len(angles)
    prv = (angles[j] - angles[j - 1]) % (2 * np.pi)
    nxt = (angles[(j + 1) % k] - angles[j]) % (2 * np.pi)
    lo, hi = angles[j] - prv / 2, angles[j] + nxt / 2
    shape = element.coeffs.shape[:2]
    out = np.zeros(shape)
    for a in range(shape[0]):
        for b in range(shape[1]):
            out[a, b] = quad(lambda t: element(np.array([t]))[0, a, b], lo, hi, epsabs=1e-14)[0]
    return out / (2 * np.pi)


def test_naive_first_order_vs_hand_loop():
    """Third implementation: exact cell integrals, explicit transport, three vertices."""
    g = build_icosphere(1)
    s = build_stencil(g)
    rng = np.random.default_rng(6)
    b1 = basis_first_order(RHO01, RHO01)
    w = {"w1": rng.standard_normal((1, 1, len(b1)))}
    f = rng.standard_normal((42, 1, 3))
    out = gevconv_naive(g, s, RHO01, RHO01, w, f)
    for v in (0, 17, 41):
        slots = [j for j in range(1, 7) if s.mask[v, j]]
        angles = [np.arctan2(*s.log_coords[v, j, ::-1]) for j in slots]
        acc = np.zeros(3)
        for e, c in zip(b1.elements, w["w1"][0, 0]):
            if e.tag == "center":
                acc += c * e(np.array([0.0]))[0] @ f[v, 0]
                continue
            for i, j in enumerate(slots):
                R = np.eye(3)
                R[1:, 1:] = rot2(s.transport[v, j])
                acc += c * _cell_average_exact(e, angles, i) @ (R @ f[s.nbr[v, j], 0])
        # midpoint quadrature at Q = 1000 vs exact integrals
        np.testing.assert_allclose(out[v, 0], acc, atol=1e-5)
