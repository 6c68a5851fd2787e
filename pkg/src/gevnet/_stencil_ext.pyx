# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled stencil gather/contract kernels (same contract as _kernels_py)."""
import numpy as np

ctypedef fused floating:
    float
    double


def stencil_forward(const floating[:, :, :, ::1] kt, const long long[:, ::1] nbr, const floating[:, :, :, ::1] x):
    cdef Py_ssize_t B = x.shape[0], C = x.shape[2], D = x.shape[3]
    cdef Py_ssize_t V = kt.shape[0], J = kt.shape[1], R = kt.shape[2]
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((B, V, C, R), dtype=dtype)
    # (V, J, D, R) layout: the innermost loop runs contiguously over response rows
    ktt_arr = np.ascontiguousarray(np.transpose(kt, (0, 1, 3, 2)))
    cdef const floating[:, :, :, ::1] ktt = ktt_arr
    cdef floating[:, :, :, ::1] z = out
    cdef Py_ssize_t b, v, j, c, r, d, q
    cdef floating xv
    cdef floating *zp
    cdef const floating *kp
    # vertex and slot outermost: each kernel block stays cached across the batch
    with nogil:
        for v in range(V):
            for j in range(J):
                q = nbr[v, j]
                for b in range(B):
                    for c in range(C):
                        zp = &z[b, v, c, 0]
                        for d in range(D):
                            xv = x[b, q, c, d]
                            kp = &ktt[v, j, d, 0]
                            for r in range(R):
                                zp[r] += kp[r] * xv
    return out


def stencil_adjoint(const floating[:, :, :, ::1] kt, const long long[:, ::1] nbr, const floating[:, :, :, ::1] gz, Py_ssize_t num_src):
    cdef Py_ssize_t B = gz.shape[0], V = gz.shape[1], C = gz.shape[2], R = gz.shape[3]
    cdef Py_ssize_t J = kt.shape[1], D = kt.shape[3]
    dtype = np.float64 if floating is double else np.float32
    out = np.zeros((B, num_src, C, D), dtype=dtype)
    ktt_arr = np.ascontiguousarray(np.transpose(kt, (0, 1, 3, 2)))
    cdef const floating[:, :, :, ::1] ktt = ktt_arr
    cdef floating[:, :, :, ::1] gx = out
    cdef Py_ssize_t b, v, j, c, r, d, q
    cdef floating acc
    cdef const floating *gp
    cdef const floating *kp
    with nogil:
        for v in range(V):
            for j in range(J):
                q = nbr[v, j]
                for b in range(B):
                    for c in range(C):
                        gp = &gz[b, v, c, 0]
                        for d in range(D):
                            kp = &ktt[v, j, d, 0]
                            acc = 0
                            for r in range(R):
                                acc = acc + kp[r] * gp[r]
                            gx[b, q, c, d] += acc
    return out


def nl_forward(const floating[:, :, :, ::1] a, const floating[:, ::1] cs, const floating[:, ::1] sn):
    cdef Py_ssize_t B = a.shape[0], V = a.shape[1], W = a.shape[2], N = cs.shape[1]
    dtype = np.float64 if floating is double else np.float32
    proj_arr = np.zeros((B, V, W, 3), dtype=dtype)
    sy_arr = np.zeros(W, dtype=np.float64)
    sy2_arr = np.zeros(W, dtype=np.float64)
    cdef floating[:, :, :, ::1] proj = proj_arr
    cdef double[::1] sy = sy_arr
    cdef double[::1] sy2 = sy2_arr
    cdef Py_ssize_t b, v, w, k
    cdef floating s, rx, ry, y, p0, p1, p2
    cdef double t1, t2
    with nogil:
        for w in range(W):
            t1 = 0
            t2 = 0
            for b in range(B):
                for v in range(V):
                    s = a[b, v, w, 0]
                    rx = a[b, v, w, 1]
                    ry = a[b, v, w, 2]
                    p0 = 0
                    p1 = 0
                    p2 = 0
                    for k in range(N):
                        y = s + rx * cs[v, k] + ry * sn[v, k]
                        if y > 0:
                            p0 = p0 + y
                            p1 = p1 + y * cs[v, k]
                            p2 = p2 + y * sn[v, k]
                            t2 = t2 + <double>y * y
                    proj[b, v, w, 0] = p0
                    proj[b, v, w, 1] = p1
                    proj[b, v, w, 2] = p2
                    t1 = t1 + p0
            sy[w] = t1
            sy2[w] = t2
    return proj_arr, sy_arr.astype(dtype), sy2_arr.astype(dtype)


def nl_backward(const floating[:, :, :, ::1] a, const floating[:, ::1] cs, const floating[:, ::1] sn,
                const floating[:, :, :, ::1] gd, const floating[::1] c0, const floating[::1] c1,
                const floating[::1] mu):
    cdef Py_ssize_t B = a.shape[0], V = a.shape[1], W = a.shape[2], N = cs.shape[1]
    dtype = np.float64 if floating is double else np.float32
    ga_arr = np.zeros((B, V, W, 3), dtype=dtype)
    cdef floating[:, :, :, ::1] ga = ga_arr
    cdef Py_ssize_t b, v, w, k
    cdef floating s, rx, ry, y, d, g0, g1, g2, q0, q1, q2
    with nogil:
        for b in range(B):
            for v in range(V):
                for w in range(W):
                    s = a[b, v, w, 0]
                    rx = a[b, v, w, 1]
                    ry = a[b, v, w, 2]
                    g0 = gd[b, v, w, 0]
                    g1 = gd[b, v, w, 1]
                    g2 = gd[b, v, w, 2]
                    q0 = 0
                    q1 = 0
                    q2 = 0
                    for k in range(N):
                        y = s + rx * cs[v, k] + ry * sn[v, k]
                        if y > 0:
                            d = g0 + g1 * cs[v, k] + g2 * sn[v, k] + c0[w] + c1[w] * (y - mu[w])
                            q0 = q0 + d
                            q1 = q1 + d * cs[v, k]
                            q2 = q2 + d * sn[v, k]
                    ga[b, v, w, 0] = q0
                    ga[b, v, w, 1] = q1
                    ga[b, v, w, 2] = q2
    return ga_arr
