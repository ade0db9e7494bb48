# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled Bellman minimization over an enumerated control grid."""
from cython.parallel cimport prange
from libc.math cimport INFINITY
from libc.stdint cimport int64_t, uint8_t


cdef inline double _vertex(const double[:, ::1] V, int64_t i, int64_t k, double sentinel) noexcept nogil:
    cdef double v = V[i, k]
    if v == INFINITY:
        return sentinel
    return v


def bellman_min(const double[:, ::1] V,
                const int64_t[:, ::1] b_lo, const double[:, ::1] b_w, const uint8_t[:, ::1] b_ok,
                const int64_t[:, ::1] h_lo, const double[:, ::1] h_w, const uint8_t[:, ::1] h_ok,
                const double[:, :, ::1] cost,
                const int64_t[::1] pb, const int64_t[::1] ph, const int64_t[::1] pk,
                double sentinel,
                double[::1] out, int64_t[::1] arg_b, int64_t[::1] arg_t,
                int workers=1):
    cdef Py_ssize_t P = pb.shape[0]
    cdef Py_ssize_t nb = b_lo.shape[1]
    cdef Py_ssize_t nt = h_lo.shape[1]
    cdef Py_ssize_t p, j, l
    cdef int64_t rb, rh, k, i0, k0, bj, bl
    cdef double wb, wh, c, val, best
    for p in prange(P, nogil=True, num_threads=workers, schedule="static"):
        rb = pb[p]
        rh = ph[p]
        k = pk[p]
        best = INFINITY
        bj = -1
        bl = -1
        for j in range(nb):
            if not b_ok[rb, j]:
                continue
            i0 = b_lo[rb, j]
            wb = b_w[rb, j]
            for l in range(nt):
                if not h_ok[rh, l]:
                    continue
                c = cost[k, j, l]
                if c == INFINITY:
                    continue
                k0 = h_lo[rh, l]
                wh = h_w[rh, l]
                val = 0.0
                if wb < 1.0:
                    if wh < 1.0:
                        val = val + (1.0 - wb) * (1.0 - wh) * _vertex(V, i0, k0, sentinel)
                    if wh > 0.0:
                        val = val + (1.0 - wb) * wh * _vertex(V, i0, k0 + 1, sentinel)
                if wb > 0.0:
                    if wh < 1.0:
                        val = val + wb * (1.0 - wh) * _vertex(V, i0 + 1, k0, sentinel)
                    if wh > 0.0:
                        val = val + wb * wh * _vertex(V, i0 + 1, k0 + 1, sentinel)
                val = c + val
                if val < best:
                    best = val
                    bj = j
                    bl = l
        out[p] = best
        arg_b[p] = bj
        arg_t[p] = bl
