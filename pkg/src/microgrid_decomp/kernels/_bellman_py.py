"""NumPy reference for the Bellman minimization kernel.

Performs the same floating point operations in the same order as the
compiled kernel, so both backends agree bit for bit.
"""
import numpy as np

CHUNK = 2048


def _vertex(V, i, k, sentinel):
    v = V[i, k]
    return np.where(v == np.inf, sentinel, v)


def bellman_min(V, b_lo, b_w, b_ok, h_lo, h_w, h_ok, cost, pb, ph, pk, sentinel,
                out, arg_b, arg_t, workers=1):
    P = len(pb)
    nb, nt = b_lo.shape[1], h_lo.shape[1]
    gb, gh = V.shape
    for s in range(0, P, CHUNK):
        sl = slice(s, min(P, s + CHUNK))
        rb, rh, k = pb[sl], ph[sl], pk[sl]
        i0 = b_lo[rb][:, :, None]
        wb = b_w[rb][:, :, None]
        k0 = h_lo[rh][:, None, :]
        wh = h_w[rh][:, None, :]
        i1 = np.minimum(i0 + 1, gb - 1)
        k1 = np.minimum(k0 + 1, gh - 1)
        zero = 0.0
        t1 = np.where((wb < 1.0) & (wh < 1.0), (1.0 - wb) * (1.0 - wh) * _vertex(V, i0, k0, sentinel), zero)
        t2 = np.where((wb < 1.0) & (wh > 0.0), (1.0 - wb) * wh * _vertex(V, i0, k1, sentinel), zero)
        t3 = np.where((wb > 0.0) & (wh < 1.0), wb * (1.0 - wh) * _vertex(V, i1, k0, sentinel), zero)
        t4 = np.where((wb > 0.0) & (wh > 0.0), wb * wh * _vertex(V, i1, k1, sentinel), zero)
        val = ((t1 + t2) + t3) + t4
        c = cost[k]
        ok = b_ok[rb][:, :, None].astype(bool) & h_ok[rh][:, None, :].astype(bool) & (c != np.inf)
        tot = np.where(ok, c + val, np.inf).reshape(len(rb), nb * nt)
        a = np.argmin(tot, axis=1)
        best = tot[np.arange(len(rb)), a]
        none = best == np.inf
        out[sl] = best
        arg_b[sl] = np.where(none, -1, a // nt)
        arg_t[sl] = np.where(none, -1, a % nt)
