# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled forward recursion; same contract as ``smas._forward_py.forward_loglik``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport log, INFINITY

cnp.import_array()


def forward_loglik(obs, first, init, sizes, stay, leave, phi, psi, p, alpha, lam):
    cdef cnp.int64_t[:, ::1] x = np.ascontiguousarray(obs, dtype=np.int64)
    cdef cnp.int64_t[::1] t0 = np.ascontiguousarray(first, dtype=np.int64)
    cdef double[:, ::1] v0 = np.ascontiguousarray(init, dtype=np.float64)
    cdef cnp.int64_t[::1] a = np.ascontiguousarray(sizes, dtype=np.int64)
    cdef double[::1] st = np.ascontiguousarray(stay, dtype=np.float64)
    cdef double[::1] lv = np.ascontiguousarray(leave, dtype=np.float64)
    cdef double[:, ::1] ph = np.ascontiguousarray(phi, dtype=np.float64)
    cdef double[:, :, ::1] ps = np.ascontiguousarray(psi, dtype=np.float64)
    cdef double[:, ::1] pp = np.ascontiguousarray(p, dtype=np.float64)
    cdef double[:, ::1] al = np.ascontiguousarray(alpha, dtype=np.float64)
    cdef double[::1] lm = np.ascontiguousarray(lam, dtype=np.float64)

    cdef Py_ssize_t M = x.shape[0]
    cdef Py_ssize_t T = x.shape[1]
    cdef Py_ssize_t K = a.shape[0]
    cdef Py_ssize_t n = v0.shape[1]

    cdef cnp.int64_t[::1] off = np.zeros(K, dtype=np.int64)
    cdef Py_ssize_t i, j, k, r, t, pos, end
    for k in range(1, K):
        off[k] = off[k - 1] + a[k - 1]

    out_arr = np.zeros(M, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] v = np.zeros(n, dtype=np.float64)
    cdef double[::1] w = np.zeros(n, dtype=np.float64)
    cdef double[::1] ex = np.zeros(K, dtype=np.float64)
    cdef double d1, d2, dn, f, mass, s, ll, em, pk
    cdef cnp.int64_t code, tstart

    for i in range(M):
        tstart = t0[i]
        for pos in range(n):
            v[pos] = v0[i, pos]
        d1 = 0.0
        d2 = 0.0
        ll = 0.0
        for t in range(tstart, T - 1):
            dn = 0.0
            for pos in range(n):
                w[pos] = 0.0
            for j in range(K):
                f = ph[t, j]
                ex[j] = 0.0
                end = off[j] + a[j] - 1
                for pos in range(off[j], end + 1):
                    mass = v[pos]
                    if mass == 0.0:
                        continue
                    dn += mass * (1.0 - f)
                    mass = mass * f
                    if pos < end:
                        w[pos + 1] += mass * st[pos]
                    else:
                        w[pos] += mass * st[pos]
                    ex[j] += mass * lv[pos]
            for j in range(K):
                if ex[j] == 0.0:
                    continue
                for k in range(K):
                    w[off[k]] += ex[j] * ps[t, j, k]
            d2 = d1 + d2
            d1 = dn

            code = x[i, t + 1]
            s = 0.0
            if code == 0:
                for k in range(K):
                    em = 1.0 - pp[t + 1, k]
                    for pos in range(off[k], off[k] + a[k]):
                        w[pos] *= em
                        s += w[pos]
                d1 *= 1.0 - lm[t + 1]
            elif code == -2:
                for pos in range(n):
                    w[pos] = 0.0
                d1 *= lm[t + 1]
                d2 = 0.0
            else:
                for k in range(K):
                    pk = pp[t + 1, k]
                    if code == -1:
                        em = pk * (1.0 - al[t + 1, k])
                    elif code == k + 1:
                        em = pk * al[t + 1, k]
                    else:
                        em = 0.0
                    for pos in range(off[k], off[k] + a[k]):
                        w[pos] *= em
                        s += w[pos]
                d1 = 0.0
                d2 = 0.0
            s += d1 + d2
            if not (s > 0.0):
                ll = -INFINITY
                break
            ll += log(s)
            for pos in range(n):
                v[pos] = w[pos] / s
            d1 /= s
            d2 /= s
        out[i] = ll
    return out_arr
