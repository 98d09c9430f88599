# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: causal attention core and joint-profile scans.

Must stay semantically identical to the numpy reference in ``pure.py``.
"""

import numpy as np

from libc.math cimport exp, fabs, sqrt


def attention_forward(double[:, :, :, ::1] q, double[:, :, :, ::1] k,
                      double[:, :, :, ::1] v):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], Dh = q.shape[3]
    cdef double scale = 1.0 / sqrt(<double> Dh)
    y_arr = np.zeros((B, H, L, Dh), dtype=np.float64)
    p_arr = np.zeros((B, H, L, L), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[:, :, :, ::1] p = p_arr
    cdef Py_ssize_t b, h, i, j, d
    cdef double s, m, z
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    m = -1e308
                    for j in range(i + 1):
                        s = 0.0
                        for d in range(Dh):
                            s += q[b, h, i, d] * k[b, h, j, d]
                        s *= scale
                        p[b, h, i, j] = s
                        if s > m:
                            m = s
                    z = 0.0
                    for j in range(i + 1):
                        s = exp(p[b, h, i, j] - m)
                        p[b, h, i, j] = s
                        z += s
                    for j in range(i + 1):
                        p[b, h, i, j] /= z
                        for d in range(Dh):
                            y[b, h, i, d] += p[b, h, i, j] * v[b, h, j, d]
    return y_arr, p_arr


def attention_backward(double[:, :, :, ::1] dy, double[:, :, :, ::1] p,
                       double[:, :, :, ::1] q, double[:, :, :, ::1] k,
                       double[:, :, :, ::1] v):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], L = q.shape[2], Dh = q.shape[3]
    cdef double scale = 1.0 / sqrt(<double> Dh)
    dq_arr = np.zeros((B, H, L, Dh), dtype=np.float64)
    dk_arr = np.zeros((B, H, L, Dh), dtype=np.float64)
    dv_arr = np.zeros((B, H, L, Dh), dtype=np.float64)
    dp_row = np.zeros(L, dtype=np.float64)
    cdef double[:, :, :, ::1] dq = dq_arr
    cdef double[:, :, :, ::1] dk = dk_arr
    cdef double[:, :, :, ::1] dv = dv_arr
    cdef double[::1] dpr = dp_row
    cdef Py_ssize_t b, h, i, j, d
    cdef double acc, rowdot, ds
    with nogil:
        for b in range(B):
            for h in range(H):
                for i in range(L):
                    rowdot = 0.0
                    for j in range(i + 1):
                        acc = 0.0
                        for d in range(Dh):
                            acc += dy[b, h, i, d] * v[b, h, j, d]
                        dpr[j] = acc
                        rowdot += acc * p[b, h, i, j]
                    for j in range(i + 1):
                        ds = p[b, h, i, j] * (dpr[j] - rowdot)
                        for d in range(Dh):
                            dq[b, h, i, d] += ds * k[b, h, j, d] * scale
                            dk[b, h, j, d] += ds * q[b, h, i, d] * scale
                            dv[b, h, j, d] += p[b, h, i, j] * dy[b, h, i, d]
    return dq_arr, dk_arr, dv_arr


def potential_scan(Py_ssize_t num_ues, caps_in):
    """Max |ΔF' − ΔΦ| over all joint bitmap profiles and unilateral deviations."""
    caps_arr = np.ascontiguousarray(caps_in, dtype=np.float64)
    cdef double[::1] caps = caps_arr
    cdef Py_ssize_t M = caps.shape[0]
    cdef Py_ssize_t nbits = num_ues * M
    cdef long long P = 1LL << nbits
    cdef long long code, amask, own
    cdef Py_ssize_t i, m, j
    cdef int cnt, newcnt
    cdef double phi, fown, new_phi, new_f, diff, worst = 0.0
    counts_row = np.zeros(M, dtype=np.int32)
    cdef int[::1] counts = counts_row
    with nogil:
        for code in range(P):
            phi = 0.0
            for m in range(M):
                cnt = 0
                for j in range(num_ues):
                    cnt += <int> ((code >> (j * M + m)) & 1)
                counts[m] = cnt
                if cnt >= 1:
                    phi += caps[m]
            for i in range(num_ues):
                own = (code >> (i * M)) & ((1LL << M) - 1)
                fown = 0.0
                for m in range(M):
                    if ((own >> m) & 1) and counts[m] == 1:
                        fown += caps[m]
                for amask in range(1LL << M):
                    new_phi = 0.0
                    new_f = 0.0
                    for m in range(M):
                        newcnt = counts[m] - <int> ((own >> m) & 1) + <int> ((amask >> m) & 1)
                        if newcnt >= 1:
                            new_phi += caps[m]
                        if ((amask >> m) & 1) and newcnt == 1:
                            new_f += caps[m]
                    diff = fabs((new_f - fown) - (new_phi - phi))
                    if diff > worst:
                        worst = diff
    return worst


def ne_scan(Py_ssize_t num_ues, caps_in, dcm_in, double rho1, double rho2):
    """Pure-strategy NE profile codes of the stage game (see pure.ne_scan)."""
    caps_arr = np.ascontiguousarray(caps_in, dtype=np.float64)
    dcm_arr = np.ascontiguousarray(dcm_in, dtype=np.float64)
    cdef double[::1] caps = caps_arr
    cdef double[:, ::1] dcm = dcm_arr
    cdef Py_ssize_t M = caps.shape[0]
    cdef long long P = 1LL << (num_ues * M)
    cdef long long code, amask, own
    cdef Py_ssize_t i, m, j
    cdef int cnt, newcnt
    cdef double u_cur, u_dev, f, c
    counts_row = np.zeros(M, dtype=np.int32)
    cdef int[::1] counts = counts_row
    out = []
    cdef bint ne
    for code in range(P):
        for m in range(M):
            cnt = 0
            for j in range(num_ues):
                cnt += <int> ((code >> (j * M + m)) & 1)
            counts[m] = cnt
        ne = True
        for i in range(num_ues):
            own = (code >> (i * M)) & ((1LL << M) - 1)
            f = 0.0
            c = 0.0
            for m in range(M):
                if ((own >> m) & 1) and counts[m] == 1:
                    f += caps[m]
                c += 1.0 - fabs((<double> ((own >> m) & 1)) - dcm[i, m])
            u_cur = rho1 * f + rho2 * c / M
            for amask in range(1LL << M):
                f = 0.0
                c = 0.0
                for m in range(M):
                    newcnt = counts[m] - <int> ((own >> m) & 1) + <int> ((amask >> m) & 1)
                    if ((amask >> m) & 1) and newcnt == 1:
                        f += caps[m]
                    c += 1.0 - fabs((<double> ((amask >> m) & 1)) - dcm[i, m])
                u_dev = rho1 * f + rho2 * c / M
                if u_dev > u_cur + 1e-12:
                    ne = False
                    break
            if not ne:
                break
        if ne:
            out.append(code)
    return np.asarray(out, dtype=np.int64)
