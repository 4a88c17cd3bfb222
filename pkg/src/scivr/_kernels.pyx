"""Compiled chunk stepper; mirrors dynamics.advance_chunk_numpy stage by stage.

Same kick/drift composition, same per-stage surface evaluation order, same
monodromy and log-derivative updates, so the two backends differ only in
speed and agree to floating-point noise wherever the trajectory is regular.
Overflow is allowed to run to inf/nan exactly like the numpy path; the
caller truncates on the first non-finite row.
"""
import numpy as np

cimport cython
from libc.math cimport exp
from libc.stdlib cimport free, malloc


cdef inline double _cabs2(double complex z) noexcept nogil:
    return z.real * z.real + z.imag * z.imag


cdef inline void _pes_point(int kind, const double* par, int F,
                            const double* q, double* V, double* grad,
                            double* hess) noexcept nogil:
    cdef int j
    cdef double x, y, lam, D, a1, a2, beta, u0, u1, e0, e1, om0, om1, acc
    if kind == 0:
        # harmonic, par holds omega^2 per mode
        acc = 0.0
        for j in range(F * F):
            hess[j] = 0.0
        for j in range(F):
            acc += par[j] * q[j] * q[j]
            grad[j] = par[j] * q[j]
            hess[j * F + j] = par[j]
        V[0] = 0.5 * acc
    elif kind == 1:
        # Henon-Heiles
        lam = par[0]
        x = q[0]
        y = q[1]
        V[0] = 0.5 * (x * x + y * y) + lam * (x * x * y - y * y * y / 3.0)
        grad[0] = x + 2.0 * lam * x * y
        grad[1] = y + lam * (x * x - y * y)
        hess[0] = 1.0 + 2.0 * lam * y
        hess[3] = 1.0 - 2.0 * lam * y
        hess[1] = 2.0 * lam * x
        hess[2] = hess[1]
    elif kind == 2:
        # Morse pair with quartic coupling
        D = par[0]
        a1 = par[1]
        a2 = par[2]
        beta = par[3]
        lam = par[4]
        u0 = q[0] - par[5]
        u1 = q[1] - par[6]
        e0 = exp(-a1 * u0)
        e1 = exp(-a2 * u1)
        om0 = 1.0 - e0
        om1 = 1.0 - e1
        V[0] = (D * om0 * om0 + D * om1 * om1
                + lam * (0.25 * beta * (u0 * u0 * u0 * u0
                                        + u1 * u1 * u1 * u1)
                         + u0 * u0 * u1 * u1))
        grad[0] = (2.0 * D * a1 * e0 * om0
                   + lam * (beta * u0 * u0 * u0 + 2.0 * u0 * u1 * u1))
        grad[1] = (2.0 * D * a2 * e1 * om1
                   + lam * (beta * u1 * u1 * u1 + 2.0 * u1 * u0 * u0))
        hess[0] = (2.0 * D * (a1 * a1) * e0 * (2.0 * e0 - 1.0)
                   + lam * (3.0 * beta * u0 * u0 + 2.0 * u1 * u1))
        hess[3] = (2.0 * D * (a2 * a2) * e1 * (2.0 * e1 - 1.0)
                   + lam * (3.0 * beta * u1 * u1 + 2.0 * u0 * u0))
        hess[1] = 4.0 * lam * u0 * u1
        hess[2] = hess[1]
    else:
        # single Morse
        D = par[0]
        a1 = par[1]
        u0 = q[0] - par[2]
        e0 = exp(-a1 * u0)
        om0 = 1.0 - e0
        V[0] = D * om0 * om0
        grad[0] = 2.0 * D * a1 * e0 * om0
        hess[0] = 2.0 * D * (a1 * a1) * e0 * (2.0 * e0 - 1.0)


cdef inline void _riccati_stage(double complex* R, double h, int F,
                                double complex* A) noexcept nogil:
    """R <- (I + h R)^-1 R, the drift half of the log-derivative map."""
    cdef double complex a, b, c, d, det, r00, r01, r10, r11, tmp, fac
    cdef int i, j, k, piv
    if F == 1:
        R[0] = R[0] / (1.0 + h * R[0])
        return
    if F == 2:
        a = 1.0 + h * R[0]
        b = h * R[1]
        c = h * R[2]
        d = 1.0 + h * R[3]
        det = a * d - b * c
        r00 = (d * R[0] - b * R[2]) / det
        r01 = (d * R[1] - b * R[3]) / det
        r10 = (-c * R[0] + a * R[2]) / det
        r11 = (-c * R[1] + a * R[3]) / det
        R[0] = r00
        R[1] = r01
        R[2] = r10
        R[3] = r11
        return
    # general size: eliminate A = I + h R with partial pivoting, the
    # right-hand side R becomes the solution in place
    for i in range(F * F):
        A[i] = h * R[i]
    for i in range(F):
        A[i * F + i] = A[i * F + i] + 1.0
    for k in range(F):
        piv = k
        for i in range(k + 1, F):
            if _cabs2(A[i * F + k]) > _cabs2(A[piv * F + k]):
                piv = i
        if piv != k:
            for j in range(F):
                tmp = A[k * F + j]
                A[k * F + j] = A[piv * F + j]
                A[piv * F + j] = tmp
                tmp = R[k * F + j]
                R[k * F + j] = R[piv * F + j]
                R[piv * F + j] = tmp
        for i in range(k + 1, F):
            fac = A[i * F + k] / A[k * F + k]
            for j in range(k + 1, F):
                A[i * F + j] = A[i * F + j] - fac * A[k * F + j]
            for j in range(F):
                R[i * F + j] = R[i * F + j] - fac * R[k * F + j]
    for k in range(F - 1, -1, -1):
        for j in range(F):
            tmp = R[k * F + j]
            for i in range(k + 1, F):
                tmp = tmp - A[k * F + i] * R[i * F + j]
            R[k * F + j] = tmp / A[k * F + k]


@cython.boundscheck(False)
@cython.wraparound(False)
def advance_chunk(int kind, double[::1] par, double dt,
                  double[::1] kicks, double[::1] drifts,
                  double[:, ::1] q, double[:, ::1] p, double[::1] S,
                  double[:, :, ::1] M, double complex[:, :, ::1] R,
                  double[::1] V, double[:, ::1] grad, double[:, :, ::1] K,
                  double[::1] lag,
                  double[:, :, ::1] out_q, double[:, :, ::1] out_p,
                  double[:, ::1] out_S, double[:, :, :, ::1] out_M,
                  double[:, :, :, ::1] out_K,
                  double complex[:, :, :, ::1] out_R,
                  int nk, int has_r):
    cdef int n = q.shape[0]
    cdef int F = q.shape[1]
    cdef int F2 = 2 * F
    cdef int nstage = kicks.shape[0]
    cdef int i, k, s, r_, c_, j
    cdef double dts, h, acc, lag_new, Vi
    cdef double* pp = &par[0]
    cdef double complex* Ri = NULL
    cdef double complex* scratch = NULL
    if has_r and F > 2:
        scratch = <double complex*> malloc(F * F * sizeof(double complex))
        if scratch == NULL:
            raise MemoryError()
    with nogil:
        for i in range(n):
            Vi = V[i]
            if has_r:
                Ri = &R[i, 0, 0]
            for k in range(nk):
                for s in range(nstage):
                    dts = kicks[s] * dt
                    for j in range(F):
                        p[i, j] -= dts * grad[i, j]
                    for r_ in range(F):
                        for c_ in range(F2):
                            acc = 0.0
                            for j in range(F):
                                acc += K[i, r_, j] * M[i, F + j, c_]
                            M[i, r_, c_] -= dts * acc
                    if has_r:
                        for j in range(F):
                            for c_ in range(F):
                                Ri[j * F + c_] = Ri[j * F + c_] - dts * K[i, j, c_]
                    if s == nstage - 1:
                        break
                    h = drifts[s] * dt
                    for j in range(F):
                        q[i, j] += h * p[i, j]
                    for r_ in range(F):
                        for c_ in range(F2):
                            M[i, F + r_, c_] += h * M[i, r_, c_]
                    if has_r:
                        _riccati_stage(Ri, h, F, scratch)
                    _pes_point(kind, pp, F, &q[i, 0], &Vi, &grad[i, 0],
                               &K[i, 0, 0])
                lag_new = 0.0
                for j in range(F):
                    lag_new += p[i, j] * p[i, j]
                lag_new = lag_new / 2.0 - Vi
                S[i] += 0.5 * dt * (lag[i] + lag_new)
                lag[i] = lag_new
                for j in range(F):
                    out_q[k, i, j] = q[i, j]
                    out_p[k, i, j] = p[i, j]
                out_S[k, i] = S[i]
                for r_ in range(F2):
                    for c_ in range(F2):
                        out_M[k, i, r_, c_] = M[i, r_, c_]
                for r_ in range(F):
                    for c_ in range(F):
                        out_K[k, i, r_, c_] = K[i, r_, c_]
                if has_r:
                    for r_ in range(F):
                        for c_ in range(F):
                            out_R[k, i, r_, c_] = Ri[r_ * F + c_]
            V[i] = Vi
    if scratch != NULL:
        free(scratch)
    return None
