# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled propagation kernels for the linear and normalised collapse dynamics.

Array conventions (all C-contiguous):

    base   (N, d, d)        complex  noise-independent part of each step generator
    aint   (N+1, D, d, d)   complex  interaction-picture collapse operators
    w      (D, N+1)         float    noise samples
    lagtab (N+1, D, D)      float    kernel at lags 0..N dt

Step ``n`` applies ``exp(base[n] + sqrt(gamma) dt sum_j w[j, n] aint[n, j])``.
"""
import numpy as np

from libc.math cimport ceil, fabs, sqrt
from libc.stdlib cimport free, malloc


cdef inline double _cabs1(double complex z) noexcept nogil:
    return fabs(z.real) + fabs(z.imag)


cdef void _expm_apply(double complex* g, Py_ssize_t d, double complex* v,
                      double complex* term, double complex* tmp, double complex* acc) noexcept nogil:
    """v <- exp(g) v, Taylor series with sub-steps keeping |g|_1 / s <= 1/2."""
    cdef Py_ssize_t i, j, k, sub, nsub
    cdef double colsum, nrm = 0.0, tmax, amax, scale
    cdef double complex s_
    for j in range(d):
        colsum = 0.0
        for i in range(d):
            colsum = colsum + _cabs1(g[i * d + j])
        if colsum > nrm:
            nrm = colsum
    nsub = <Py_ssize_t>ceil(nrm / 0.5)
    if nsub < 1:
        nsub = 1
    for sub in range(nsub):
        for i in range(d):
            term[i] = v[i]
            acc[i] = v[i]
        for k in range(1, 40):
            scale = 1.0 / (<double>nsub * <double>k)
            tmax = 0.0
            amax = 0.0
            for i in range(d):
                s_ = 0.0
                for j in range(d):
                    s_ = s_ + g[i * d + j] * term[j]
                tmp[i] = s_ * scale
            for i in range(d):
                term[i] = tmp[i]
                acc[i] = acc[i] + tmp[i]
                if _cabs1(tmp[i]) > tmax:
                    tmax = _cabs1(tmp[i])
                if _cabs1(acc[i]) > amax:
                    amax = _cabs1(acc[i])
            if tmax <= 1e-17 * amax:
                break
        for i in range(d):
            v[i] = acc[i]


cdef void _sweep(const double complex[:, :, ::1] base,
                 const double complex[:, :, :, ::1] aint,
                 const double[:, ::1] w,
                 double complex* psi, Py_ssize_t nsteps, double coef,
                 double complex* g, double complex* work,
                 double complex[:, ::1] states, bint record) noexcept nogil:
    cdef Py_ssize_t n, j, a, b
    cdef Py_ssize_t d = base.shape[1]
    cdef Py_ssize_t nch = aint.shape[1]
    cdef double c
    if record:
        for a in range(d):
            states[0, a] = psi[a]
    for n in range(nsteps):
        for a in range(d):
            for b in range(d):
                g[a * d + b] = base[n, a, b]
        for j in range(nch):
            c = coef * w[j, n]
            if c != 0.0:
                for a in range(d):
                    for b in range(d):
                        g[a * d + b] = g[a * d + b] + c * aint[n, j, a, b]
        _expm_apply(g, d, psi, work, work + d, work + 2 * d)
        if record:
            for a in range(d):
                states[n + 1, a] = psi[a]


def expm_apply(g, v):
    """Return ``exp(g) @ v`` for a small dense complex matrix."""
    cdef double complex[:, ::1] gm = np.ascontiguousarray(g, dtype=complex)
    out = np.array(v, dtype=complex, copy=True, order="C")
    cdef double complex[::1] vv = out
    cdef Py_ssize_t d = gm.shape[0]
    cdef double complex* work = <double complex*>malloc(3 * d * sizeof(double complex))
    try:
        with nogil:
            _expm_apply(&gm[0, 0], d, &vv[0], work, work + d, work + 2 * d)
    finally:
        free(work)
    return out


def linear_sweep(base, aint, w, psi0, double sqrt_gamma, double dt, Py_ssize_t nsteps, bint record=True):
    """Propagate ``psi0`` through ``nsteps`` steps; returns all states or the last one."""
    cdef const double complex[:, :, ::1] bm = np.ascontiguousarray(base, dtype=complex)
    cdef const double complex[:, :, :, ::1] am = np.ascontiguousarray(aint, dtype=complex)
    cdef const double[:, ::1] wm = np.ascontiguousarray(w, dtype=float)
    cdef Py_ssize_t d = bm.shape[1]
    if nsteps > bm.shape[0] or nsteps > wm.shape[1]:
        raise ValueError("nsteps exceeds available generators or noise samples")
    psi_arr = np.array(psi0, dtype=complex, copy=True, order="C")
    cdef double complex[::1] psi = psi_arr
    states_arr = np.empty((nsteps + 1 if record else 1, d), dtype=complex)
    cdef double complex[:, ::1] st = states_arr
    cdef double complex* g = <double complex*>malloc(d * d * sizeof(double complex))
    cdef double complex* work = <double complex*>malloc(3 * d * sizeof(double complex))
    try:
        with nogil:
            _sweep(bm, am, wm, &psi[0], nsteps, sqrt_gamma * dt, g, work, st, record)
    finally:
        free(g)
        free(work)
    return states_arr if record else psi_arr


def nonlinear_trajectory(base, aint, w0, psi0, lagtab, double sqrt_gamma, double dt,
                         snapshots=None):
    """Normalised non-Markovian trajectory with full re-propagation at every step.

    Returns ``(states, expect, norms2, w_final)`` where ``states`` are the
    normalised interaction-picture states, ``expect[n, j]`` the collapse
    operator means, ``norms2`` the squared norms of the linear states and
    ``w_final`` the redefined noise used for the last grid point.
    If ``snapshots`` is an array of shape (N+1, D, N+1) it receives every
    intermediate noise field.
    """
    cdef const double complex[:, :, ::1] bm = np.ascontiguousarray(base, dtype=complex)
    cdef const double complex[:, :, :, ::1] am = np.ascontiguousarray(aint, dtype=complex)
    cdef const double[:, :, ::1] lt = np.ascontiguousarray(lagtab, dtype=float)
    w_arr = np.array(w0, dtype=float, copy=True, order="C")
    cdef double[:, ::1] w = w_arr
    cdef Py_ssize_t npts = w.shape[1]
    cdef Py_ssize_t nsteps = npts - 1
    cdef Py_ssize_t d = bm.shape[1]
    cdef Py_ssize_t nch = am.shape[1]
    if bm.shape[0] < nsteps or am.shape[0] < npts or lt.shape[0] < npts:
        raise ValueError("operator tables are shorter than the noise grid")
    psi0_arr = np.ascontiguousarray(psi0, dtype=complex)
    cdef const double complex[::1] p0 = psi0_arr
    states_arr = np.empty((npts, d), dtype=complex)
    expect_arr = np.empty((npts, nch), dtype=float)
    norms_arr = np.full(npts, np.nan)
    cdef double complex[:, ::1] st = states_arr
    cdef double[:, ::1] ex = expect_arr
    cdef double[::1] nr = norms_arr
    cdef bint keep = snapshots is not None
    cdef double[:, :, ::1] snap
    if keep:
        snap = snapshots
    else:
        snap = np.empty((1, 1, 1), dtype=float)
    dummy_arr = np.empty((1, d), dtype=complex)
    cdef double complex[:, ::1] dummy = dummy_arr
    cdef double complex* psi = <double complex*>malloc(d * sizeof(double complex))
    cdef double complex* g = <double complex*>malloc(d * d * sizeof(double complex))
    cdef double complex* work = <double complex*>malloc(4 * d * sizeof(double complex))
    cdef Py_ssize_t n, a, b, j, k, v, lag
    cdef double n2, inv, shift
    cdef double complex s_
    cdef double coef = sqrt_gamma * dt
    cdef double kick = 2.0 * sqrt_gamma * dt
    try:
        with nogil:
            for n in range(npts):
                if keep:
                    for k in range(nch):
                        for v in range(npts):
                            snap[n, k, v] = w[k, v]
                for a in range(d):
                    psi[a] = p0[a]
                _sweep(bm, am, w, psi, n, coef, g, work, dummy, False)
                n2 = 0.0
                for a in range(d):
                    n2 = n2 + psi[a].real * psi[a].real + psi[a].imag * psi[a].imag
                nr[n] = n2
                if n2 == 0.0:
                    break
                inv = 1.0 / sqrt(n2)
                for a in range(d):
                    psi[a] = psi[a] * inv
                    st[n, a] = psi[a]
                for j in range(nch):
                    s_ = 0.0
                    for a in range(d):
                        for b in range(d):
                            s_ = s_ + psi[a].conjugate() * am[n, j, a, b] * psi[b]
                    ex[n, j] = s_.real
                if n == nsteps:
                    break
                for v in range(npts):
                    lag = n - v
                    if lag < 0:
                        lag = -lag
                    for k in range(nch):
                        shift = 0.0
                        for j in range(nch):
                            shift = shift + lt[lag, j, k] * ex[n, j]
                        w[k, v] = w[k, v] + kick * shift
    finally:
        free(psi)
        free(g)
        free(work)
    return states_arr, expect_arr, norms_arr, w_arr


def linear_sweep_batch(base, aint, wb, psi0, double sqrt_gamma, double dt, record_at):
    """Propagate ``psi0`` under every noise ``wb[i]`` (shape (n, D, N+1)).

    Returns states at the sorted step indices ``record_at``, shape
    (n, len(record_at), d).
    """
    cdef const double complex[:, :, ::1] bm = np.ascontiguousarray(base, dtype=complex)
    cdef const double complex[:, :, :, ::1] am = np.ascontiguousarray(aint, dtype=complex)
    cdef const double[:, :, ::1] wm = np.ascontiguousarray(wb, dtype=float)
    rec_arr = np.ascontiguousarray(record_at, dtype=np.intp)
    cdef const Py_ssize_t[::1] rec = rec_arr
    cdef Py_ssize_t nrec = rec.shape[0]
    cdef Py_ssize_t ntraj = wm.shape[0]
    cdef Py_ssize_t d = bm.shape[1]
    cdef Py_ssize_t nch = am.shape[1]
    if nrec == 0:
        return np.empty((ntraj, 0, d), dtype=complex)
    if np.any(np.diff(rec_arr) < 0) or rec_arr[0] < 0:
        raise ValueError("record_at must be sorted and non-negative")
    cdef Py_ssize_t nsteps = rec[nrec - 1]
    if nsteps > bm.shape[0] or nsteps > wm.shape[2]:
        raise ValueError("record_at exceeds available generators or noise samples")
    p0_arr = np.ascontiguousarray(psi0, dtype=complex)
    cdef const double complex[::1] p0 = p0_arr
    out_arr = np.empty((ntraj, nrec, d), dtype=complex)
    cdef double complex[:, :, ::1] out = out_arr
    cdef double complex* psi = <double complex*>malloc(d * sizeof(double complex))
    cdef double complex* g = <double complex*>malloc(d * d * sizeof(double complex))
    cdef double complex* work = <double complex*>malloc(3 * d * sizeof(double complex))
    cdef Py_ssize_t i, n, r, j, a, b
    cdef double c, coef = sqrt_gamma * dt
    try:
        with nogil:
            for i in range(ntraj):
                for a in range(d):
                    psi[a] = p0[a]
                r = 0
                for n in range(nsteps + 1):
                    while r < nrec and rec[r] == n:
                        for a in range(d):
                            out[i, r, a] = psi[a]
                        r = r + 1
                    if n == nsteps:
                        break
                    for a in range(d):
                        for b in range(d):
                            g[a * d + b] = bm[n, a, b]
                    for j in range(nch):
                        c = coef * wm[i, j, n]
                        if c != 0.0:
                            for a in range(d):
                                for b in range(d):
                                    g[a * d + b] = g[a * d + b] + c * am[n, j, a, b]
                    _expm_apply(g, d, psi, work, work + d, work + 2 * d)
    finally:
        free(psi)
        free(g)
        free(work)
    return out_arr
