"""Pure numpy implementation of the propagation kernels.

Same signatures and results as the compiled ``_ckernels`` module, used when
the extension is unavailable or ``COLLAPSAR_BACKEND=python`` is set.
"""
import numpy as np

from .qcore import expm_action


def expm_apply(g, v):
    return expm_action(np.asarray(g, dtype=complex), np.asarray(v, dtype=complex))


def _step(base_n, aint_n, w_n, coef, psi):
    g = base_n + np.tensordot(coef * w_n, aint_n, axes=(0, 0))
    return expm_action(g, psi, tol=1e-17)


def linear_sweep(base, aint, w, psi0, sqrt_gamma, dt, nsteps, record=True):
    base = np.asarray(base, dtype=complex)
    aint = np.asarray(aint, dtype=complex)
    w = np.asarray(w, dtype=float)
    if nsteps > base.shape[0] or nsteps > w.shape[1]:
        raise ValueError("nsteps exceeds available generators or noise samples")
    coef = sqrt_gamma * dt
    psi = np.array(psi0, dtype=complex)
    states = np.empty((nsteps + 1, psi.size), dtype=complex) if record else None
    if record:
        states[0] = psi
    for n in range(nsteps):
        psi = _step(base[n], aint[n], w[:, n], coef, psi)
        if record:
            states[n + 1] = psi
    return states if record else psi


def nonlinear_trajectory(base, aint, w0, psi0, lagtab, sqrt_gamma, dt, snapshots=None):
    base = np.asarray(base, dtype=complex)
    aint = np.asarray(aint, dtype=complex)
    lagtab = np.asarray(lagtab, dtype=float)
    w = np.array(w0, dtype=float)
    nch, npts = w.shape
    d = base.shape[1]
    states = np.empty((npts, d), dtype=complex)
    expect = np.empty((npts, nch))
    norms = np.full(npts, np.nan)
    idx = np.arange(npts)
    kick = 2.0 * sqrt_gamma * dt
    for n in range(npts):
        if snapshots is not None:
            snapshots[n] = w
        psi = linear_sweep(base, aint, w, psi0, sqrt_gamma, dt, n, record=False)
        n2 = float(np.vdot(psi, psi).real)
        norms[n] = n2
        if n2 == 0.0:
            break
        psi = psi / np.sqrt(n2)
        states[n] = psi
        expect[n] = np.einsum("a,jab,b->j", psi.conj(), aint[n], psi).real
        if n == npts - 1:
            break
        rows = lagtab[np.abs(n - idx)]  # (npts, D, D)
        w += kick * np.einsum("vjk,j->kv", rows, expect[n])
    return states, expect, norms, w


def _expm_batch(g, v):
    """Row-wise ``exp(g[i]) v[i]`` by a common sub-stepped Taylor series."""
    nrm = np.abs(g).sum(axis=1).max()
    s = max(1, int(np.ceil(nrm / 0.5)))
    out = v.copy()
    for _ in range(s):
        term = out
        acc = out.copy()
        for k in range(1, 40):
            term = np.einsum("iab,ib->ia", g, term) / (s * k)
            acc += term
            if np.abs(term).max() <= 1e-17 * np.abs(acc).max():
                break
        out = acc
    return out


def linear_sweep_batch(base, aint, wb, psi0, sqrt_gamma, dt, record_at):
    base = np.asarray(base, dtype=complex)
    aint = np.asarray(aint, dtype=complex)
    wb = np.asarray(wb, dtype=float)
    rec = np.asarray(record_at, dtype=np.intp)
    ntraj, d = wb.shape[0], base.shape[1]
    out = np.empty((ntraj, rec.size, d), dtype=complex)
    if rec.size == 0:
        return out
    if np.any(np.diff(rec) < 0) or rec[0] < 0:
        raise ValueError("record_at must be sorted and non-negative")
    nsteps = int(rec[-1])
    if nsteps > base.shape[0] or nsteps > wb.shape[2]:
        raise ValueError("record_at exceeds available generators or noise samples")
    psi = np.tile(np.asarray(psi0, dtype=complex), (ntraj, 1))
    coef = sqrt_gamma * dt
    r = 0
    for n in range(nsteps + 1):
        while r < rec.size and rec[r] == n:
            out[:, r] = psi
            r += 1
        if n == nsteps:
            break
        g = base[n][None] + np.einsum("ij,jab->iab", coef * wb[:, :, n], aint[n])
        psi = _expm_batch(g, psi)
    return out
