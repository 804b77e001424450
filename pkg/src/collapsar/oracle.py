"""Density-matrix oracle for the non-Markovian dynamics.

The per-step superoperator reuses the memory operators of the state
propagator, so an ensemble of linear trajectories and this map differ only
by Monte Carlo error:

    L_n rho = g dt sum_j (A_j rho O_j + O_j rho A_j - A_j O_j rho - rho O_j A_j)

with ``A_j = A_j(t_n)`` and ``O_j = O_j(n)`` in the interaction picture.
The step map is ``exp(L_n)``; the total map is their time-ordered product.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ShapeError
from .kernels import double_integral
from .markov import CollapseSystem
from .noise import Grid
from .nonmarkov import LinearPropagator
from .qcore import MixedState

__all__ = [
    "SuperPropagator",
    "influence_propagate",
    "step_superoperators",
    "dephasing_coherence",
    "compare_density",
    "coherence_csv",
]


def _lr(a, b):
    """Row-major superoperator of ``rho -> a rho b``."""
    return np.kron(a, b.T)


def step_superoperators(prop: LinearPropagator) -> np.ndarray:
    """Per-step generators ``L_n`` as (N, d^2, d^2) matrices."""
    sys = prop.system
    a_all = prop.iops.ops
    o_all = prop.memory
    d = sys.dim
    eye = np.eye(d)
    out = np.zeros((prop.grid.steps, d * d, d * d), dtype=complex)
    for n in range(prop.grid.steps):
        for j in range(sys.channels):
            a, o = a_all[n, j], o_all[n, j]
            out[n] += _lr(a, o) + _lr(o, a) - _lr(a @ o, eye) - _lr(eye, o @ a)
    return sys.gamma * prop.grid.dt * out


@dataclass(frozen=True, eq=False)
class SuperPropagator:
    """Influence-map propagation.

    ``rho_interaction[n]`` and ``rho[n]`` (Schrödinger picture) are the
    propagated density matrices, ``total`` the composed map on row-major
    ``vec(rho)`` (interaction picture).
    """

    grid: Grid
    steps: np.ndarray
    total: np.ndarray
    rho_interaction: np.ndarray
    rho: np.ndarray

    @property
    def dim(self) -> int:
        return self.rho.shape[1]

    def choi(self) -> np.ndarray:
        """Choi matrix ``sum_ij |i><j| (x) M(|i><j|)``."""
        d = self.dim
        c = np.zeros((d * d, d * d), dtype=complex)
        for i in range(d):
            for j in range(d):
                e = np.zeros((d, d))
                e[i, j] = 1.0
                c += np.kron(e, (self.total @ e.reshape(-1)).reshape(d, d))
        return c

    def choi_min_eigenvalue(self) -> float:
        c = self.choi()
        return float(np.linalg.eigvalsh(0.5 * (c + c.conj().T)).min())

    def trace_drift(self) -> float:
        """Largest deviation of ``tr rho(t_n)`` from its initial value."""
        tr = np.trace(self.rho_interaction, axis1=1, axis2=2).real
        return float(np.abs(tr - tr[0]).max())

    def is_trace_preserving(self, tol: float = 1e-9) -> bool:
        d = self.dim
        # tr M(X) = tr X  <=>  vec(I)^T M = vec(I)^T
        vid = np.eye(d).reshape(-1)
        return bool(np.abs(vid @ self.total - vid).max() <= tol)

    def is_completely_positive(self, tol: float = 1e-7) -> bool:
        return self.choi_min_eigenvalue() >= -tol


def influence_propagate(rho0, sys: CollapseSystem, source, grid: Grid,
                        prop: LinearPropagator | None = None) -> SuperPropagator:
    """Propagate ``rho0`` with the discretised influence map on ``grid``."""
    prop = prop or LinearPropagator(sys, source, grid)
    r0 = np.asarray(rho0, dtype=complex)
    d = sys.dim
    if r0.shape != (d, d):
        raise ShapeError(f"rho0 must be {d}x{d}")
    gens = step_superoperators(prop)
    steps = np.stack([scipy.linalg.expm(g) for g in gens]) if len(gens) else np.empty((0, d * d, d * d))
    total = np.eye(d * d, dtype=complex)
    out = np.empty((grid.steps + 1, d, d), dtype=complex)
    v = r0.reshape(-1)
    out[0] = r0
    for n in range(grid.steps):
        v = steps[n] @ v
        total = steps[n] @ total
        out[n + 1] = v.reshape(d, d)
    out = 0.5 * (out + out.conj().transpose(0, 2, 1))
    u = np.stack([prop.iops.unitary(t) for t in grid.times])
    schr = u @ out @ u.conj().transpose(0, 2, 1)
    return SuperPropagator(grid, steps, total, out, schr)


def dephasing_coherence(source, gamma: float, t) -> np.ndarray | float:
    """Coherence decay factor ``exp(-2 gamma F(t))`` for a single commuting channel."""
    ts = np.atleast_1d(np.asarray(t, dtype=float))
    vals = np.array([np.exp(-2.0 * gamma * double_integral(source, float(x))[0, 0]) for x in ts])
    return float(vals[0]) if np.ndim(t) == 0 else vals


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(0.5 * (m + m.conj().T))
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.conj().T


def compare_density(a, b) -> dict:
    """Trace distance ``||a - b||_1 / 2`` and Uhlmann fidelity ``(tr sqrt(sqrt(a) b sqrt(a)))^2``."""
    x = np.asarray(a.data if isinstance(a, MixedState) else a, dtype=complex)
    y = np.asarray(b.data if isinstance(b, MixedState) else b, dtype=complex)
    if x.shape != y.shape:
        raise ShapeError(f"cannot compare {x.shape} with {y.shape}")
    diff = x - y
    td = 0.5 * float(np.abs(np.linalg.eigvalsh(0.5 * (diff + diff.conj().T))).sum())
    sa = _psd_sqrt(x)
    inner = sa @ y @ sa
    f = float(np.sqrt(np.clip(np.linalg.eigvalsh(0.5 * (inner + inner.conj().T)), 0.0, None)).sum() ** 2)
    return {"trace_distance": td, "fidelity": min(max(f, 0.0), 1.0)}


def coherence_csv(times, coherence, closed_form=None) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["t", "coherence"] + (["closed_form"] if closed_form is not None else []))
    for i, t in enumerate(times):
        row = [repr(float(t)), repr(float(coherence[i]))]
        if closed_form is not None:
            row.append(repr(float(closed_form[i])))
        wr.writerow(row)
    return buf.getvalue()
