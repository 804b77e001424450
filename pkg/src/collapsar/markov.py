"""Markovian collapse dynamics: normalised Euler-Maruyama trajectories and
the Lindblad equation that their ensemble average obeys."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateState, InvalidArgument, InvalidOperator, ShapeError
from .noise import Grid, rng_stream
from .qcore import MixedState, Operator, PureState

__all__ = [
    "CollapseSystem",
    "ito_step",
    "lindblad_generator",
    "lindblad_propagate",
    "lindblad_trajectory",
    "MarkovEnsemble",
    "run_markov_ensemble",
    "wiener_increments",
    "refine_increments",
    "complex_matrices_to_json",
    "complex_matrices_from_json",
]


@dataclass(frozen=True, eq=False)
class CollapseSystem:
    """Hamiltonian ``H``, Hermitian collapse operators ``A_k`` and rate ``gamma``."""

    H: Operator
    A: tuple
    gamma: float

    def __init__(self, H, A: Sequence, gamma: float):
        h = H if isinstance(H, Operator) else Operator(H, hermitian=True)
        if not h.hermitian:
            h = Operator(h.data, hermitian=True)
        ops = []
        for i, a in enumerate(A):
            arr = np.asarray(a.data if isinstance(a, Operator) else a, dtype=complex)
            if arr.shape != (h.dim, h.dim):
                raise ShapeError(f"collapse operator {i} has shape {arr.shape}, expected {(h.dim, h.dim)}")
            if np.abs(arr - arr.conj().T).max() > 1e-10 * max(1.0, np.abs(arr).max()):
                raise InvalidOperator(f"collapse operator {i} is not Hermitian")
            ops.append(Operator(arr, hermitian=True))
        if not ops:
            raise InvalidArgument("at least one collapse operator is required")
        gamma = float(gamma)
        if not gamma >= 0 or not np.isfinite(gamma):
            raise InvalidArgument("gamma must be finite and >= 0")
        object.__setattr__(self, "H", h)
        object.__setattr__(self, "A", tuple(ops))
        object.__setattr__(self, "gamma", gamma)

    @property
    def dim(self) -> int:
        return self.H.dim

    @property
    def channels(self) -> int:
        return len(self.A)

    @property
    def a_stack(self) -> np.ndarray:
        """Collapse operators as an array of shape (D, d, d)."""
        return np.stack([a.data for a in self.A])


def _ito_batch(psi, h, a, gamma, dw, dt):
    """Normalised Euler-Maruyama step for a batch ``psi`` of shape (n, d)."""
    ap = np.einsum("kab,nb->nka", a, psi)  # A_k psi
    mean = np.einsum("na,nka->nk", psi.conj(), ap).real
    cen = ap - mean[:, :, None] * psi[:, None, :]  # (A - <A>) psi
    cen2 = np.einsum("kab,nkb->nka", a, cen) - mean[:, :, None] * cen
    sg = np.sqrt(gamma)
    out = psi - 1j * dt * psi @ h.T
    out = out + sg * np.einsum("nk,nka->na", dw, cen) - 0.5 * gamma * dt * cen2.sum(axis=1)
    nrm = np.linalg.norm(out, axis=1)
    if np.any(nrm == 0):
        raise DegenerateState("Euler-Maruyama step produced a zero vector")
    return out / nrm[:, None], mean


def ito_step(s, sys: CollapseSystem, dW, dt: float) -> PureState:
    """One normalised Euler-Maruyama step of the Markovian collapse equation."""
    v = np.asarray(s, dtype=complex)
    if abs(np.linalg.norm(v) - 1.0) > 1e-8:
        raise InvalidArgument("ito_step expects a unit-norm state")
    dw = np.atleast_1d(np.asarray(dW, dtype=float))
    if dw.shape != (sys.channels,):
        raise ShapeError(f"need {sys.channels} Wiener increments, got {dw.shape}")
    out, _ = _ito_batch(v[None, :], sys.H.data, sys.a_stack, sys.gamma, dw[None, :], dt)
    return PureState(out[0])


def lindblad_generator(sys: CollapseSystem) -> np.ndarray:
    """Superoperator on row-major ``vec(rho)``; uses ``vec(A rho B) = (A kron B^T) vec(rho)``."""
    d = sys.dim
    eye = np.eye(d)
    h = sys.H.data
    gen = -1j * (np.kron(h, eye) - np.kron(eye, h.T))
    for a in sys.A:
        m = a.data
        m2 = m @ m
        gen += sys.gamma * (np.kron(m, m.T) - 0.5 * np.kron(m2, eye) - 0.5 * np.kron(eye, m2.T))
    return gen


def lindblad_propagate(rho0, sys: CollapseSystem, t: float) -> MixedState:
    """Exact solution of the Lindblad equation at time ``t``."""
    r = np.asarray(rho0, dtype=complex)
    d = sys.dim
    prop = scipy.linalg.expm(lindblad_generator(sys) * t)
    out = (prop @ r.reshape(-1)).reshape(d, d)
    return MixedState(0.5 * (out + out.conj().T), validate=False)


def lindblad_trajectory(rho0, sys: CollapseSystem, grid: Grid) -> np.ndarray:
    """Lindblad solution at every grid time, shape (N+1, d, d)."""
    d = sys.dim
    step = scipy.linalg.expm(lindblad_generator(sys) * grid.dt)
    out = np.empty((grid.steps + 1, d, d), dtype=complex)
    v = np.asarray(rho0, dtype=complex).reshape(-1)
    out[0] = v.reshape(d, d)
    for n in range(grid.steps):
        v = step @ v
        out[n + 1] = v.reshape(d, d)
    return out


def wiener_increments(seed: int, index: int, steps: int, channels: int, dt: float) -> np.ndarray:
    """Increments ``dW`` of shape (steps, channels) from trajectory stream ``index``."""
    return rng_stream(seed, index).standard_normal((steps, channels)) * np.sqrt(dt)


def refine_increments(coarse: np.ndarray, substeps: int, dt: float, seed: int, index: int = 0) -> np.ndarray:
    """Brownian-bridge refinement of Wiener increments.

    ``coarse`` has shape (N, D) on spacing ``dt``; the result has shape
    (N * substeps, D) on spacing ``dt / substeps`` and its consecutive blocks
    of ``substeps`` increments sum exactly to the coarse increments, so the
    refined path passes through the same grid values.
    """
    coarse = np.asarray(coarse, dtype=float)
    k = int(substeps)
    if k < 1:
        raise InvalidArgument("substeps must be >= 1")
    if k == 1:
        return coarse.copy()
    n, d = coarse.shape
    z = rng_stream(seed, index).standard_normal((n, k, d)) * np.sqrt(dt / k)
    z -= z.mean(axis=1, keepdims=True)
    return (z + coarse[:, None, :] / k).reshape(n * k, d)


@dataclass(frozen=True, eq=False)
class MarkovEnsemble:
    """Per-trajectory means ``expect[i, n, k]`` and the averaged density matrix.

    ``rho_stderr[n]`` is the Frobenius norm of the per-entry standard error
    of the ensemble-averaged density matrix at grid point ``n``.
    """

    grid: Grid
    expect: np.ndarray
    rho: np.ndarray
    rho_stderr: np.ndarray
    final_states: np.ndarray
    snapshots: np.ndarray | None = None

    def trajectory_csv(self, index: int) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d = self.expect.shape[2]
        wr.writerow(["t"] + [f"reA_{k}" for k in range(d)] + ["norm"])
        for n, t in enumerate(self.grid.times):
            wr.writerow([repr(float(t))] + [repr(float(x)) for x in self.expect[index, n]] + ["1.0"])
        return buf.getvalue()


def run_markov_ensemble(sys: CollapseSystem, psi0, T: float, dt: float, n_traj: int, seed: int,
                        increments: np.ndarray | None = None, keep_states: bool = False,
                        record_every: int = 1) -> MarkovEnsemble:
    """Simulate ``n_traj`` normalised Itô trajectories in lockstep.

    ``increments`` (shape (n_traj, N, D)) overrides the seeded Wiener
    increments, which lets callers drive matched noise.  Results are
    recorded every ``record_every`` steps on the coarser grid of spacing
    ``record_every * dt``.  With ``keep_states`` the recorded states are
    returned in ``snapshots`` (n, N_rec+1, d).
    """
    if n_traj < 1:
        raise InvalidArgument("n_traj must be >= 1")
    fine = Grid.span(T, dt)
    every = int(record_every)
    if every < 1 or fine.steps % every:
        raise InvalidArgument("record_every must divide the number of steps")
    grid = Grid(dt * every, fine.steps // every)
    v0 = np.asarray(psi0, dtype=complex)
    if v0.shape != (sys.dim,):
        raise ShapeError("initial state dimension does not match the system")
    v0 = v0 / np.linalg.norm(v0)
    nch, N = sys.channels, fine.steps
    if increments is None:
        dws = np.stack([wiener_increments(seed, i, N, nch, dt) for i in range(n_traj)])
    else:
        dws = np.asarray(increments, dtype=float)
        if dws.shape != (n_traj, N, nch):
            raise ShapeError(f"increments must have shape {(n_traj, N, nch)}")
    h, a = sys.H.data, sys.a_stack
    psi = np.tile(v0, (n_traj, 1))
    nrec = grid.steps + 1
    expect = np.empty((n_traj, nrec, nch))
    rho = np.empty((nrec, sys.dim, sys.dim), dtype=complex)
    se = np.empty(nrec)
    snaps = np.empty((n_traj, nrec, sys.dim), dtype=complex) if keep_states else None

    def record(r, psi):
        proj = psi[:, :, None] * psi[:, None, :].conj()
        rho[r] = proj.mean(axis=0)
        if n_traj > 1:
            var = proj.real.var(axis=0, ddof=1) + proj.imag.var(axis=0, ddof=1)
            se[r] = np.sqrt(var.sum() / n_traj)
        else:
            se[r] = np.inf
        expect[:, r] = np.einsum("na,kab,nb->nk", psi.conj(), a, psi).real
        if keep_states:
            snaps[:, r] = psi

    for n in range(N):
        if n % every == 0:
            record(n // every, psi)
        psi, _ = _ito_batch(psi, h, a, sys.gamma, dws[:, n], dt)
    record(grid.steps, psi)
    return MarkovEnsemble(grid, expect, rho, se, psi, snaps)


def complex_matrices_to_json(mats) -> str:
    """JSON list of matrices, each entry ``[re, im]``."""
    out = [[[[float(z.real), float(z.imag)] for z in row] for row in np.asarray(m)] for m in mats]
    return json.dumps(out)


def complex_matrices_from_json(text: str) -> np.ndarray:
    arr = np.array(json.loads(text), dtype=float)
    return arr[..., 0] + 1j * arr[..., 1]
