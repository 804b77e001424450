"""Non-Markovian collapse: the linear stochastic equation with memory, the
noise redefinition and the normalised trajectories built from them.

States are propagated in the interaction picture with respect to ``H``.
Step ``n`` applies ``exp(G_n)`` with

    G_n = sqrt(g) dt sum_j A_j(t_n) [w_j(t_n) - 2 sqrt(g) O_j(n)]
    O_j(n) = sum_{m<=n} c_m dt D_jk(t_n - t_m) A_k(t_m),   c_n = 1/2, else 1.

The half weight on the diagonal makes the discrete noise average of the
squared norm exactly one when the collapse operators commute.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _backend
from .errors import DegenerateState, GridMismatch, InvalidArgument, ShapeError
from .kernels import ModeDecomposition, lag_table
from .markov import CollapseSystem
from .noise import Grid, NoiseTrajectory, sample_noise_dense_batch, sample_noise_modes_batch

__all__ = [
    "InteractionOps",
    "interaction_ops",
    "kernel_lags",
    "memory_operators",
    "memory_operators_direct",
    "LinearPropagator",
    "LinearTrajectory",
    "PhysicalTrajectory",
    "linear_propagate",
    "fd_insertion",
    "sse_residual",
    "redefine_noise_step",
    "nonlinear_trajectory",
    "nonlinear_trajectory_reference",
    "nonlinear_ensemble",
    "measure_weight",
    "sample_noises",
    "GirsanovReport",
    "girsanov_check",
]


@dataclass(frozen=True, eq=False)
class InteractionOps:
    """Collapse operators ``A_k(t_n) = U(t_n)^dag A_k U(t_n)`` with ``U(t) = exp(-iHt)``.

    ``ops`` has shape (N+1, D, d, d).
    """

    system: CollapseSystem
    grid: Grid
    ops: np.ndarray
    energies: np.ndarray
    eigvecs: np.ndarray

    def unitary(self, t: float) -> np.ndarray:
        """``exp(-iHt)`` from the stored eigendecomposition."""
        v = self.eigvecs
        return (v * np.exp(-1j * self.energies * t)) @ v.conj().T

    def to_schrodinger(self, states: np.ndarray) -> np.ndarray:
        """Map interaction-picture states (N+1, d) to the Schrödinger picture."""
        v = self.eigvecs
        ph = np.exp(-1j * np.multiply.outer(self.grid.times, self.energies))
        return ((states @ v.conj()) * ph) @ v.T


def interaction_ops(sys: CollapseSystem, grid: Grid) -> InteractionOps:
    e, v = np.linalg.eigh(sys.H.data)
    t = grid.times
    # A(t) = V diag(e^{iEt}) V^dag A V diag(e^{-iEt}) V^dag
    a_eig = np.einsum("ai,kab,bj->kij", v.conj(), sys.a_stack, v)
    ph = np.exp(1j * np.subtract.outer(e, e)[None, :, :] * t[:, None, None])  # (N+1, d, d)
    rot = ph[:, None] * a_eig[None]
    ops = np.einsum("ai,nkij,bj->nkab", v, rot, v.conj())
    ops = 0.5 * (ops + ops.conj().transpose(0, 1, 3, 2))
    ops[0] = sys.a_stack
    return InteractionOps(sys, grid, np.ascontiguousarray(ops), e, v)


def kernel_lags(source, dt: float, n: int) -> np.ndarray:
    """Kernel at lags ``0..n`` dt, shape (n+1, D, D), from modes or a kernel object."""
    if isinstance(source, ModeDecomposition):
        return lag_table(source, dt, n)
    return np.asarray(source(np.arange(n + 1) * dt), dtype=float)


def _channels(source) -> int:
    return source.channels


def memory_operators_direct(iops: InteractionOps, lags: np.ndarray) -> np.ndarray:
    """``O_j(n)`` by direct summation over the history, shape (N+1, D, d, d)."""
    dt = iops.grid.dt
    npts = iops.grid.steps + 1
    a = iops.ops
    out = np.empty_like(a)
    for n in range(npts):
        c = np.full(n + 1, dt)
        c[n] = 0.5 * dt
        kern = lags[n - np.arange(n + 1)]  # (n+1, D, D) at lag t_n - t_m
        out[n] = np.einsum("m,mjk,mkab->jab", c, kern, a[: n + 1])
    return out


def memory_operators(iops: InteractionOps, source) -> np.ndarray:
    """``O_j(n)`` for every grid point, shape (N+1, D, d, d).

    With a mode decomposition of fewer modes than grid points the history is
    carried as running cosine/sine sums, O(M) work per step; otherwise the
    lag table is summed directly.
    """
    grid = iops.grid
    npts = grid.steps + 1
    if not isinstance(source, ModeDecomposition) or source.modes >= npts:
        return memory_operators_direct(iops, kernel_lags(source, grid.dt, grid.steps))
    dt = grid.dt
    wts = source.weights  # (M, D, D)
    a = iops.ops
    out = np.empty_like(a)
    cs = np.zeros((source.modes,) + a.shape[1:], dtype=complex)  # sum_m dt cos(w t_m) A(t_m)
    sn = np.zeros_like(cs)
    for n, t in enumerate(grid.times):
        c = np.cos(source.omega * t)
        s = np.sin(source.omega * t)
        half_c = cs + 0.5 * dt * c[:, None, None, None] * a[n][None]
        half_s = sn + 0.5 * dt * s[:, None, None, None] * a[n][None]
        out[n] = np.einsum("m,mjk,mkab->jab", c, wts, half_c) + np.einsum("m,mjk,mkab->jab", s, wts, half_s)
        cs += dt * c[:, None, None, None] * a[n][None]
        sn += dt * s[:, None, None, None] * a[n][None]
    return out


@dataclass(frozen=True, eq=False)
class LinearTrajectory:
    """Unnormalised interaction-picture states ``states[n]`` and ``norms2[n]``."""

    grid: Grid
    states: np.ndarray
    norms2: np.ndarray


@dataclass(frozen=True, eq=False)
class PhysicalTrajectory:
    """Normalised trajectory with its running noise redefinition.

    ``states`` are Schrödinger-picture unit vectors, ``expect[n, k]`` the
    collapse-operator means, ``norms2`` the squared norms of the linear
    states under ``w^[t_n]``, ``noise`` the final field ``w^[T]`` and
    ``snapshots[n]`` (optional) the field ``w^[t_n]``.
    """

    grid: Grid
    states: np.ndarray
    states_interaction: np.ndarray
    expect: np.ndarray
    norms2: np.ndarray
    noise_initial: NoiseTrajectory
    noise: NoiseTrajectory
    snapshots: np.ndarray | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        nch = self.expect.shape[1]
        wr.writerow(["t"] + [f"<A_{k}>" for k in range(nch)] + ["norm_linear"])
        for n, t in enumerate(self.grid.times):
            wr.writerow([repr(float(t))] + [repr(float(x)) for x in self.expect[n]]
                        + [repr(float(np.sqrt(self.norms2[n])))])
        return buf.getvalue()

    def snapshots_csv(self) -> str:
        """Rows ``(t_n, k)`` holding ``w^[t_n]_k`` on the whole grid."""
        if self.snapshots is None:
            raise InvalidArgument("trajectory was run without noise snapshots")
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "channel"] + [f"s={float(s)!r}" for s in self.grid.times])
        for n, t in enumerate(self.grid.times):
            for k in range(self.snapshots.shape[1]):
                wr.writerow([repr(float(t)), k] + [repr(float(x)) for x in self.snapshots[n, k]])
        return buf.getvalue()


class LinearPropagator:
    """Precomputed step tables for one (system, kernel, grid) combination.

    ``source`` is a :class:`ModeDecomposition` or a stationary kernel object.
    The tables are read-only and may be shared between worker threads.
    """

    def __init__(self, sys: CollapseSystem, source, grid: Grid, backend: str | None = None):
        if _channels(source) != sys.channels:
            raise ShapeError(f"kernel has {_channels(source)} channels, system has {sys.channels}")
        self.system = sys
        self.source = source
        self.grid = grid
        self.kernels = _backend.get(backend)
        self.iops = interaction_ops(sys, grid)
        self.memory = memory_operators(self.iops, source)
        self.lags = np.ascontiguousarray(kernel_lags(source, grid.dt, grid.steps))
        g = sys.gamma
        base = -2.0 * g * grid.dt * np.einsum("njab,njbc->nac", self.iops.ops, self.memory)
        self.base = np.ascontiguousarray(base[: grid.steps])
        self.sqrt_gamma = float(np.sqrt(g))

    def _noise(self, w) -> np.ndarray:
        if isinstance(w, NoiseTrajectory):
            if w.grid != self.grid:
                raise GridMismatch("noise grid differs from propagator grid")
            w = w.values
        w = np.asarray(w, dtype=float)
        if w.shape != (self.system.channels, self.grid.steps + 1):
            raise GridMismatch(f"noise must have shape {(self.system.channels, self.grid.steps + 1)}")
        return w

    def _psi0(self, psi0) -> np.ndarray:
        v = np.asarray(psi0, dtype=complex)
        if v.shape != (self.system.dim,):
            raise ShapeError("initial state dimension does not match the system")
        return v

    def step(self, w, psi, n: int) -> np.ndarray:
        """Apply the single step ``n``."""
        w = np.asarray(w, dtype=float)
        return self.kernels.linear_sweep(self.base[n:n + 1], self.iops.ops[n:n + 1], w[:, n:n + 1],
                                         psi, self.sqrt_gamma, self.grid.dt, 1, False)

    def sweep(self, w, psi0, nsteps: int | None = None) -> LinearTrajectory:
        w = self._noise(w)
        nsteps = self.grid.steps if nsteps is None else nsteps
        states = self.kernels.linear_sweep(self.base, self.iops.ops, w, self._psi0(psi0),
                                           self.sqrt_gamma, self.grid.dt, nsteps, True)
        norms2 = np.einsum("na,na->n", states.conj(), states).real
        return LinearTrajectory(self.grid, states, norms2)

    def batch(self, noises, psi0, record_at) -> np.ndarray:
        """Interaction-picture states for many noises at step indices ``record_at``."""
        noises = np.asarray(noises, dtype=float)
        if noises.ndim != 3 or noises.shape[1:] != (self.system.channels, self.grid.steps + 1):
            raise GridMismatch("noises must have shape (n, D, N+1) on the propagator grid")
        return self.kernels.linear_sweep_batch(self.base, self.iops.ops, noises, self._psi0(psi0),
                                               self.sqrt_gamma, self.grid.dt, np.asarray(record_at))

    def nonlinear(self, w0, psi0, snapshots: bool = False) -> PhysicalTrajectory:
        w0 = self._noise(w0)
        v0 = self._psi0(psi0)
        nv = np.linalg.norm(v0)
        if nv == 0:
            raise DegenerateState("initial state has zero norm")
        snap = np.empty((self.grid.steps + 1,) + w0.shape) if snapshots else None
        states, expect, norms2, wfin = self.kernels.nonlinear_trajectory(
            self.base, self.iops.ops, w0, v0 / nv, self.lags, self.sqrt_gamma, self.grid.dt, snap)
        bad = np.flatnonzero(~(norms2 > 0))
        if bad.size:
            raise DegenerateState(f"linear state vanished at step {bad[0]} (t={self.grid.times[bad[0]]})")
        return PhysicalTrajectory(self.grid, self.iops.to_schrodinger(states), states, expect, norms2,
                                  NoiseTrajectory(self.grid, w0), NoiseTrajectory(self.grid, wfin), snap)


def linear_propagate(prop: LinearPropagator, w, psi0) -> LinearTrajectory:
    """Linear non-Markovian trajectory under noise ``w`` (interaction picture)."""
    return prop.sweep(w, psi0)


def fd_insertion(prop: LinearPropagator, w, psi0, s: float, k: int, t: float) -> np.ndarray:
    """Functional derivative of the linear state at ``t`` with respect to ``w_k(s)``.

    Propagate to ``s``, apply ``sqrt(g) A_k(s)``, then continue with the same
    step generators up to ``t``.
    """
    grid = prop.grid
    if s > t + 1e-12 * max(1.0, abs(t)):
        raise InvalidArgument("the state at t does not depend on the noise at later times s > t")
    ns, nt = grid.index(s), grid.index(t)
    if not 0 <= k < prop.system.channels:
        raise InvalidArgument(f"channel {k} out of range")
    w = prop._noise(w)
    psi = prop.sweep(w, psi0, ns).states[ns]
    psi = prop.sqrt_gamma * (prop.iops.ops[ns, k] @ psi)
    for n in range(ns, nt):
        psi = prop.step(w, psi, n)
    return psi


def sse_residual(prop: LinearPropagator, w, psi0, n: int) -> np.ndarray:
    """Residual of the differential equation at grid point ``n``.

    Forward difference of the linear state minus the right side assembled
    from :func:`fd_insertion`, using the same history weights as the stepper.
    """
    grid = prop.grid
    w = prop._noise(w)
    lt = prop.sweep(w, psi0, n + 1)
    dphi = (lt.states[n + 1] - lt.states[n]) / grid.dt
    a = prop.iops.ops
    sg = prop.sqrt_gamma
    rhs = sg * np.einsum("j,jab,b->a", w[:, n], a[n], lt.states[n])
    nch = prop.system.channels
    t = grid.times[n]
    for m in range(n + 1):
        c = 0.5 * grid.dt if m == n else grid.dt
        ins = np.stack([fd_insertion(prop, w, psi0, grid.times[m], kk, t) for kk in range(nch)])
        kern = prop.lags[n - m]
        rhs = rhs - 2 * sg * c * np.einsum("jk,jab,kb->a", kern, a[n], ins)
    return dphi - rhs


def redefine_noise_step(w: NoiseTrajectory, source, expect, t: float, dt: float,
                        gamma: float) -> NoiseTrajectory:
    """Shift the whole noise field by one rectangle of the redefinition integral.

    ``w_new_k(v) = w_k(v) + 2 sqrt(gamma) dt sum_j D_jk(t - v) <A_j>_t``.
    """
    ex = np.atleast_1d(np.asarray(expect, dtype=float))
    if ex.shape != (w.channels,):
        raise ShapeError(f"need {w.channels} expectation values, got {ex.shape}")
    w.grid.index(t)
    lag = t - w.grid.times
    if isinstance(source, ModeDecomposition):
        from .kernels import reconstruct
        kern = reconstruct(source, lag)
    else:
        kern = np.asarray(source(lag), dtype=float)
    shift = 2.0 * np.sqrt(gamma) * dt * np.einsum("vjk,j->kv", kern, ex)
    return w.with_values(w.values + shift)


def nonlinear_trajectory(sys: CollapseSystem, source, w0: NoiseTrajectory, psi0, grid: Grid | None = None,
                         snapshots: bool = False, prop: LinearPropagator | None = None,
                         backend: str | None = None) -> PhysicalTrajectory:
    """Normalised non-Markovian trajectory driven by the initial noise ``w0``.

    At every grid point the linear equation is re-solved from t=0 under the
    current redefined noise, normalised, and the noise is shifted by the
    new expectation values.  Cost is O(N^2) propagation steps.
    """
    grid = w0.grid if grid is None else grid
    if w0.grid != grid:
        raise GridMismatch("noise grid differs from the requested grid")
    if prop is None:
        prop = LinearPropagator(sys, source, grid, backend=backend)
    return prop.nonlinear(w0, psi0, snapshots=snapshots)


def nonlinear_trajectory_reference(prop: LinearPropagator, w0: NoiseTrajectory, psi0) -> PhysicalTrajectory:
    """Step-by-step version built from :func:`linear_propagate` and
    :func:`redefine_noise_step`; slow, used to cross-check the kernels."""
    grid = prop.grid
    sys = prop.system
    w = w0
    v0 = np.asarray(psi0, dtype=complex)
    v0 = v0 / np.linalg.norm(v0)
    npts = grid.steps + 1
    states = np.empty((npts, sys.dim), dtype=complex)
    expect = np.empty((npts, sys.channels))
    norms2 = np.empty(npts)
    snaps = np.empty((npts, sys.channels, npts))
    for n, t in enumerate(grid.times):
        snaps[n] = w.values
        phi = prop.sweep(w, v0, n).states[n]
        norms2[n] = np.vdot(phi, phi).real
        if norms2[n] == 0:
            raise DegenerateState(f"linear state vanished at step {n}")
        psi = phi / np.sqrt(norms2[n])
        states[n] = psi
        expect[n] = np.einsum("a,jab,b->j", psi.conj(), prop.iops.ops[n], psi).real
        if n < grid.steps:
            w = redefine_noise_step(w, prop.source, expect[n], t, grid.dt, sys.gamma)
    return PhysicalTrajectory(grid, prop.iops.to_schrodinger(states), states, expect, norms2, w0, w, snaps)


def nonlinear_ensemble(prop: LinearPropagator, noises: np.ndarray, psi0, threads: int = 1):
    """Run normalised trajectories for every noise in ``noises`` (n, D, N+1).

    Returns ``(expect, final_states)`` with shapes (n, N+1, D) and (n, d);
    results are ordered by trajectory index regardless of ``threads``.
    """
    noises = np.asarray(noises, dtype=float)

    def one(i):
        tr = prop.nonlinear(noises[i], psi0)
        return tr.expect, tr.states[-1]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            res = list(pool.map(one, range(noises.shape[0])))
    else:
        res = [one(i) for i in range(noises.shape[0])]
    return np.stack([r[0] for r in res]), np.stack([r[1] for r in res])


def measure_weight(ltraj: LinearTrajectory, t: float) -> float:
    """Squared norm of the linear state: the density of the physical measure at ``t``."""
    return float(ltraj.norms2[ltraj.grid.index(t)])


def sample_noises(source, grid: Grid, seed: int, count: int, start: int = 0,
                  sampler: str | None = None) -> np.ndarray:
    """Noises from the reference measure: mode sampler for decompositions,
    dense Gaussian sampler for kernel objects (override with ``sampler``)."""
    sampler = sampler or ("modes" if isinstance(source, ModeDecomposition) else "dense")
    if sampler == "modes":
        return sample_noise_modes_batch(source, grid, seed, count, start)
    if sampler == "dense":
        return sample_noise_dense_batch(source, grid, seed, count, start=start)
    raise InvalidArgument(f"unknown sampler {sampler!r}")


@dataclass(frozen=True)
class GirsanovReport:
    """Both sides of ``E_Q[f(w^[t])] = E_Q[f(w) |phi_w(t)|^2]``."""

    name: str
    shifted: float
    shifted_stderr: float
    weighted: float
    weighted_stderr: float
    zscore: float
    count: int


def _builtin_functional(name: str, grid: Grid, t1, t2):
    i1 = grid.index(t1)
    i2 = grid.index(t2)
    if name == "one":
        return lambda w: np.ones(w.shape[0])
    if name == "w1":
        return lambda w: w[:, 0, i1]
    if name == "w1w2":
        return lambda w: w[:, 0, i1] * w[:, 0, i2]
    raise InvalidArgument(f"unknown functional {name!r}; use 'one', 'w1', 'w1w2' or a callable")


def girsanov_check(sys: CollapseSystem, source, grid: Grid, f, n_traj: int, seed: int, psi0,
                   t1: float | None = None, t2: float | None = None, threads: int = 1,
                   prop: LinearPropagator | None = None) -> GirsanovReport:
    """Compare the shifted-noise and weighted estimators at the final grid time.

    ``f`` is ``'one'``, ``'w1'`` (``w_0(t1)``), ``'w1w2'`` (``w_0(t1) w_0(t2)``)
    or a callable mapping noises (n, D, N+1) to values (n,).  The z-score
    uses the paired differences of the two estimators on shared noises.
    """
    t1 = grid.times[grid.steps // 3] if t1 is None else t1
    t2 = grid.times[(2 * grid.steps) // 3] if t2 is None else t2
    name = f if isinstance(f, str) else getattr(f, "__name__", "custom")
    fn = _builtin_functional(f, grid, t1, t2) if isinstance(f, str) else f
    prop = prop or LinearPropagator(sys, source, grid)
    noises = sample_noises(source, grid, seed, n_traj)
    v0 = np.asarray(psi0, dtype=complex)
    v0 = v0 / np.linalg.norm(v0)
    final = prop.batch(noises, v0, [grid.steps])[:, 0]
    weights = np.einsum("na,na->n", final.conj(), final).real
    rhs = fn(noises) * weights

    def shifted(i):
        return prop.nonlinear(noises[i], v0).noise.values

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            ws = np.stack(list(pool.map(shifted, range(n_traj))))
    else:
        ws = np.stack([shifted(i) for i in range(n_traj)])
    lhs = fn(ws)
    diff = lhs - rhs
    sd = diff.std(ddof=1) / np.sqrt(n_traj)
    z = 0.0 if sd == 0 else float(diff.mean() / sd)
    return GirsanovReport(name, float(lhs.mean()), float(lhs.std(ddof=1) / np.sqrt(n_traj)),
                          float(rhs.mean()), float(rhs.std(ddof=1) / np.sqrt(n_traj)), z, n_traj)
