"""Bohmian bath: exact joint evolution of system and oscillator bath, the
system state conditioned on the bath positions, and the guided positions.

The bath is a set of unit oscillators, two per (channel, mode) pair, with
quadratures ``x+`` and ``x-``.  Everything is written in the interaction
picture of the free bath, so the bath has no Hamiltonian of its own and the
joint generator is

    H(t) = H_sys + sqrt(2 g) sum_k A_k sum_{l,m} kappa[l,k,m] (cos(w_m t) p+_lm + sin(w_m t) p-_lm).

Oscillator ordering in the tensor product: all ``+`` quadratures (row-major
over ``(l, m)``), then all ``-`` quadratures; the system factor comes first.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateState, InvalidArgument, ShapeError, TooLarge
from .kernels import ModeDecomposition
from .markov import CollapseSystem
from .noise import Grid, HiddenVariables, NoiseTrajectory, noise_from_hidden, rng_stream
from .qcore import DIM_CAP, MixedState, expm_action

__all__ = [
    "TruncationWarning",
    "BathConfig",
    "JointState",
    "BohmTrajectory",
    "BohmEnsemble",
    "ladder",
    "position_matrix",
    "momentum_matrix",
    "build_interaction",
    "initial_joint",
    "evolve_joint",
    "hermite_point",
    "hermite_functions",
    "hermite_ratios",
    "conditional_state",
    "conditional_states",
    "guiding_velocity",
    "guiding_velocity_generic",
    "integrate_bohm",
    "integrate_bohm_ensemble",
    "trace_out_bath",
    "conditional_projector_average",
    "dump_joint",
    "load_joint",
]


class TruncationWarning(UserWarning):
    """Population of the highest kept Fock level exceeded the threshold."""


TRUNCATION_THRESHOLD = 1e-6


def ladder(n: int) -> np.ndarray:
    """Annihilation operator on ``n`` Fock levels."""
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def position_matrix(n: int) -> np.ndarray:
    a = ladder(n)
    return (a + a.conj().T) / np.sqrt(2.0)


def momentum_matrix(n: int) -> np.ndarray:
    """``p = (a - a^dag) / (i sqrt 2)``; ``<k|p|k+1> = -i sqrt((k+1)/2)``."""
    a = ladder(n)
    return (a - a.conj().T) / (1j * np.sqrt(2.0))


@dataclass(frozen=True, eq=False)
class BathConfig:
    """Mode decomposition plus Fock truncation (levels ``0..n_max-1`` per oscillator)."""

    md: ModeDecomposition
    n_max: int
    dim_cap: int = DIM_CAP

    def __post_init__(self):
        if int(self.n_max) < 2:
            raise InvalidArgument("n_max must be >= 2")
        object.__setattr__(self, "n_max", int(self.n_max))

    @property
    def oscillators(self) -> int:
        return 2 * self.md.channels * self.md.modes

    def bath_dims(self) -> list:
        return [self.n_max] * self.oscillators

    def joint_dim(self, dim_sys: int) -> int:
        return dim_sys * self.n_max ** self.oscillators

    def check(self, dim_sys: int) -> None:
        total = self.joint_dim(dim_sys)
        if total > self.dim_cap:
            raise TooLarge(f"joint dimension {total} exceeds the cap {self.dim_cap}")

    def osc_index(self, sign: int, l: int, m: int) -> int:
        """Tensor slot (after the system) of quadrature ``sign`` (+1/-1) of pair (l, m)."""
        half = self.md.channels * self.md.modes
        return (0 if sign > 0 else half) + l * self.md.modes + m

    def split(self, flat: np.ndarray):
        """Split a vector over oscillators (..., 2DM) into ``(xplus, xminus)`` of shape (..., D, M)."""
        d, m = self.md.channels, self.md.modes
        flat = np.asarray(flat)
        half = d * m
        return (flat[..., :half].reshape(flat.shape[:-1] + (d, m)),
                flat[..., half:].reshape(flat.shape[:-1] + (d, m)))


def _embed_bath(dim_sys, bc, slot, op_sys, op_bath, n_levels=None):
    n = bc.n_max if n_levels is None else n_levels
    left = n ** slot
    right = n ** (bc.oscillators - slot - 1)
    return np.kron(op_sys, np.kron(np.kron(np.eye(left), op_bath), np.eye(right)))


class _Generator:
    """Time-dependent joint generator ``H0 + sum_o f_o(t) C_o`` with cached pieces."""

    def __init__(self, bc: BathConfig, sys: CollapseSystem, n_levels: int | None = None):
        n = bc.n_max if n_levels is None else n_levels
        self.n = n
        md = bc.md
        d = sys.dim
        bath = n ** bc.oscillators
        self.h0 = np.kron(sys.H.data, np.eye(bath))
        p = momentum_matrix(n)
        a = sys.a_stack
        sg = np.sqrt(2.0 * sys.gamma)
        self.terms = []  # (omega, use_sin, matrix)
        for sign in (1, -1):
            for l in range(md.channels):
                for m in range(md.modes):
                    b = sg * np.einsum("k,kab->ab", md.kappa[l, :, m], a)
                    slot = bc.osc_index(sign, l, m)
                    c = _embed_bath(d, bc, slot, b, p, n)
                    self.terms.append((md.omega[m], sign < 0, c))

    def __call__(self, t: float) -> np.ndarray:
        h = self.h0.copy()
        for om, use_sin, c in self.terms:
            f = np.sin(om * t) if use_sin else np.cos(om * t)
            if f != 0.0:
                h += f * c
        return h


def build_interaction(bc: BathConfig, sys: CollapseSystem, t: float) -> np.ndarray:
    """Joint Hermitian generator at time ``t`` (dense, shape (dim, dim))."""
    bc.check(sys.dim)
    h = _Generator(bc, sys)(t)
    return 0.5 * (h + h.conj().T)


@dataclass(frozen=True, eq=False)
class JointState:
    """Joint amplitudes ``psi`` (flat, system index slowest) at time ``t``."""

    amplitudes: np.ndarray
    dim_sys: int
    bath: BathConfig
    t: float = 0.0

    @property
    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape([self.dim_sys] + self.bath.bath_dims())

    def top_population(self) -> float:
        """Largest population of the highest Fock level over all oscillators."""
        t = np.abs(self.tensor) ** 2
        top = 0.0
        for ax in range(1, t.ndim):
            top = max(top, float(np.take(t, -1, axis=ax).sum()))
        return top

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))


def initial_joint(psi0, bc: BathConfig) -> JointState:
    """``psi0`` times the bath vacuum."""
    v = np.asarray(psi0, dtype=complex)
    bc.check(v.size)
    vac = np.zeros(bc.n_max ** bc.oscillators, dtype=complex)
    vac[0] = 1.0
    return JointState(np.kron(v, vac), v.size, bc, 0.0)


def evolve_joint(state: JointState, sys: CollapseSystem, dt: float, generator=None,
                 warn: bool = True) -> JointState:
    """Midpoint exponential step ``exp(-i dt H(t + dt/2))``."""
    gen = generator or _Generator(state.bath, sys)
    h = gen(state.t + 0.5 * dt)
    out = expm_action(-1j * dt * h, state.amplitudes)
    new = JointState(out, state.dim_sys, state.bath, state.t + dt)
    if warn:
        top = new.top_population()
        if top > TRUNCATION_THRESHOLD:
            warnings.warn(f"top Fock level population {top:.2e} at t={new.t:.4g}", TruncationWarning,
                          stacklevel=2)
    return new


def hermite_functions(n: int, x) -> np.ndarray:
    """Oscillator eigenfunctions ``phi_0..phi_{n-1}`` at ``x``; shape ``x.shape + (n,)``."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n,))
    out[..., 0] = np.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n > 1:
        out[..., 1] = np.sqrt(2.0) * x * out[..., 0]
    for k in range(1, n - 1):
        out[..., k + 1] = np.sqrt(2.0 / (k + 1)) * x * out[..., k] - np.sqrt(k / (k + 1)) * out[..., k - 1]
    return out


def hermite_ratios(n: int, x) -> np.ndarray:
    """``phi_k(x) / phi_0(x)`` for ``k < n`` by the same recurrence (no Gaussian factor)."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (n,))
    out[..., 0] = 1.0
    if n > 1:
        out[..., 1] = np.sqrt(2.0) * x
    for k in range(1, n - 1):
        out[..., k + 1] = np.sqrt(2.0 / (k + 1)) * x * out[..., k] - np.sqrt(k / (k + 1)) * out[..., k - 1]
    return out


def hermite_point(n: int, x: float) -> float:
    """Normalised oscillator eigenfunction ``phi_n(x)``."""
    if n < 0:
        raise InvalidArgument("level must be >= 0")
    return float(hermite_functions(n + 1, x)[..., n])


def _flat_positions(x, bc: BathConfig) -> np.ndarray:
    if isinstance(x, HiddenVariables):
        return x.flat()
    arr = np.asarray(x, dtype=float)
    if arr.shape[-1] != bc.oscillators:
        raise ShapeError(f"positions must end with {bc.oscillators} oscillator coordinates")
    return arr


def _contract(tensor: np.ndarray, ratios: np.ndarray) -> np.ndarray:
    """Contract bath axes of ``tensor`` (d, n, ..., n) with ``ratios`` (B, n_osc, n) -> (B, d)."""
    out = np.broadcast_to(tensor, (ratios.shape[0],) + tensor.shape)
    for o in range(ratios.shape[1]):
        # always contract the first remaining bath axis
        out = np.einsum("bsk...,bk->bs...", out, ratios[:, o])
    return out


def conditional_states(state: JointState, xs) -> np.ndarray:
    """Unnormalised conditional states for positions ``xs`` (B, n_osc) -> (B, d).

    The bath amplitudes are divided exactly by the vacuum wave function, so
    at t=0 the result is ``psi0`` itself.
    """
    xs = np.atleast_2d(_flat_positions(xs, state.bath))
    r = hermite_ratios(state.bath.n_max, xs)
    return _contract(state.tensor, r)


def conditional_state(state: JointState, x):
    """Return ``(raw, normalised)`` system state conditioned on bath positions ``x``."""
    raw = conditional_states(state, _flat_positions(x, state.bath)[None, :])[0]
    nrm = np.linalg.norm(raw)
    if nrm == 0.0 or not np.isfinite(nrm):
        raise DegenerateState("conditional state vanishes at these positions (wave-function node)")
    return raw, raw / nrm


def _velocity_from_means(bc: BathConfig, sys: CollapseSystem, means: np.ndarray, t: float) -> np.ndarray:
    """Guiding velocities (B, n_osc) from conditional means (B, D)."""
    md = bc.md
    sg = np.sqrt(2.0 * sys.gamma)
    proj = np.einsum("lkm,bk->blm", md.kappa, means)  # (B, D, M)
    vp = sg * np.cos(md.omega * t) * proj
    vm = sg * np.sin(md.omega * t) * proj
    b = means.shape[0]
    return np.concatenate([vp.reshape(b, -1), vm.reshape(b, -1)], axis=1)


def _conditional_means(sys: CollapseSystem, raw: np.ndarray) -> np.ndarray:
    n2 = np.einsum("ba,ba->b", raw.conj(), raw).real
    if np.any(~(n2 > 0)):
        raise DegenerateState("conditional state vanishes (wave-function node)")
    return np.einsum("ba,kac,bc->bk", raw.conj(), sys.a_stack, raw).real / n2[:, None]


def guiding_velocity(state: JointState, x, sys: CollapseSystem, t: float | None = None) -> np.ndarray:
    """Velocities of every bath quadrature, flat order (+ pairs then - pairs)."""
    t = state.t if t is None else t
    xs = np.atleast_2d(_flat_positions(x, state.bath))
    means = _conditional_means(sys, conditional_states(state, xs))
    v = _velocity_from_means(state.bath, sys, means, t)
    return v[0] if np.ndim(_flat_positions(x, state.bath)) == 1 else v


def guiding_velocity_generic(state: JointState, x, sys: CollapseSystem, t: float | None = None) -> np.ndarray:
    """Velocities from the general current formula ``Re<Psi|P_x V|Psi> / <Psi|P_x|Psi>``
    with ``V = -i[X, H]``, evaluated with two extra Fock levels so the
    truncated commutator is exact on the stored state."""
    t = state.t if t is None else t
    bc = state.bath
    n, pad = bc.n_max, bc.n_max + 2
    d = state.dim_sys
    big = np.zeros([d] + [pad] * bc.oscillators, dtype=complex)
    big[(slice(None),) + (slice(0, n),) * bc.oscillators] = state.tensor
    psi = big.reshape(-1)
    h = _Generator(bc, sys, n_levels=pad)(t)
    xs = _flat_positions(x, bc)
    r = hermite_functions(pad, xs)[None]  # (1, n_osc, pad)
    cond = _contract(big, r)[0]
    dens = np.vdot(cond, cond).real
    if dens == 0.0:
        raise DegenerateState("conditional state vanishes (wave-function node)")
    xm = position_matrix(pad)
    out = np.empty(bc.oscillators)
    for o in range(bc.oscillators):
        xo = _embed_bath(d, bc, o, np.eye(d), xm, pad)
        vpsi = -1j * (xo @ (h @ psi) - h @ (xo @ psi))
        vc = _contract(vpsi.reshape(big.shape), r)[0]
        out[o] = np.vdot(cond, vc).real / dens
    return out


@dataclass(frozen=True, eq=False)
class BohmTrajectory:
    """Guided bath positions with the conditional system states.

    ``xplus``/``xminus`` have shape (N+1, D, M); ``states`` are the
    normalised conditional states (Schrödinger picture for the system),
    ``raw_norms2`` their squared norms before normalisation.
    """

    grid: Grid
    bath: BathConfig
    xplus: np.ndarray
    xminus: np.ndarray
    states: np.ndarray
    raw_norms2: np.ndarray
    expect: np.ndarray
    top_population: np.ndarray

    def hidden(self, n: int) -> HiddenVariables:
        return HiddenVariables(self.xplus[n], self.xminus[n])

    def noise_snapshot(self, n: int) -> NoiseTrajectory:
        """Noise field ``w(x(t_n), .)`` over the whole grid."""
        return noise_from_hidden(self.hidden(n), self.bath.md, self.grid)

    def to_csv(self, fidelity=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        d, m = self.xplus.shape[1:]
        names = [f"xplus_{l}_{k}" for l in range(d) for k in range(m)]
        names += [f"xminus_{l}_{k}" for l in range(d) for k in range(m)]
        nch = self.expect.shape[1]
        wr.writerow(["t"] + names + [f"<A_{k}>" for k in range(nch)] + ["fidelity_vs_collapse"])
        for n, t in enumerate(self.grid.times):
            row = [repr(float(t))] + [repr(float(v)) for v in self.xplus[n].ravel()]
            row += [repr(float(v)) for v in self.xminus[n].ravel()]
            row += [repr(float(v)) for v in self.expect[n]]
            row.append("" if fidelity is None else repr(float(fidelity[n])))
            wr.writerow(row)
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class BohmEnsemble:
    """Many guided trajectories sharing one joint state.

    ``positions`` (B, N_rec+1, n_osc), ``states`` (B, N_rec+1, d) normalised
    conditional states, ``expect`` (B, N_rec+1, D), ``joint`` the final joint
    state and ``top_population`` per recorded time.
    """

    grid: Grid
    bath: BathConfig
    positions: np.ndarray
    states: np.ndarray
    raw_norms2: np.ndarray
    expect: np.ndarray
    top_population: np.ndarray
    joint: JointState
    reduced: np.ndarray

    def trajectory(self, b: int) -> BohmTrajectory:
        xp, xm = self.bath.split(self.positions[b])
        return BohmTrajectory(self.grid, self.bath, xp, xm, self.states[b], self.raw_norms2[b],
                              self.expect[b], self.top_population)


def integrate_bohm_ensemble(sys: CollapseSystem, bc: BathConfig, psi0, x0s, grid: Grid,
                            record_every: int = 1, warn: bool = True) -> BohmEnsemble:
    """Lockstep integration of the joint state and ``B`` guided position sets.

    Each step: velocity at (t_n, x_n); half-step joint state by
    ``exp(-i dt/2 H(t_n + dt/4))``; velocity at the half step from
    ``x_n + dt/2 v_n``; positions advanced with the half-step velocity;
    joint state advanced by ``exp(-i dt H(t_n + dt/2))``.
    """
    xs = np.atleast_2d(np.asarray([_flat_positions(x, bc) for x in x0s], dtype=float))
    every = int(record_every)
    if every < 1 or grid.steps % every:
        raise InvalidArgument("record_every must divide the number of steps")
    rec_grid = Grid(grid.dt * every, grid.steps // every)
    state = initial_joint(psi0, bc)
    gen = _Generator(bc, sys)
    dt = grid.dt
    b = xs.shape[0]
    nrec = rec_grid.steps + 1
    pos = np.empty((b, nrec, bc.oscillators))
    states = np.empty((b, nrec, sys.dim), dtype=complex)
    norms = np.empty((b, nrec))
    expect = np.empty((b, nrec, sys.channels))
    top = np.empty(nrec)
    reduced = np.empty((nrec, sys.dim, sys.dim), dtype=complex)
    warned = False

    def record(r, state, xs):
        raw = conditional_states(state, xs)
        n2 = np.einsum("ba,ba->b", raw.conj(), raw).real
        if np.any(~(n2 > 0)):
            raise DegenerateState(f"conditional state vanished at t={state.t}")
        pos[:, r] = xs
        states[:, r] = raw / np.sqrt(n2)[:, None]
        norms[:, r] = n2
        expect[:, r] = _conditional_means(sys, raw)
        top[r] = state.top_population()
        reduced[r] = trace_out_bath(state).data

    record(0, state, xs)
    for n in range(grid.steps):
        t = grid.times[n]
        v0 = _velocity_from_means(bc, sys, _conditional_means(sys, conditional_states(state, xs)), t)
        xh = xs + 0.5 * dt * v0
        half = JointState(expm_action(-1j * 0.5 * dt * gen(t + 0.25 * dt), state.amplitudes),
                          state.dim_sys, bc, t + 0.5 * dt)
        vh = _velocity_from_means(bc, sys, _conditional_means(sys, conditional_states(half, xh)),
                                  t + 0.5 * dt)
        xs = xs + dt * vh
        state = JointState(expm_action(-1j * dt * gen(t + 0.5 * dt), state.amplitudes),
                           state.dim_sys, bc, grid.times[n + 1])
        if (n + 1) % every == 0:
            record((n + 1) // every, state, xs)
            if warn and not warned and top[(n + 1) // every] > TRUNCATION_THRESHOLD:
                warned = True
                warnings.warn(f"top Fock level population {top[(n + 1) // every]:.2e} at t={state.t:.4g}",
                              TruncationWarning, stacklevel=2)
    return BohmEnsemble(rec_grid, bc, pos, states, norms, expect, top, state, reduced)


def integrate_bohm(sys: CollapseSystem, bc: BathConfig, psi0, x0: HiddenVariables, grid: Grid,
                   warn: bool = True) -> BohmTrajectory:
    """One guided trajectory from hidden variables ``x0``."""
    ens = integrate_bohm_ensemble(sys, bc, psi0, [x0], grid, warn=warn)
    return ens.trajectory(0)


def trace_out_bath(state: JointState) -> MixedState:
    """Reduced system density matrix."""
    m = state.amplitudes.reshape(state.dim_sys, -1)
    return MixedState(m @ m.conj().T, validate=False)


def conditional_projector_average(state: JointState, n_samples: int, seed: int, batch: int = 2000):
    """Monte Carlo estimate of the reduced state as ``E[phi_x phi_x^dag]`` with
    ``x`` drawn from the bath vacuum density; returns ``(mean, stderr)`` where
    ``stderr`` is the per-entry standard error (real and imaginary combined)."""
    bc = state.bath
    rng = rng_stream(seed, 0)
    xs = rng.normal(0.0, np.sqrt(0.5), size=(n_samples, bc.oscillators))
    d = state.dim_sys
    s1 = np.zeros((d, d), dtype=complex)
    s2 = np.zeros((d, d))
    for i in range(0, n_samples, batch):
        raw = conditional_states(state, xs[i:i + batch])
        proj = raw[:, :, None] * raw[:, None, :].conj()
        s1 += proj.sum(axis=0)
        s2 += (np.abs(proj) ** 2).sum(axis=0)
    mean = s1 / n_samples
    var = (s2 / n_samples - np.abs(mean) ** 2) * n_samples / (n_samples - 1)
    return mean, np.sqrt(np.clip(var, 0.0, None) / n_samples)


_MAGIC = b"CLJS"


def dump_joint(state: JointState) -> bytes:
    """Binary snapshot: magic, header length (uint32 LE), JSON header, then
    little-endian float64 pairs (re, im)."""
    header = json.dumps({
        "dims": [state.dim_sys] + state.bath.bath_dims(),
        "time": state.t,
        "endianness": "little",
        "dtype": "float64",
        "layout": "interleaved re/im, row-major, system index slowest",
    }).encode()
    data = np.empty(2 * state.amplitudes.size, dtype="<f8")
    data[0::2] = state.amplitudes.real
    data[1::2] = state.amplitudes.imag
    return _MAGIC + struct.pack("<I", len(header)) + header + data.tobytes()


def load_joint(blob: bytes, bath: BathConfig) -> JointState:
    if blob[:4] != _MAGIC:
        raise InvalidArgument("not a joint-state snapshot")
    (hl,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hl])
    data = np.frombuffer(blob[8 + hl:], dtype="<f8")
    amp = data[0::2] + 1j * data[1::2]
    dims = header["dims"]
    if dims[1:] != bath.bath_dims():
        raise ShapeError("snapshot dimensions do not match the bath configuration")
    return JointState(amp, dims[0], bath, header["time"])
