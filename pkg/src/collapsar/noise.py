"""Gaussian noise fields and the bath hidden variables that generate them.

Two independent samplers are provided.  The mode sampler draws Born-rule
quadratures ``x+``/``x-`` for every oscillator pair and maps them linearly to
the noise; the dense sampler factorises the block covariance on the grid.
They must agree in law, which the tests check.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import GridMismatch, InvalidArgument, NotPositiveSemiDefinite, ShapeError
from .kernels import ModeDecomposition, reconstruct

__all__ = [
    "Grid",
    "HiddenVariables",
    "NoiseTrajectory",
    "CovarianceEstimate",
    "rng_stream",
    "sample_hidden",
    "noise_from_hidden",
    "noise_values",
    "sample_noise_dense",
    "dense_noise_factor",
    "sample_noise_dense_batch",
    "sample_noise_modes_batch",
    "estimate_covariance",
]


@dataclass(frozen=True)
class Grid:
    """Uniform time grid ``t_n = n dt`` for ``n = 0..steps``."""

    dt: float
    steps: int

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidArgument("dt must be > 0")
        if int(self.steps) < 0:
            raise InvalidArgument("steps must be >= 0")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def span(cls, total: float, dt: float) -> "Grid":
        steps = int(round(total / dt))
        if abs(steps * dt - total) > 1e-9 * max(1.0, total):
            raise InvalidArgument(f"T={total} is not a multiple of dt={dt}")
        return cls(dt, steps)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def total(self) -> float:
        return self.steps * self.dt

    def index(self, t: float) -> int:
        """Grid index of time ``t`` (must lie on the grid)."""
        n = int(round(t / self.dt))
        if n < 0 or n > self.steps or abs(n * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidArgument(f"time {t} is not on the grid")
        return n


def rng_stream(seed: int, index: int = 0) -> np.random.Generator:
    """Counter-based stream for trajectory ``index`` under a master seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class HiddenVariables:
    """Quadratures of the bath oscillator pairs, arrays of shape (D, M) indexed [l, m]."""

    xplus: np.ndarray
    xminus: np.ndarray

    def __post_init__(self):
        xp = np.array(self.xplus, dtype=float)
        xm = np.array(self.xminus, dtype=float)
        if xp.shape != xm.shape or xp.ndim != 2:
            raise ShapeError("xplus and xminus must be matching (D, M) arrays")
        if not (np.all(np.isfinite(xp)) and np.all(np.isfinite(xm))):
            raise InvalidArgument("hidden variables must be finite")
        object.__setattr__(self, "xplus", xp)
        object.__setattr__(self, "xminus", xm)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.xplus.ravel(), self.xminus.ravel()])

    def to_json(self) -> str:
        return json.dumps({"xplus": self.xplus.tolist(), "xminus": self.xminus.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "HiddenVariables":
        rec = json.loads(text)
        return cls(np.array(rec["xplus"]), np.array(rec["xminus"]))

    def __add__(self, other):
        return HiddenVariables(self.xplus + other.xplus, self.xminus + other.xminus)

    def __mul__(self, c):
        return HiddenVariables(c * self.xplus, c * self.xminus)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class NoiseTrajectory:
    """Noise samples ``values[k, n] = w_k(t_n)``."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2 or v.shape[1] != self.grid.steps + 1:
            raise ShapeError(f"noise values must have shape (D, {self.grid.steps + 1}), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("noise values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    def with_values(self, values) -> "NoiseTrajectory":
        return NoiseTrajectory(self.grid, values)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"w_{k}" for k in range(self.channels)])
        for n, t in enumerate(self.grid.times):
            wr.writerow([repr(float(t))] + [repr(float(x)) for x in self.values[:, n]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "NoiseTrajectory":
        rows = list(csv.reader(io.StringIO(text)))
        data = np.array([[float(x) for x in r] for r in rows[1:]])
        t = data[:, 0]
        dt = t[1] - t[0] if t.size > 1 else 1.0
        return cls(Grid(dt, t.size - 1), data[:, 1:].T)


def sample_hidden(md: ModeDecomposition, seed: int, index: int = 0) -> HiddenVariables:
    """Born-rule draw in the bath vacuum: every quadrature is N(0, 1/2)."""
    rng = rng_stream(seed, index)
    shape = (md.channels, md.modes)
    scale = np.sqrt(0.5)
    xp = rng.normal(0.0, scale, size=shape)
    xm = rng.normal(0.0, scale, size=shape)
    return HiddenVariables(xp, xm)


def noise_values(xplus, xminus, md: ModeDecomposition, times) -> np.ndarray:
    """Vectorised ``w_k(x, t)``; ``xplus``/``xminus`` may carry leading batch axes.

    Returns shape ``batch + (D, len(times))``.
    """
    xp = np.asarray(xplus, dtype=float)
    xm = np.asarray(xminus, dtype=float)
    if xp.shape[-2:] != (md.channels, md.modes) or xm.shape != xp.shape:
        raise ShapeError(f"hidden variables must end with shape {(md.channels, md.modes)}")
    t = np.asarray(times, dtype=float)
    ph = np.multiply.outer(md.omega, t)  # (M, N)
    # a[..., k, m] = sum_l kappa[l, k, m] x[..., l, m]
    ap = np.einsum("lkm,...lm->...km", md.kappa, xp)
    am = np.einsum("lkm,...lm->...km", md.kappa, xm)
    return np.sqrt(2.0) * (ap @ np.cos(ph) + am @ np.sin(ph))


def noise_from_hidden(x: HiddenVariables, md: ModeDecomposition, grid: Grid) -> NoiseTrajectory:
    """Noise field generated by fixed hidden variables on a grid."""
    return NoiseTrajectory(grid, noise_values(x.xplus, x.xminus, md, grid.times))


def sample_noise_modes_batch(md: ModeDecomposition, grid: Grid, seed: int, count: int,
                             start: int = 0) -> np.ndarray:
    """``count`` noises from Born-sampled hidden variables, shape (count, D, N+1).

    Trajectory ``i`` uses the hidden variables of stream ``start + i``.
    """
    xs = [sample_hidden(md, seed, start + i) for i in range(count)]
    xp = np.stack([x.xplus for x in xs]) if xs else np.empty((0, md.channels, md.modes))
    xm = np.stack([x.xminus for x in xs]) if xs else np.empty((0, md.channels, md.modes))
    return noise_values(xp, xm, md, grid.times)


def _covariance_source(kernel, times):
    if isinstance(kernel, ModeDecomposition):
        lag = times[:, None] - times[None, :]
        blocks = reconstruct(kernel, lag)
        n, d = times.size, kernel.channels
        return blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d), d
    return kernel.block_covariance(times), kernel.channels


def dense_noise_factor(kernel, grid: Grid, clamp: float = 1e-8) -> np.ndarray:
    """Matrix ``L`` with ``L L^T`` equal to the block covariance over the grid.

    Rows are ordered ``(n, k)``; eigenvalues above ``-clamp * scale`` are
    clamped to zero.
    """
    cov, _ = _covariance_source(kernel, grid.times)
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    scale = max(1.0, np.abs(vals).max())
    if vals.min() < -clamp * scale:
        raise NotPositiveSemiDefinite(f"block covariance has eigenvalue {vals.min():.3e}")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_noise_dense_batch(kernel, grid: Grid, seed: int, count: int,
                             factor: np.ndarray | None = None, start: int = 0) -> np.ndarray:
    """``count`` dense-sampled trajectories, shape (count, D, N+1).

    Trajectory ``i`` uses stream ``start + i`` so batches compose reproducibly.
    """
    if factor is None:
        factor = dense_noise_factor(kernel, grid)
    d = kernel.channels
    n = grid.steps + 1
    out = np.empty((count, d, n))
    for i in range(count):
        z = rng_stream(seed, start + i).standard_normal(factor.shape[1])
        out[i] = (factor @ z).reshape(n, d).T
    return out


def sample_noise_dense(kernel, grid: Grid, seed: int, index: int = 0) -> NoiseTrajectory:
    """One trajectory drawn from the exact multivariate Gaussian on the grid."""
    return NoiseTrajectory(grid, sample_noise_dense_batch(kernel, grid, seed, 1, start=index)[0])


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Empirical second moments about the known zero mean.

    ``cov[j, a, k, b]`` estimates ``E[w_j(t_a) w_k(t_b)]`` and ``stderr`` holds
    the per-entry standard error.  ``mean`` is reported for diagnostics.
    """

    mean: np.ndarray
    cov: np.ndarray
    stderr: np.ndarray
    count: int

    def zscores(self, expected: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = (self.cov - expected) / self.stderr
        return np.where(self.stderr > 0, z, np.where(self.cov == expected, 0.0, np.inf))


def estimate_covariance(trajs) -> CovarianceEstimate:
    """Estimate the covariance of zero-mean noise from sample trajectories.

    Accepts a list of :class:`NoiseTrajectory` on a common grid or an array
    of shape (n, D, N+1).
    """
    if isinstance(trajs, np.ndarray):
        data = np.asarray(trajs, dtype=float)
    else:
        trajs = list(trajs)
        if not trajs:
            raise InvalidArgument("need at least 2 trajectories")
        g = trajs[0].grid
        for tr in trajs[1:]:
            if tr.grid != g or tr.values.shape != trajs[0].values.shape:
                raise GridMismatch("trajectories are not on a common grid")
        data = np.stack([tr.values for tr in trajs])
    if data.ndim != 3 or data.shape[0] < 2:
        raise InvalidArgument("need at least 2 trajectories of shape (D, N+1)")
    n = data.shape[0]
    flat = data.reshape(n, -1)
    cov = flat.T @ flat / n
    # per-entry variance of the products: E[p^2] - E[p]^2, unbiased
    sq = (flat**2).T @ flat**2 / n
    var = (sq - cov**2) * n / (n - 1)
    se = np.sqrt(np.clip(var, 0.0, None) / n)
    shape = data.shape[1:] + data.shape[1:]
    return CovarianceEstimate(flat.mean(axis=0).reshape(data.shape[1:]),
                              cov.reshape(shape), se.reshape(shape), n)
