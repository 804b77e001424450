"""Stationary noise kernels and their finite oscillator-mode factorisation.

A kernel ``D_jk(tau)`` is the covariance ``E[w_j(t + tau) w_k(t)]`` of a
real Gaussian vector noise.  Factorising it as

    D_jk(tau) = sum_{l, m} kappa[l, j, m] * kappa[l, k, m] * cos(omega_m tau)

gives the bath of oscillators that reproduces it.  Continuous spectra are
discretised on a midpoint frequency grid; cosine sums map line by line.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import sici

from .errors import InvalidArgument, NotPositiveSemiDefinite, ShapeError, UseModeListDirectly

__all__ = [
    "CosineSum",
    "ExponentialDecay",
    "WhiteApprox",
    "GridTabulated",
    "ModeDecomposition",
    "spectral_density",
    "factorize",
    "reconstruct",
    "double_integral",
    "lag_table",
    "psd_sqrt",
    "kernel_from_record",
    "kernel_to_record",
]

PSD_CLAMP = 1e-10


def _as_matrix(a, name):
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise ShapeError(f"{name} must be square, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgument(f"{name} has non-finite entries")
    return m


def _check_psd_matrix(m, name, tol=1e-8):
    if np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
        raise NotPositiveSemiDefinite(f"{name} is not symmetric")
    lo = np.linalg.eigvalsh(m).min()
    if lo < -tol * max(1.0, np.abs(m).max()):
        raise NotPositiveSemiDefinite(f"{name} has eigenvalue {lo:.3e}")


def psd_sqrt(m: np.ndarray, clamp: float = PSD_CLAMP) -> np.ndarray:
    """Symmetric square root of a PSD matrix; small negative eigenvalues clamp to 0."""
    m = 0.5 * (m + m.T)
    vals, vecs = np.linalg.eigh(m)
    scale = max(1.0, np.abs(vals).max())
    if vals.min() < -clamp * scale:
        raise NotPositiveSemiDefinite(f"matrix has eigenvalue {vals.min():.3e}")
    vals = np.where(vals < 0.0, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.T


class _Kernel:
    channels: int

    def __call__(self, tau):
        """Evaluate ``D(tau)``; returns shape ``tau.shape + (D, D)``."""
        tau = np.asarray(tau, dtype=float)
        return self._eval(tau)

    def block_covariance(self, times) -> np.ndarray:
        """Covariance of the stacked vector ``(w_0(t_0), w_1(t_0), ..., w_{D-1}(t_N))``."""
        t = np.asarray(times, dtype=float)
        lag = t[:, None] - t[None, :]
        blocks = self(lag)  # (N, N, D, D)
        n, d = t.size, self.channels
        return blocks.transpose(0, 2, 1, 3).reshape(n * d, n * d)

    def check_psd(self, span: float = 10.0, points: int = 64) -> None:
        """Sample the kernel on a time grid and test the block covariance."""
        cov = self.block_covariance(np.linspace(0.0, span, points))
        cov = 0.5 * (cov + cov.T)
        lo = np.linalg.eigvalsh(cov).min()
        if lo < -1e-8 * max(1.0, np.abs(cov).max()):
            raise NotPositiveSemiDefinite(f"sampled block covariance has eigenvalue {lo:.3e}")


@dataclass(frozen=True, eq=False)
class CosineSum(_Kernel):
    """``D(tau) = sum_m G_m cos(omega_m tau)`` with PSD weights ``G_m``."""

    weights: tuple
    omegas: tuple

    def __init__(self, weights, omegas):
        ws = tuple(_as_matrix(g, "cosine-sum weight") for g in weights)
        om = tuple(float(o) for o in np.atleast_1d(omegas))
        if len(ws) != len(om) or not ws:
            raise ShapeError("need one weight matrix per frequency")
        if len({w.shape for w in ws}) != 1:
            raise ShapeError("cosine-sum weights have inconsistent shapes")
        if any(o < 0 for o in om):
            raise InvalidArgument("cosine-sum frequencies must be >= 0")
        for w in ws:
            _check_psd_matrix(w, "cosine-sum weight")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "omegas", om)

    @property
    def channels(self):
        return self.weights[0].shape[0]

    def _eval(self, tau):
        out = np.zeros(tau.shape + (self.channels, self.channels))
        for g, om in zip(self.weights, self.omegas):
            out += np.cos(om * tau)[..., None, None] * g
        return out


@dataclass(frozen=True, eq=False)
class ExponentialDecay(_Kernel):
    """``D(tau) = a exp(-|tau| / tau_c)``."""

    amplitude: np.ndarray
    tau_c: float

    def __init__(self, amplitude, tau_c):
        a = _as_matrix(amplitude, "amplitude")
        _check_psd_matrix(a, "amplitude")
        if not tau_c > 0:
            raise InvalidArgument("tau_c must be > 0")
        object.__setattr__(self, "amplitude", a)
        object.__setattr__(self, "tau_c", float(tau_c))

    @property
    def channels(self):
        return self.amplitude.shape[0]

    def _eval(self, tau):
        return np.exp(-np.abs(tau) / self.tau_c)[..., None, None] * self.amplitude


@dataclass(frozen=True, eq=False)
class WhiteApprox(_Kernel):
    """Band-limited white noise: flat spectrum ``d / pi`` below ``cutoff``.

    ``D(tau) = d sin(cutoff tau) / (pi tau)``, which tends to ``d delta(tau)``.
    On a grid with ``dt = pi / cutoff`` the sampled kernel is exactly
    ``d delta_nm / dt``.
    """

    diffusion: np.ndarray
    cutoff: float

    def __init__(self, diffusion, cutoff):
        d = _as_matrix(diffusion, "diffusion")
        _check_psd_matrix(d, "diffusion")
        if not cutoff > 0:
            raise InvalidArgument("cutoff must be > 0")
        object.__setattr__(self, "diffusion", d)
        object.__setattr__(self, "cutoff", float(cutoff))

    @property
    def channels(self):
        return self.diffusion.shape[0]

    def _eval(self, tau):
        # np.sinc(x) = sin(pi x)/(pi x)
        s = self.cutoff / np.pi * np.sinc(self.cutoff * tau / np.pi)
        return s[..., None, None] * self.diffusion


@dataclass(frozen=True, eq=False)
class GridTabulated(_Kernel):
    """Kernel tabulated at non-negative lags, linearly interpolated.

    Negative lags use ``D(-tau) = D(tau)^T``; zero beyond the last lag.
    ``taper`` selects the lag window of the cosine transform: ``"bartlett"``
    (triangular, keeps the estimate non-negative) or ``"none"``.
    """

    taus: np.ndarray
    samples: np.ndarray
    taper: str = "bartlett"

    def __init__(self, taus, samples, taper="bartlett"):
        t = np.asarray(taus, dtype=float)
        s = np.asarray(samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None, None]
        if t.ndim != 1 or t.size < 2 or s.shape[0] != t.size or s.shape[1] != s.shape[2]:
            raise ShapeError("tabulated kernel needs samples of shape (n_tau, D, D)")
        if t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise InvalidArgument("tau grid must start at 0 and increase")
        if taper not in ("bartlett", "none"):
            raise InvalidArgument(f"unknown taper {taper!r}")
        object.__setattr__(self, "taus", t)
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "taper", taper)

    @property
    def channels(self):
        return self.samples.shape[1]

    def _eval(self, tau):
        flat = tau.ravel()
        a = np.abs(flat)
        d = self.channels
        out = np.empty((flat.size, d, d))
        for j in range(d):
            for k in range(d):
                out[:, j, k] = np.interp(a, self.taus, self.samples[:, j, k], right=0.0)
        neg = flat < 0
        out[neg] = out[neg].transpose(0, 2, 1)
        return out.reshape(tau.shape + (d, d))


Kernel = Union[CosineSum, ExponentialDecay, WhiteApprox, GridTabulated]


@dataclass(frozen=True, eq=False)
class ModeDecomposition:
    """Discrete oscillator modes.  ``kappa[l, k, m]`` couples channel ``k``
    to oscillator pair ``(l, m)`` at frequency ``omega[m]``."""

    omega: np.ndarray
    kappa: np.ndarray
    d_omega: float | None = None

    def __post_init__(self):
        om = np.asarray(self.omega, dtype=float).ravel()
        ka = np.asarray(self.kappa)
        if np.iscomplexobj(ka):
            raise InvalidArgument("couplings must be real")
        ka = ka.astype(float)
        if ka.ndim != 3 or ka.shape[0] != ka.shape[1] or ka.shape[2] != om.size:
            raise ShapeError(f"kappa must have shape (D, D, M={om.size}), got {ka.shape}")
        if np.any(om < 0) or not np.all(np.isfinite(om)) or not np.all(np.isfinite(ka)):
            raise InvalidArgument("frequencies must be finite and >= 0")
        om.setflags(write=False)
        ka.setflags(write=False)
        object.__setattr__(self, "omega", om)
        object.__setattr__(self, "kappa", ka)

    @property
    def channels(self) -> int:
        return self.kappa.shape[1]

    @property
    def modes(self) -> int:
        return self.omega.size

    @property
    def weights(self) -> np.ndarray:
        """Per-mode weight matrices ``W_m[j, k] = sum_l kappa[l,j,m] kappa[l,k,m]``, shape (M, D, D)."""
        return np.einsum("ljm,lkm->mjk", self.kappa, self.kappa)

    def to_json(self) -> str:
        rec = {"omega": self.omega.tolist(), "kappa": self.kappa.tolist()}
        if self.d_omega is not None:
            rec["d_omega"] = self.d_omega
        return json.dumps(rec)

    @classmethod
    def from_json(cls, text: str) -> "ModeDecomposition":
        rec = json.loads(text)
        return cls(np.array(rec["omega"], dtype=float), np.array(rec["kappa"], dtype=float),
                   rec.get("d_omega"))


def spectral_density(kernel: Kernel, omega) -> np.ndarray:
    """One-sided density ``S`` with ``D(tau) = int_0^inf S(w) cos(w tau) dw``.

    Returns shape ``omega.shape + (D, D)``.
    """
    if isinstance(kernel, CosineSum):
        raise UseModeListDirectly("cosine sums are discrete lines; factorize them directly")
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise InvalidArgument("spectral density is defined for omega >= 0")
    if isinstance(kernel, ExponentialDecay):
        tc = kernel.tau_c
        s = (2.0 / np.pi) * tc / (1.0 + (w * tc) ** 2)
        out = s[..., None, None] * kernel.amplitude
    elif isinstance(kernel, WhiteApprox):
        s = np.where(w < kernel.cutoff, 1.0, np.where(w == kernel.cutoff, 0.5, 0.0)) / np.pi
        out = s[..., None, None] * kernel.diffusion
    elif isinstance(kernel, GridTabulated):
        taus = kernel.taus
        samples = kernel.samples
        if kernel.taper == "bartlett":
            samples = samples * (1.0 - taus / taus[-1])[:, None, None]
        sym = 0.5 * (samples + samples.transpose(0, 2, 1))
        cos = np.cos(np.multiply.outer(w, taus))  # (..., n_tau)
        out = (2.0 / np.pi) * np.trapezoid(cos[..., None, None] * sym, taus, axis=-3)
    else:
        raise InvalidArgument(f"unsupported kernel type {type(kernel).__name__}")
    flat = out.reshape(-1, out.shape[-2], out.shape[-1])
    for s_mat in flat:
        vals = np.linalg.eigvalsh(0.5 * (s_mat + s_mat.T))
        if vals.size and vals.min() < -PSD_CLAMP * max(1.0, np.abs(vals).max()):
            raise NotPositiveSemiDefinite(f"spectral density eigenvalue {vals.min():.3e}")
    return out


def factorize(kernel: Kernel, modes: int = 64, omega_max: float = 16.0) -> ModeDecomposition:
    """Discretise a kernel into oscillator modes (midpoint frequency rule).

    Cosine sums map exactly, one mode per line, ignoring ``modes``/``omega_max``.
    """
    if isinstance(kernel, CosineSum):
        kappa = np.stack([psd_sqrt(g) for g in kernel.weights], axis=-1)
        return ModeDecomposition(np.array(kernel.omegas), kappa, None)
    if modes is None or int(modes) < 1:
        raise InvalidArgument("mode count must be >= 1")
    if not omega_max > 0:
        raise InvalidArgument("omega_max must be > 0")
    modes = int(modes)
    dw = omega_max / modes
    omega = (np.arange(modes) + 0.5) * dw
    dens = spectral_density(kernel, omega)
    kappa = np.stack([psd_sqrt(s) * np.sqrt(dw) for s in dens], axis=-1)
    return ModeDecomposition(omega, kappa, dw)


def reconstruct(md: ModeDecomposition, tau) -> np.ndarray:
    """Kernel realised by the modes; shape ``tau.shape + (D, D)``."""
    tau = np.asarray(tau, dtype=float)
    cos = np.cos(np.multiply.outer(tau, md.omega))
    return np.einsum("...m,mjk->...jk", cos, md.weights)


def lag_table(md: ModeDecomposition, dt: float, n: int) -> np.ndarray:
    """``reconstruct(md, i * dt)`` for ``i = 0..n``; shape (n+1, D, D)."""
    return reconstruct(md, np.arange(n + 1) * dt)


def double_integral(source, t: float) -> np.ndarray:
    """``F_jk(t) = int_0^t int_0^t D_jk(u - v) du dv`` (closed forms where available)."""
    t = float(t)
    if t < 0:
        raise InvalidArgument("t must be >= 0")
    if isinstance(source, ModeDecomposition):
        om = source.omega
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(om > 0, 2.0 * (1.0 - np.cos(om * t)) / om**2, t * t)
        return np.einsum("m,mjk->jk", f, source.weights)
    if isinstance(source, CosineSum):
        out = np.zeros((source.channels, source.channels))
        for g, om in zip(source.weights, source.omegas):
            out += g * (2.0 * (1.0 - np.cos(om * t)) / om**2 if om > 0 else t * t)
        return out
    if isinstance(source, ExponentialDecay):
        tc = source.tau_c
        return source.amplitude * 2.0 * (tc * t - tc * tc * (1.0 - np.exp(-t / tc)))
    if isinstance(source, WhiteApprox):
        om = source.cutoff
        si, _ = sici(om * t)
        val = (2.0 / np.pi) * (t * si - (1.0 - np.cos(om * t)) / om)
        return source.diffusion * val
    if isinstance(source, GridTabulated):
        s = np.linspace(0.0, t, 4001)
        d = source(s)
        integrand = (t - s)[:, None, None] * (d + d.transpose(0, 2, 1))
        return np.trapezoid(integrand, s, axis=0)
    raise InvalidArgument(f"unsupported kernel source {type(source).__name__}")


def kernel_to_record(kernel: Kernel) -> dict:
    """Tagged JSON-ready record of a kernel definition."""
    if isinstance(kernel, CosineSum):
        return {"type": "cosine_sum", "weights": [w.tolist() for w in kernel.weights],
                "omegas": list(kernel.omegas)}
    if isinstance(kernel, ExponentialDecay):
        return {"type": "exponential_decay", "amplitude": kernel.amplitude.tolist(),
                "tau_c": kernel.tau_c}
    if isinstance(kernel, WhiteApprox):
        return {"type": "white_approx", "diffusion": kernel.diffusion.tolist(),
                "cutoff": kernel.cutoff}
    if isinstance(kernel, GridTabulated):
        return {"type": "grid_tabulated", "taus": kernel.taus.tolist(),
                "samples": kernel.samples.tolist(), "taper": kernel.taper}
    raise InvalidArgument(f"unsupported kernel type {type(kernel).__name__}")


def kernel_from_record(rec: dict) -> Kernel:
    """Inverse of :func:`kernel_to_record`.  Scalars are promoted to 1x1 matrices."""
    kind = rec.get("type")
    if kind == "cosine_sum":
        return CosineSum(rec["weights"], rec["omegas"])
    if kind == "exponential_decay":
        return ExponentialDecay(rec.get("amplitude", 1.0), rec["tau_c"])
    if kind == "white_approx":
        return WhiteApprox(rec.get("diffusion", 1.0), rec["cutoff"])
    if kind == "grid_tabulated":
        return GridTabulated(rec["taus"], rec["samples"], rec.get("taper", "bartlett"))
    raise InvalidArgument(f"unknown kernel type {kind!r}")
