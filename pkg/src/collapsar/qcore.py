"""Dense complex linear algebra: operators, states, embeddings, traces.

Everything here is an immutable value once built.  Arrays are stored
read-only so the objects can be shared freely between trajectory workers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import DegenerateState, InvalidOperator, ShapeError

__all__ = [
    "DIM_CAP",
    "Operator",
    "PureState",
    "MixedState",
    "matrix_exponential",
    "expm_action",
    "tensor_embed",
    "kron",
    "partial_trace",
    "expectation",
    "fidelity",
    "projector",
    "basis",
    "SIGMA_X",
    "SIGMA_Y",
    "SIGMA_Z",
    "IDENTITY2",
]

#: Largest dense dimension accepted by joint-space builders.
DIM_CAP = 1024

HERMITIAN_REJECT = 1e-8


def _readonly(a):
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Operator:
    """Square complex matrix, optionally flagged Hermitian.

    When ``hermitian`` is set the matrix is symmetrised as ``(O + O^dag)/2``;
    inputs whose relative asymmetry exceeds 1e-8 are rejected.
    """

    data: np.ndarray
    hermitian: bool = False

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ShapeError(f"operator must be a non-empty square matrix, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidOperator("operator has non-finite entries")
        if self.hermitian:
            scale = max(np.abs(a).max(), 1.0)
            asym = np.abs(a - a.conj().T).max()
            if asym > HERMITIAN_REJECT * scale:
                raise InvalidOperator(f"operator flagged Hermitian but asymmetry is {asym:.3e}")
            a = 0.5 * (a + a.conj().T)
        object.__setattr__(self, "data", _readonly(a))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def dag(self) -> "Operator":
        return Operator(self.data.conj().T, hermitian=self.hermitian)

    def __matmul__(self, other):
        if isinstance(other, Operator):
            return Operator(self.data @ other.data)
        if isinstance(other, PureState):
            return PureState(self.data @ other.amplitudes)
        return self.data @ np.asarray(other)


@dataclass(frozen=True, eq=False)
class PureState:
    """State vector.  Not necessarily normalised; the linear SSE needs that."""

    amplitudes: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.amplitudes, dtype=complex)
        if a.ndim != 1 or a.size == 0:
            raise ShapeError(f"state must be a non-empty vector, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidOperator("state has non-finite amplitudes")
        object.__setattr__(self, "amplitudes", _readonly(a))

    @property
    def dim(self) -> int:
        return self.amplitudes.size

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "PureState":
        n = self.norm
        if n == 0.0:
            raise DegenerateState("cannot normalise a zero vector")
        return PureState(self.amplitudes / n)

    def projector(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def __array__(self, dtype=None, copy=None):
        return self.amplitudes if dtype is None else self.amplitudes.astype(dtype)


@dataclass(frozen=True, eq=False)
class MixedState:
    """Density matrix.  Checked for Hermiticity, trace and positivity."""

    data: np.ndarray
    trace: float | None = None
    validate: bool = field(default=True, repr=False)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=complex)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] == 0:
            raise ShapeError(f"density matrix must be square, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidOperator("density matrix has non-finite entries")
        if self.validate:
            if np.abs(a - a.conj().T).max() > 1e-10:
                raise InvalidOperator("density matrix is not Hermitian within 1e-10")
            tr = np.trace(a).real
            if self.trace is not None and abs(tr - self.trace) > 1e-8:
                raise InvalidOperator(f"trace {tr} differs from declared {self.trace}")
            if np.linalg.eigvalsh(0.5 * (a + a.conj().T)).min() < -1e-8:
                raise InvalidOperator("density matrix has a negative eigenvalue below -1e-8")
        object.__setattr__(self, "data", _readonly(a))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_pure(cls, state) -> "MixedState":
        v = np.asarray(state, dtype=complex)
        return cls(np.outer(v, v.conj()))

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)


def _mat(o):
    return o.data if isinstance(o, (Operator, MixedState)) else np.asarray(o, dtype=complex)


def matrix_exponential(op, scale: complex = 1.0) -> Operator:
    """Return ``exp(scale * op)`` (Pade scaling-and-squaring)."""
    a = _mat(op)
    if not np.all(np.isfinite(a)) or not np.isfinite(scale):
        raise InvalidOperator("non-finite input to matrix_exponential")
    return Operator(scipy.linalg.expm(scale * a))


def expm_action(g: np.ndarray, v: np.ndarray, tol: float = 1e-16) -> np.ndarray:
    """Apply ``exp(g)`` to ``v`` by a sub-stepped Taylor series.

    ``v`` may carry trailing batch columns.  The number of sub-steps keeps each
    Taylor argument below 1/2 in the 1-norm, so a handful of terms suffice.
    """
    nrm = np.abs(g).sum(axis=0).max()
    s = max(1, int(np.ceil(nrm / 0.5)))
    out = np.array(v, dtype=complex, copy=True)
    for _ in range(s):
        term = out
        acc = out.copy()
        for k in range(1, 40):
            term = (g @ term) / (s * k)
            acc += term
            if np.abs(term).max() <= tol * np.abs(acc).max():
                break
        out = acc
    return out


def kron(*ops) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for o in ops:
        out = np.kron(out, _mat(o))
    return out


def tensor_embed(op, slot: int, dims: Sequence[int]) -> Operator:
    """Embed ``op`` on subsystem ``slot`` of a tensor product with ``dims``."""
    a = _mat(op)
    dims = [int(d) for d in dims]
    if not 0 <= slot < len(dims):
        raise ShapeError(f"slot {slot} out of range for {len(dims)} subsystems")
    if a.shape[0] != dims[slot]:
        raise ShapeError(f"operator dim {a.shape[0]} does not match subsystem dim {dims[slot]}")
    left = int(np.prod(dims[:slot], dtype=int))
    right = int(np.prod(dims[slot + 1:], dtype=int))
    return Operator(np.kron(np.kron(np.eye(left), a), np.eye(right)))


def partial_trace(rho, keep, dims: Sequence[int]) -> MixedState:
    """Trace out every subsystem not listed in ``keep``."""
    a = _mat(rho)
    dims = [int(d) for d in dims]
    n = len(dims)
    if int(np.prod(dims)) != a.shape[0]:
        raise ShapeError(f"dims {dims} inconsistent with matrix of size {a.shape[0]}")
    keep = sorted({int(k) for k in np.atleast_1d(keep)})
    if any(k < 0 or k >= n for k in keep):
        raise ShapeError(f"keep indices {keep} out of range")
    t = a.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    row = list(letters[:n])
    col = [letters[n + i] if i in keep else row[i] for i in range(n)]
    out = "".join(row[i] for i in keep) + "".join(col[i] for i in keep)
    r = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    dk = int(np.prod([dims[i] for i in keep], dtype=int))
    return MixedState(r.reshape(dk, dk), validate=False)


def expectation(state, op) -> float:
    """``<s|O|s> / <s|s>`` for a possibly unnormalised state."""
    v = np.asarray(state, dtype=complex)
    nrm2 = np.vdot(v, v).real
    if nrm2 == 0.0:
        raise DegenerateState("expectation value of a zero-norm state")
    return float(np.vdot(v, _mat(op) @ v).real / nrm2)


def fidelity(a, b) -> float:
    """Overlap fidelity ``|<a|b>|^2 / (|a|^2 |b|^2)``."""
    u = np.asarray(a, dtype=complex)
    v = np.asarray(b, dtype=complex)
    na = np.vdot(u, u).real
    nb = np.vdot(v, v).real
    if na == 0.0 or nb == 0.0:
        raise DegenerateState("fidelity with a zero-norm state")
    f = abs(np.vdot(u, v)) ** 2 / (na * nb)
    return float(min(max(f, 0.0), 1.0))


def projector(state) -> np.ndarray:
    v = np.asarray(state, dtype=complex)
    return np.outer(v, v.conj())


def basis(dim: int, index: int) -> PureState:
    v = np.zeros(dim, dtype=complex)
    v[index] = 1.0
    return PureState(v)


SIGMA_X = Operator(np.array([[0, 1], [1, 0]]), hermitian=True)
SIGMA_Y = Operator(np.array([[0, -1j], [1j, 0]]), hermitian=True)
SIGMA_Z = Operator(np.array([[1, 0], [0, -1]]), hermitian=True)
IDENTITY2 = Operator(np.eye(2), hermitian=True)
