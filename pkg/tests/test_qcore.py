import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from collapsar.errors import DegenerateState, InvalidOperator, ShapeError
from collapsar.qcore import (MixedState, Operator, PureState, SIGMA_X, SIGMA_Y, SIGMA_Z, basis,
                             expectation, expm_action, fidelity, kron, matrix_exponential,
                             partial_trace, tensor_embed)


def random_hermitian(rng, d):
    a = rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))
    return 0.5 * (a + a.conj().T)


def test_pauli_algebra():
    assert np.allclose(SIGMA_X.data @ SIGMA_Y.data, 1j * SIGMA_Z.data)
    for s in (SIGMA_X, SIGMA_Y, SIGMA_Z):
        assert np.allclose(s.data @ s.data, np.eye(2))


def test_hermitian_rejects_asymmetric():
    with pytest.raises(InvalidOperator):
        Operator(np.array([[0, 1], [0, 0]]), hermitian=True)


def test_operator_rejects_nan():
    with pytest.raises(InvalidOperator):
        Operator(np.array([[np.nan, 0], [0, 1]]))


def test_matrix_exponential_pauli():
    # exp(-i theta sigma_x) = cos(theta) I - i sin(theta) sigma_x
    th = 0.37
    u = matrix_exponential(SIGMA_X, -1j * th).data
    assert np.allclose(u, np.cos(th) * np.eye(2) - 1j * np.sin(th) * SIGMA_X.data, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.floats(0.01, 5.0), st.integers(0, 2**31))
def test_expm_action_matches_dense(d, scale, seed):
    rng = np.random.default_rng(seed)
    g = -1j * scale * random_hermitian(rng, d)
    v = rng.normal(size=d) + 1j * rng.normal(size=d)
    assert np.allclose(expm_action(g, v), scipy.linalg.expm(g) @ v, atol=1e-12 * max(1, np.abs(v).max()))


def test_tensor_embed_and_partial_trace():
    rng = np.random.default_rng(1)
    a = random_hermitian(rng, 2)
    b = random_hermitian(rng, 3)
    ra = np.eye(2) / 2 + 0.1 * SIGMA_Z.data
    rb = np.diag([0.5, 0.3, 0.2]).astype(complex)
    joint = np.kron(ra, rb)
    assert np.allclose(partial_trace(joint, [0], [2, 3]).data, ra)
    assert np.allclose(partial_trace(joint, [1], [2, 3]).data, rb)
    assert np.allclose(tensor_embed(b, 1, [2, 3]).data, np.kron(np.eye(2), b))
    assert np.allclose(kron(a, b), np.kron(a, b))
    with pytest.raises(ShapeError):
        tensor_embed(b, 0, [2, 3])


def test_partial_trace_shape_mismatch():
    with pytest.raises(ShapeError):
        partial_trace(np.eye(5), [0], [2, 3])


def test_states_and_fidelity():
    up, down = basis(2, 0), basis(2, 1)
    plus = PureState([1, 1]).normalized()
    assert fidelity(up, down) == 0.0
    assert fidelity(up, plus) == pytest.approx(0.5)
    assert fidelity(plus, 3j * np.asarray(plus)) == pytest.approx(1.0)
    assert expectation([3, 0], SIGMA_Z) == pytest.approx(1.0)
    with pytest.raises(DegenerateState):
        PureState([0, 0]).normalized()
    with pytest.raises(DegenerateState):
        expectation([0, 0], SIGMA_Z)


def test_mixed_state_validation():
    MixedState(np.eye(2) / 2)
    with pytest.raises((InvalidOperator, ShapeError, ValueError)):
        MixedState(np.diag([1.5, -0.5]))
