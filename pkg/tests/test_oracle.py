import numpy as np
import pytest

from collapsar.errors import ShapeError
from collapsar.kernels import CosineSum, ExponentialDecay, WhiteApprox, factorize
from collapsar.markov import CollapseSystem, lindblad_trajectory
from collapsar.noise import Grid
from collapsar.oracle import coherence_csv, compare_density, dephasing_coherence, influence_propagate
from collapsar.qcore import SIGMA_X, SIGMA_Z

from conftest import PSI0


def closed_form_coherence(rho01, gamma, kappa, omega, t):
    return rho01 * np.exp(-2 * gamma * 2 * kappa**2 * (1 - np.cos(omega * t)) / omega**2)


def test_dephasing_closed_form_and_revival(dephasing, single_mode):
    g = Grid.span(np.pi, np.pi / 3200)
    sp = influence_propagate(np.outer(PSI0, PSI0.conj()), dephasing, single_mode, g)
    ref = closed_form_coherence(0.48, 1.0, 1.0, 2.0, g.times)
    assert np.abs(sp.rho_interaction[:, 0, 1] - ref).max() < 1e-6
    assert sp.rho[-1, 0, 1].real == pytest.approx(0.48, abs=1e-6)
    assert np.allclose(dephasing_coherence(single_mode, 1.0, g.times), ref / 0.48, atol=1e-15)


def test_map_is_trace_preserving_and_cp(driven):
    md = factorize(ExponentialDecay(1.0, 0.3), 16, 16.0)
    g = Grid.span(0.5, 0.01)
    sp = influence_propagate(np.outer(PSI0, PSI0.conj()), driven, md, g)
    assert sp.is_trace_preserving(1e-9)
    assert sp.is_completely_positive(1e-7)
    assert sp.trace_drift() < 1e-12


def test_white_kernel_reduces_to_lindblad():
    dt = 1e-3
    g = Grid.span(1.0, dt)
    sys = CollapseSystem(SIGMA_X, [SIGMA_Z], 1.0)
    md = factorize(WhiteApprox(1.0, np.pi / dt), modes=g.steps + 1, omega_max=np.pi / dt)
    rho0 = np.diag([1.0, 0.0]).astype(complex)
    sp = influence_propagate(rho0, sys, md, g)
    lind = lindblad_trajectory(rho0, sys, g)
    td = max(compare_density(a, b)["trace_distance"] for a, b in zip(sp.rho, lind))
    assert td < 1e-3


def test_compare_density():
    a = np.diag([1.0, 0.0])
    b = np.diag([0.0, 1.0])
    assert compare_density(a, a) == pytest.approx({"trace_distance": 0.0, "fidelity": 1.0})
    assert compare_density(a, b) == pytest.approx({"trace_distance": 1.0, "fidelity": 0.0})
    assert compare_density(a, np.eye(2) / 2)["fidelity"] == pytest.approx(0.5)
    with pytest.raises(ShapeError):
        compare_density(a, np.eye(3))


def test_two_channel_map_cp():
    sys = CollapseSystem(np.zeros((2, 2)), [SIGMA_Z, SIGMA_X], 0.5)
    md = factorize(CosineSum([np.array([[1.0, 0.5], [0.5, 1.0]])], [1.5]))
    sp = influence_propagate(np.eye(2) / 2, sys, md, Grid.span(0.5, 0.01))
    assert sp.is_trace_preserving() and sp.is_completely_positive()


def test_coherence_csv():
    text = coherence_csv([0.0, 0.5], [0.5, 0.4], [0.5, 0.41])
    assert text.splitlines() == ["t,coherence,closed_form", "0.0,0.5,0.5", "0.5,0.4,0.41"]
