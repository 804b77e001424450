import warnings

import numpy as np
import pytest
from scipy.special import eval_hermite, factorial

from collapsar.bohm import (BathConfig, TruncationWarning, conditional_projector_average, conditional_state,
                            dump_joint, evolve_joint, guiding_velocity, guiding_velocity_generic,
                            hermite_functions, initial_joint, integrate_bohm, integrate_bohm_ensemble,
                            load_joint, momentum_matrix, position_matrix, trace_out_bath)
from collapsar.errors import InvalidArgument, ShapeError, TooLarge
from collapsar.kernels import CosineSum, ExponentialDecay, factorize
from collapsar.noise import Grid, sample_hidden
from collapsar.oracle import compare_density, influence_propagate

from conftest import PSI0


def test_hermite_functions_against_scipy():
    x = np.linspace(-4, 4, 41)
    got = hermite_functions(12, x)
    for n in range(12):
        ref = eval_hermite(n, x) * np.exp(-x * x / 2) / np.sqrt(2.0**n * factorial(n) * np.sqrt(np.pi))
        assert np.allclose(got[:, n], ref, atol=1e-12)


def test_hermite_orthonormality():
    x = np.linspace(-12, 12, 6001)
    h = hermite_functions(10, x)
    gram = np.trapezoid(h[:, :, None] * h[:, None, :], x, axis=0)
    assert np.allclose(gram, np.eye(10), atol=1e-10)


def test_canonical_commutator_on_low_levels():
    n = 8
    x, p = position_matrix(n), momentum_matrix(n)
    c = x @ p - p @ x
    assert np.allclose(c[: n - 1, : n - 1], 1j * np.eye(n - 1))


def test_initial_conditional_state_is_psi0(single_mode):
    bc = BathConfig(single_mode, 6)
    st = initial_joint(PSI0, bc)
    raw, nrm = conditional_state(st, sample_hidden(single_mode, 0))
    assert np.allclose(raw, PSI0) and np.allclose(nrm, PSI0)


def test_bath_config(single_mode):
    bc = BathConfig(single_mode, 10)
    assert bc.oscillators == 2 and bc.joint_dim(2) == 200
    xp, xm = bc.split(np.array([1.0, 2.0]))
    assert xp.shape == (1, 1) and xp[0, 0] == 1.0 and xm[0, 0] == 2.0
    assert bc.osc_index(-1, 0, 0) == 1
    with pytest.raises(TooLarge):
        initial_joint(PSI0, BathConfig(factorize(ExponentialDecay(1.0, 1.0), 4, 4.0), 4))
    with pytest.raises(InvalidArgument):
        BathConfig(single_mode, 1)


def test_joint_evolution_is_unitary_and_matches_oracle(dephasing, single_mode):
    bc = BathConfig(single_mode, 10)
    g = Grid.span(1.0, 0.01)
    st = initial_joint(PSI0, bc)
    for _ in range(g.steps):
        st = evolve_joint(st, dephasing, g.dt)
    assert st.norm == pytest.approx(1.0, abs=1e-12)
    sp = influence_propagate(np.outer(PSI0, PSI0.conj()), dephasing, single_mode, g)
    assert compare_density(trace_out_bath(st), sp.rho[-1])["trace_distance"] < 1e-6


def test_guiding_velocity_analytic_vs_current(driven, single_mode):
    bc = BathConfig(single_mode, 8)
    st = initial_joint(PSI0, bc)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TruncationWarning)
        for _ in range(30):
            st = evolve_joint(st, driven, 0.01)
    x = np.array([0.3, -0.4])
    assert np.allclose(guiding_velocity(st, x, driven), guiding_velocity_generic(st, x, driven), atol=1e-10)


def test_truncation_warning(dephasing, single_mode):
    bc = BathConfig(single_mode, 3)
    st = initial_joint(PSI0, bc)
    with pytest.warns(TruncationWarning):
        for _ in range(50):
            st = evolve_joint(st, dephasing, 0.02)


def test_equivariance_of_position_histogram(dephasing, single_mode):
    # Born-distributed hidden variables stay distributed as |Psi(x, t)|^2:
    # compare the guided <x+> with the quantum expectation.
    bc = BathConfig(single_mode, 10)
    g = Grid.span(0.5, 0.01)
    xs = [sample_hidden(single_mode, 6, i) for i in range(400)]
    ens = integrate_bohm_ensemble(dephasing, bc, PSI0, xs, g)
    psi = ens.joint.amplitudes
    xq = np.kron(np.kron(np.eye(2), position_matrix(10)), np.eye(10)) / np.sqrt(2.0)
    quantum = np.vdot(psi, xq @ psi).real
    guided = ens.positions[:, -1, 0]
    assert abs(guided.mean() - quantum) < 3 * guided.std(ddof=1) / np.sqrt(guided.size)


def test_trajectory_csv_and_noise(dephasing, single_mode):
    bc = BathConfig(single_mode, 6)
    tr = integrate_bohm(dephasing, bc, PSI0, sample_hidden(single_mode, 0), Grid.span(0.1, 0.05))
    lines = tr.to_csv().splitlines()
    assert lines[0] == "t,xplus_0_0,xminus_0_0,<A_0>,fidelity_vs_collapse"
    assert len(lines) == 4
    assert tr.noise_snapshot(1).values.shape == (1, 3)


def test_conditional_projector_average(dephasing, single_mode):
    bc = BathConfig(single_mode, 8)
    st = initial_joint(PSI0, bc)
    for _ in range(20):
        st = evolve_joint(st, dephasing, 0.025)
    mean, se = conditional_projector_average(st, 20000, 0)
    diff = np.abs(mean - trace_out_bath(st).data)
    assert np.linalg.norm(diff) <= 3 * np.linalg.norm(se)


def test_snapshot_round_trip(single_mode):
    bc = BathConfig(single_mode, 4)
    st = initial_joint([0.6, 0.8j], bc)
    blob = dump_joint(st)
    assert blob[:4] == b"CLJS"
    back = load_joint(blob, bc)
    assert np.array_equal(back.amplitudes, st.amplitudes) and back.t == st.t
    with pytest.raises(ShapeError):
        load_joint(blob, BathConfig(single_mode, 5))
    with pytest.raises(InvalidArgument):
        load_joint(b"XXXX" + blob[4:], bc)


def test_two_channel_positions_split():
    md = factorize(CosineSum([np.diag([1.0, 0.5])], [1.0]))
    bc = BathConfig(md, 3)
    xp, xm = bc.split(np.arange(4.0))
    assert xp.shape == (2, 1) and np.array_equal(xm.ravel(), [2.0, 3.0])
