import numpy as np
import pytest

from collapsar.errors import GridMismatch, InvalidArgument, ShapeError
from collapsar.kernels import CosineSum, ExponentialDecay, factorize, lag_table, reconstruct
from collapsar.markov import CollapseSystem
from collapsar.noise import Grid, noise_from_hidden, sample_hidden
from collapsar.nonmarkov import (LinearPropagator, fd_insertion, girsanov_check, kernel_lags, measure_weight,
                                 memory_operators, memory_operators_direct, nonlinear_ensemble,
                                 nonlinear_trajectory_reference, sample_noises, sse_residual)
from collapsar.qcore import SIGMA_Z

from conftest import PSI0


def dephasing_linear_oracle(w, lags, gamma, dt, psi0, n):
    """Closed form of the discrete linear step for H = 0, A = sigma_z.

    Every generator is diagonal, so the product of exponentials is the
    exponential of the summed exponent.
    """
    noise = np.sqrt(gamma) * dt * w[:n].sum()
    mem = 0.0
    for k in range(n):
        c = np.full(k + 1, dt)
        c[-1] = 0.5 * dt
        mem += 2 * gamma * dt * (c * lags[k - np.arange(k + 1)]).sum()
    a = np.array([1.0, -1.0])
    return psi0 * np.exp(a * noise - mem)


def test_linear_step_matches_closed_form(dephasing, single_mode):
    g = Grid.span(1.0, 0.01)
    prop = LinearPropagator(dephasing, single_mode, g)
    w = noise_from_hidden(sample_hidden(single_mode, 2), single_mode, g)
    lt = prop.sweep(w, PSI0)
    lags = lag_table(single_mode, g.dt, g.steps)[:, 0, 0]
    for n in (0, 1, 37, 100):
        assert np.allclose(lt.states[n], dephasing_linear_oracle(w.values[0], lags, 1.0, g.dt, PSI0, n),
                           rtol=1e-12)


def test_memory_operators_incremental_vs_direct(driven):
    md = factorize(ExponentialDecay(1.0, 0.5), 8, 8.0)
    g = Grid.span(0.5, 0.01)
    prop = LinearPropagator(driven, md, g)
    direct = memory_operators_direct(prop.iops, kernel_lags(md, g.dt, g.steps))
    assert np.abs(memory_operators(prop.iops, md) - direct).max() < 1e-12


def test_kernel_object_source_matches_lag_table(dephasing):
    k = CosineSum([1.0], [2.0])
    assert np.allclose(kernel_lags(k, 0.1, 5), reconstruct(factorize(k), np.arange(6) * 0.1))


def test_nonlinear_kernel_matches_reference(driven, single_mode):
    g = Grid.span(0.5, 0.01)
    prop = LinearPropagator(driven, single_mode, g)
    w0 = noise_from_hidden(sample_hidden(single_mode, 1, 3), single_mode, g)
    fast = prop.nonlinear(w0, PSI0, snapshots=True)
    ref = nonlinear_trajectory_reference(prop, w0, PSI0)
    assert np.abs(fast.states - ref.states).max() < 1e-12
    assert np.abs(fast.snapshots - ref.snapshots).max() < 1e-12
    assert np.abs(fast.noise.values - ref.noise.values).max() < 1e-12


def test_noise_redefinition_closed_sum(dephasing, single_mode):
    g = Grid.span(0.5, 0.01)
    prop = LinearPropagator(dephasing, single_mode, g)
    w0 = noise_from_hidden(sample_hidden(single_mode, 1, 0), single_mode, g)
    tr = prop.nonlinear(w0, PSI0)
    t = g.times
    shift = np.zeros(t.size)
    for n in range(g.steps):
        shift += 2 * g.dt * np.cos(2 * (t[n] - t)) * tr.expect[n, 0]
    assert np.abs(tr.noise.values[0] - w0.values[0] - shift).max() < 1e-12
    # the field at time t_n equals the one used to build the state at t_n
    assert np.allclose(tr.expect[:, 0], np.abs(tr.states[:, 0]) ** 2 - np.abs(tr.states[:, 1]) ** 2)


def test_normalised_states_have_unit_norm(driven, single_mode):
    g = Grid.span(0.5, 0.01)
    prop = LinearPropagator(driven, single_mode, g)
    w0 = noise_from_hidden(sample_hidden(single_mode, 4), single_mode, g)
    tr = prop.nonlinear(w0, PSI0)
    assert np.allclose(np.linalg.norm(tr.states, axis=1), 1.0, atol=1e-13)
    header = tr.to_csv().splitlines()[0]
    assert header == "t,<A_0>,norm_linear"


def test_sse_residual_first_order_for_commuting(dephasing, single_mode):
    res = []
    for dt in (0.02, 0.01, 0.005):
        g = Grid.span(0.2, dt)
        prop = LinearPropagator(dephasing, single_mode, g)
        w = noise_from_hidden(sample_hidden(single_mode, 0), single_mode, g)
        res.append(np.linalg.norm(sse_residual(prop, w, PSI0, g.steps - 1)))
    assert res[1] < 0.6 * res[0] and res[2] < 0.6 * res[1]


def test_fd_insertion_rejects_future_times(dephasing, single_mode):
    g = Grid.span(0.2, 0.01)
    prop = LinearPropagator(dephasing, single_mode, g)
    w = noise_from_hidden(sample_hidden(single_mode, 0), single_mode, g)
    with pytest.raises(InvalidArgument):
        fd_insertion(prop, w, PSI0, 0.15, 0, 0.1)


def test_fd_insertion_against_finite_difference(dephasing, single_mode):
    # the state depends on w(t_m) only through dt * w(t_m) in the step generator
    g = Grid.span(0.2, 0.01)
    prop = LinearPropagator(dephasing, single_mode, g)
    w = noise_from_hidden(sample_hidden(single_mode, 0), single_mode, g).values
    m, n = 5, 15
    eps = 1e-6
    wp, wm = w.copy(), w.copy()
    wp[0, m] += eps / g.dt
    wm[0, m] -= eps / g.dt
    fd = (prop.sweep(wp, PSI0).states[n] - prop.sweep(wm, PSI0).states[n]) / (2 * eps)
    assert np.allclose(fd_insertion(prop, w, PSI0, g.times[m], 0, g.times[n]), fd, atol=1e-8)


def test_reference_measure_trace(dephasing, single_mode):
    g = Grid.span(1.0, 0.01)
    prop = LinearPropagator(dephasing, single_mode, g)
    noises = sample_noises(single_mode, g, 0, 4000)
    w2 = np.einsum("na,na->n", *(lambda s: (s.conj(), s))(prop.batch(noises, PSI0, [g.steps])[:, 0])).real
    assert abs(w2.mean() - 1) < 3 * w2.std(ddof=1) / np.sqrt(w2.size)
    lt = prop.sweep(noises[0], PSI0)
    assert measure_weight(lt, 1.0) == pytest.approx(lt.norms2[-1])


def test_ensemble_threads_are_deterministic(driven, single_mode):
    g = Grid.span(0.3, 0.01)
    prop = LinearPropagator(driven, single_mode, g)
    noises = sample_noises(single_mode, g, 2, 6)
    a = nonlinear_ensemble(prop, noises, PSI0, threads=1)
    b = nonlinear_ensemble(prop, noises, PSI0, threads=3)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_girsanov_small(dephasing, single_mode):
    g = Grid.span(0.5, 0.01)
    for f in ("one", "w1", "w1w2"):
        rep = girsanov_check(dephasing, single_mode, g, f, 800, 3, PSI0)
        assert abs(rep.zscore) <= 3.0


def test_shape_errors(dephasing, single_mode):
    g = Grid.span(0.2, 0.01)
    with pytest.raises(ShapeError):
        LinearPropagator(dephasing, factorize(CosineSum([np.eye(2)], [1.0])), g)
    prop = LinearPropagator(dephasing, single_mode, g)
    with pytest.raises(GridMismatch):
        prop.sweep(np.zeros((1, 5)), PSI0)
    with pytest.raises(ShapeError):
        prop.sweep(np.zeros((1, g.steps + 1)), [1, 0, 0])
