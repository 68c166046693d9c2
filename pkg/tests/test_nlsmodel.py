import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlskam.algebra import Caps, LatticeConfig
from nlskam.errors import ConfigurationError, ContractError
from nlskam.homology import StepParams
from nlskam.kamflow import kam_step
from nlskam.lattice import build_blocks
from nlskam.nlsmodel import (
    CollocationGrid,
    FieldState,
    NlsSpec,
    build_hamiltonian,
    demo_model,
    energy,
    field_from_coordinates,
    integrate,
    momentum_audit,
    sobolev_norm,
    stability_experiment,
)
from conftest import RADII


def random_state(grid, rng, R, scale=0.3):
    values = {}
    for site in np.ndindex(*(2 * R + 1,) * grid.d):
        a = tuple(x - R for x in site)
        values[a] = scale * complex(rng.normal(), rng.normal()) * math.exp(-0.5 * sum(x * x for x in a))
    return FieldState.from_sites(grid, values)


# ---------------------------------------------------------------- Hamiltonian


def test_zero_epsilon_gives_zero_perturbation():
    spec, lat = demo_model(epsilon=0.0)
    h, f = build_hamiltonian(spec, lat)
    assert f.nterms == 0
    assert np.allclose(h.omega, [0.3, 1 + 0.3 * math.exp(-1)])
    assert np.array_equal(h.Omega, lat.normal_sq_norms.astype(float))
    assert np.abs(h.H.dense).max() == 0


def test_zero_epsilon_kam_step_is_fixed_point():
    spec, lat = demo_model(epsilon=0.0)
    h, f = build_hamiltonian(spec, lat)
    h2, f2, s, _ = kam_step(h, f, StepParams(1e-3, 4.0, RADII), build_blocks(lat, 2.0))
    assert h2 is h and f2.nterms == 0 and s.nterms == 0


def test_single_tangential_mode_coefficients():
    lat = LatticeConfig(1, 1, ((1,),), 2)
    eps = 0.01
    spec = NlsSpec(V_hat={}, epsilon=eps, caps=Caps(4, 2, 4), q={(1,): 1.0})
    _, f = build_hamiltonian(spec, lat)
    # |u_1|^4 = (q + r)^2 = 1 + 2 r + r^2
    assert f.coeff([0], [0]) == pytest.approx(eps)
    assert f.coeff([0], [1]) == pytest.approx(2 * eps)
    assert f.coeff([0], [2]) == pytest.approx(eps)


def test_amplitude_scaling():
    lat = LatticeConfig(1, 1, ((1,),), 1)
    q = 0.49
    spec = NlsSpec(V_hat={}, epsilon=1.0, caps=Caps(4, 2, 4), q={(1,): q})
    _, f = build_hamiltonian(spec, lat)
    assert f.coeff([0], [0]) == pytest.approx(q * q)
    assert f.coeff([0], [1]) == pytest.approx(2 * q)


def test_zero_amplitude_rejected():
    lat = LatticeConfig(1, 1, ((1,),), 1)
    spec = NlsSpec(V_hat={}, epsilon=0.1, caps=Caps(4, 1, 2), q={(1,): 0.0})
    with pytest.raises(ContractError):
        build_hamiltonian(spec, lat)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        NlsSpec(V_hat={(0,): 1j}, epsilon=0.1, caps=Caps(4, 1, 2))
    with pytest.raises(ConfigurationError):
        NlsSpec(V_hat={}, epsilon=-0.1, caps=Caps(4, 1, 2))
    with pytest.raises(ConfigurationError):
        NlsSpec(V_hat={}, epsilon=0.1, caps=Caps(4, 1, 2), m=0)
    spec = NlsSpec(V_hat={}, epsilon=0.1, caps=Caps(4, 1, 2), q={(0,): 1.0})
    with pytest.raises(ConfigurationError):
        spec.amplitude((1,))


def test_momentum_conservation():
    spec, lat = demo_model(epsilon=1e-3)
    _, f = build_hamiltonian(spec, lat)
    assert f.nterms > 0
    assert momentum_audit(f).all()
    assert f.reality_defect() <= 1e-14


def test_momentum_audit_flags_violation():
    from nlskam.algebra import TFPoly

    spec, lat = demo_model(epsilon=1e-3)
    bad = TFPoly.fourier(lat, spec.caps, [0, 1])
    assert not momentum_audit(bad).any()


def test_parameters_replace_potential():
    spec, lat = demo_model()
    moved = spec.with_parameters(lat, [0.1, -0.2])
    h, _ = build_hamiltonian(moved.with_epsilon(0.0), lat)
    assert np.allclose(h.omega, [0.1, 0.8])


# ---------------------------------------------------------------- fields and norms


def test_sobolev_examples():
    grid = CollocationGrid(2, 2)
    assert sobolev_norm(FieldState.from_sites(grid, {(0, 0): 1.0}), 2.0) == pytest.approx(1.0)
    assert sobolev_norm(FieldState.from_sites(grid, {(2, 0): 1.0}), 1.0) == pytest.approx(2.0)
    assert sobolev_norm(FieldState.from_sites(grid, {(1, 0): 1.0}), 3.0) == pytest.approx(1.0)


def test_parseval(rng):
    grid = CollocationGrid(2, 2)
    state = random_state(grid, rng, 2)
    l2_modes = sobolev_norm(state, 0.0) ** 2
    l2_grid = float(np.mean(np.abs(state.physical()) ** 2))
    assert l2_grid == pytest.approx(l2_modes, rel=1e-12)


def test_grid_size_power_of_two():
    assert CollocationGrid(2, 2).N == 16
    assert CollocationGrid(1, 4).N == 32
    assert CollocationGrid(1, 3).N == 16


def test_field_from_coordinates():
    spec, lat = demo_model()
    nA, nL = lat.n_tangential, lat.n_normal
    xi = np.zeros(nL)
    eta = np.zeros(nL)
    xi[0], eta[0] = 0.2, -0.1
    st_ = field_from_coordinates(lat, spec, [0.0, math.pi / 2], [0.0, 0.21], xi, eta)
    assert st_.value((0, 0)) == pytest.approx(1.0)
    assert st_.value((1, 0)) == pytest.approx(1j * math.sqrt(1.21))
    assert st_.value(lat.normal_sites[0]) == pytest.approx((0.2 - 0.1j) / math.sqrt(2))
    with pytest.raises(ContractError):
        field_from_coordinates(lat, spec, [0.0, 0.0], [-2.0, 0.0], xi, eta)


# ---------------------------------------------------------------- integrator


def test_linear_flow_preserves_moduli(rng):
    spec, lat = demo_model(epsilon=0.0)
    grid = CollocationGrid(2, 2)
    state = random_state(grid, rng, 2)
    traj = integrate(state, spec, 1e-2, 5.0, record_every=50)
    mods = np.abs(traj.fields[:, 0])
    assert np.abs(mods - np.abs(state.u)[None]).max() <= 1e-14


def test_single_mode_exact_solution():
    eps = 0.05
    spec = NlsSpec(V_hat={(1, 0): 0.2}, epsilon=eps, caps=Caps(4, 1, 2))
    grid = CollocationGrid(2, 2)
    A = 0.7 * np.exp(0.3j)
    state = FieldState.from_sites(grid, {(1, 0): A})
    T = 10.0
    traj = integrate(state, spec, 1e-2, T, record_every=100)
    omega = 1.0 + 0.2
    for t, snap in zip(traj.times, traj.fields[:, 0]):
        exact = A * np.exp(-1j * (omega + 2 * eps * abs(A) ** 2) * t)
        assert abs(snap[grid.index((1, 0))] - exact) <= 1e-10
        others = snap.copy()
        others[grid.index((1, 0))] = 0
        assert np.abs(others).max() <= 1e-12


@given(seed=st.integers(0, 2**31))
def test_mass_conserved_per_step(seed):
    rng = np.random.default_rng(seed)
    spec = NlsSpec(V_hat={(0, 0): 0.3}, epsilon=0.2, caps=Caps(4, 1, 2))
    grid = CollocationGrid(2, 2)
    state = random_state(grid, rng, 2)
    traj = integrate(state, spec, 1e-2, 0.2, record_every=1)
    mass = (np.abs(traj.fields[:, 0]) ** 2).sum(axis=(1, 2))
    assert np.abs(np.diff(mass)).max() <= 1e-12 * mass[0]


def test_energy_drift_second_order(rng):
    spec = NlsSpec(V_hat={(0,): 0.3}, epsilon=0.5, caps=Caps(4, 1, 2))
    grid = CollocationGrid(1, 3)
    state = random_state(grid, rng, 3, scale=0.8)

    def drift(dt):
        traj = integrate(state, spec, dt, 2.0, record_every=1)
        E = traj.energies[:, 0]
        return np.abs(E - E[0]).max()

    ratio = drift(0.02) / drift(0.01)
    assert 4 * 0.8 <= ratio <= 4 * 1.2


def test_energy_drift_long_run(rng):
    spec = NlsSpec(V_hat={(0,): 0.3, (1,): 0.1}, epsilon=1e-2, caps=Caps(4, 1, 2))
    grid = CollocationGrid(1, 2)
    state = random_state(grid, rng, 2, scale=0.5)
    traj = integrate(state, spec, 1e-3, 1e3, record_every=10_000)
    E = traj.energies[:, 0]
    assert np.abs(E - E[0]).max() / abs(E[0]) <= 1e-6


def test_backward_integration_returns(rng):
    spec = NlsSpec(V_hat={(0, 0): 0.3}, epsilon=0.1, caps=Caps(4, 1, 2))
    grid = CollocationGrid(2, 2)
    state = random_state(grid, rng, 2)
    fwd = integrate(state, spec, 1e-2, 1.0, record_every=100)
    back = integrate(FieldState(grid, fwd.fields[-1, 0], 1.0), spec, 1e-2, -1.0, record_every=100)
    assert np.abs(back.fields[-1, 0] - state.u).max() <= 1e-12
    assert back.times[-1] == pytest.approx(0.0)


def test_integrate_rejects_bad_step(rng):
    spec, _ = demo_model()
    grid = CollocationGrid(2, 2)
    with pytest.raises(ContractError):
        integrate(random_state(grid, rng, 2), spec, 0.0, 1.0)


def test_energy_includes_nonlinearity():
    grid = CollocationGrid(1, 1)
    spec = NlsSpec(V_hat={}, epsilon=0.5, caps=Caps(4, 1, 2))
    state = FieldState.from_sites(grid, {(1,): 2.0})
    assert energy(state, spec) == pytest.approx(1.0 * 4.0 + 0.5 * 16.0)


# ---------------------------------------------------------------- stability experiment


def test_stability_linear_isometry():
    spec, lat = demo_model(epsilon=0.0)
    prof = stability_experiment(None, spec, lat, delta=1e-3, p=2.0, dt=1e-2, T=20.0, record_every=10)
    assert np.abs(prof.C - 1.0).max() <= 1e-10
    assert prof.times.min() == pytest.approx(-20.0) and prof.times.max() == pytest.approx(20.0)
    rows = list(csv.reader(io.StringIO(prof.to_csv())))
    assert rows[0] == ["t", "hp_distance", "C", "energy"]
    assert len(rows) == len(prof.times) + 1


@pytest.mark.parametrize("delta", [0.0, 1.0, -0.1])
def test_stability_rejects_bad_delta(delta):
    spec, lat = demo_model(epsilon=0.0)
    with pytest.raises(ContractError):
        stability_experiment(None, spec, lat, delta=delta, p=2.0)


def test_stability_deterministic():
    spec, lat = demo_model(epsilon=1e-3)
    a = stability_experiment(None, spec, lat, delta=1e-2, p=2.0, T=2.0, record_every=10, seed=3)
    b = stability_experiment(None, spec, lat, delta=1e-2, p=2.0, T=2.0, record_every=10, seed=3)
    assert np.array_equal(a.C, b.C)
    assert a.C[a.times == 0][0] == pytest.approx(1.0)
