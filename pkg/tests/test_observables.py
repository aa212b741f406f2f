import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polariton_mott.evolution import QuantumState, evolve, prepare_sf_state, vacuum
from polariton_mott.fockspace import build_basis
from polariton_mott.model import HBAR, DetuningSchedule, DeviceParams, lp_arrays
from polariton_mott.observables import (
    UndefinedStatistic,
    g2_zero,
    indistinguishability,
    lp_coherence,
    populations,
    quantum_efficiency,
    snapshot,
    visibility,
)

G = 2500.0


def fock_vector(basis, occ):
    psi = np.zeros(basis.dim, complex)
    psi[basis.state_index(occ)] = 1
    return QuantumState(basis, psi)


def coherent_vector(alpha, cap=40):
    b = build_basis(1, cap)
    n = b.states[:, 0]
    logamp = n * np.log(abs(alpha)) - 0.5 * np.array([math.lgamma(k + 1) for k in n])
    psi = np.exp(logamp) * np.exp(1j * np.angle(alpha) * n)
    return b, QuantumState(b, psi / np.linalg.norm(psi))


def random_state(basis, rng):
    psi = rng.normal(size=basis.dim) + 1j * rng.normal(size=basis.dim)
    return QuantumState(basis, psi / np.linalg.norm(psi))


@pytest.mark.parametrize("n", [1, 2, 3, 5])
def test_g2_of_fock_states(n):
    b = build_basis(1, 6)
    assert g2_zero(fock_vector(b, [n]), b, 0) == pytest.approx((n - 1) / n, abs=1e-15)


@pytest.mark.parametrize("alpha", [0.3, 0.7 + 0.4j, 1.5])
def test_g2_of_coherent_states(alpha):
    b, psi = coherent_vector(alpha)
    assert g2_zero(psi, b, 0) == pytest.approx(1.0, abs=1e-6)
    assert g2_zero(psi.density_matrix(), b, 0) == pytest.approx(1.0, abs=1e-6)


def test_g2_of_superfluid_state():
    b = build_basis(6, 6)
    psi = prepare_sf_state(b, 6, density=False)
    for i in range(6):
        assert g2_zero(psi, b, i) == pytest.approx(5 / 6, abs=1e-12)


def test_vacuum_statistics_are_undefined():
    b = build_basis(3, 2)
    vac = vacuum(b)
    assert np.all(populations(vac, b) == 0)
    with pytest.raises(UndefinedStatistic):
        g2_zero(vac, b, 0)
    sched = DetuningSchedule.constant([-3 * G] * 3)
    snap = snapshot(vac, 0.0, DeviceParams(n_sites=3), sched, (0, 2))
    assert snap.g2 == [None, None, None]
    assert snap.V is None and snap.I is None


def test_photon_population_is_weighted():
    b = build_basis(3, 3)
    dev = DeviceParams(n_sites=3)
    sched = DetuningSchedule.constant([-3 * G, 0.0, 4 * G])
    st_ = prepare_sf_state(b, 3)
    snap = snapshot(st_, 0.0, dev, sched, (0, 2))
    A = lp_arrays(sched.evaluate_all(0.0), dev)["A"]
    assert np.allclose(snap.n_photon, A**2 * snap.n_lp, atol=1e-15)


def test_visibility_extremes():
    b = build_basis(4, 4)
    A = np.full(4, 0.9)
    mi = fock_vector(b, [1, 1, 1, 1])
    assert visibility(mi, b, A)[0] == pytest.approx(0.0, abs=1e-12)
    sf = prepare_sf_state(b, 4)
    assert visibility(sf, b, A)[0] == pytest.approx(1.0, abs=1e-6)
    assert visibility(sf, b, A, sites=[0, 2])[0] == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 2 * math.pi))
def test_visibility_invariances(seed, phase):
    b = build_basis(4, 3)
    rng = np.random.default_rng(seed)
    A = rng.uniform(0.2, 1.0, 4)
    psi = random_state(b, rng)
    V = visibility(psi, b, A)[0]
    rotated = QuantumState(b, psi.data * np.exp(1j * phase))
    assert visibility(rotated, b, A)[0] == pytest.approx(V, abs=1e-9)
    # mirror the chain: site m -> N-1-m
    perm = [b.state_index(occ[::-1]) for occ in b.states]
    mirrored = np.zeros_like(psi.data)
    mirrored[perm] = psi.data
    assert visibility(QuantumState(b, mirrored), b, A[::-1])[0] == pytest.approx(V, abs=1e-9)
    assert visibility(psi, b, A, phi_samples=1440)[0] == pytest.approx(V, abs=1e-6)


def test_visibility_cyclic_shift_of_symmetric_state():
    b = build_basis(4, 4)
    dev = DeviceParams(n_sites=4)
    sched = DetuningSchedule.constant([-3 * G] * 4, 0.0, 20.0)
    rec = evolve(prepare_sf_state(b, 4), sched, dev, (0.0, 20.0), 0.01, 20.0, snapshots=False)
    rho = rec.final_state
    A = np.full(4, 0.95)
    perm = [b.state_index(np.roll(occ, 1)) for occ in b.states]
    P = np.zeros((b.dim, b.dim))
    P[perm, np.arange(b.dim)] = 1
    shifted = QuantumState(b, P @ rho.data @ P.T)
    assert visibility(shifted, b, A)[0] == pytest.approx(visibility(rho, b, A)[0], abs=1e-9)


def test_hom_reference_states():
    b = build_basis(3, 2)
    A = np.ones(3)
    assert indistinguishability(fock_vector(b, [1, 0, 1]), b, A, (0, 2)) == pytest.approx(1.0, abs=1e-12)
    assert indistinguishability(fock_vector(b, [2, 0, 0]), b, A, (0, 2)) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(UndefinedStatistic):
        indistinguishability(vacuum(b), b, A, (0, 2))
    with pytest.raises(ValueError):
        indistinguishability(fock_vector(b, [1, 0, 1]), b, A, (1, 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_hom_symmetric_in_pair(seed):
    b = build_basis(3, 3)
    rng = np.random.default_rng(seed)
    psi = random_state(b, rng)
    A = rng.uniform(0.2, 1.0, 3)
    assert indistinguishability(psi, b, A, (0, 2)) == pytest.approx(indistinguishability(psi, b, A, (2, 0)), abs=1e-12)


def test_coherence_matrix_hermitian():
    b = build_basis(3, 3)
    C = lp_coherence(random_state(b, np.random.default_rng(3)), b)
    assert np.allclose(C, C.conj().T)


def test_efficiency_pure_photon_limit():
    b = build_basis(1, 1)
    rate = 0.25  # 1/ps
    dev = DeviceParams(n_sites=1, Q=1.596e6 / (rate * HBAR), tau_b=1e300)
    delta = -1e6 * G  # photon-like: A = 1 to double precision
    t_end = 10 / rate
    sched = DetuningSchedule.constant([delta], 0.0, t_end)
    rho = fock_vector(b, [1]).density_matrix()
    rec = evolve(rho, sched, dev, (0.0, t_end), 0.01, 0.1)
    expected = 1 - math.exp(-10)
    # per-step trapezoid of an exponential overshoots by (rate dt)^2 / 12 relative
    quad_err = (rate * 0.01) ** 2 / 12 * expected
    assert abs(rec.emitted[-1][0] - expected) <= quad_err + 1e-9
    assert quantum_efficiency(rec, dev) == pytest.approx(expected, abs=1e-4)


def test_efficiency_without_cavity_loss():
    b = build_basis(1, 1)
    dev = DeviceParams(n_sites=1, Q=math.inf)
    sched = DetuningSchedule.constant([-3 * G], 0.0, 50.0)
    rec = evolve(fock_vector(b, [1]).density_matrix(), sched, dev, (0.0, 50.0), 0.01, 1.0)
    assert quantum_efficiency(rec, dev) == 0.0


def test_efficiency_monotone_and_bounded(protocol_n3):
    etas = [s.eta for s in protocol_n3.record.snapshots]
    assert all(b >= a - 1e-15 for a, b in zip(etas, etas[1:]))
    assert max(etas) <= 1 + 1e-6
