import math

import numpy as np
import pytest

from polariton_mott.evolution import (
    DivergenceError,
    QuantumState,
    SectorLiouvillian,
    TruncationOverflow,
    evolve,
    lindblad_rhs,
    load_checkpoint,
    mcwf_evolve,
    prepare_driven_state,
    prepare_sf_state,
    save_checkpoint,
    vacuum,
)
from polariton_mott.experiments import ProtocolConfig, build_schedule
from polariton_mott.fockspace import build_basis
from polariton_mott.model import (
    HBAR,
    DetuningSchedule,
    DeviceParams,
    DriveSpec,
    build_decay_channels,
    build_hamiltonian,
    lattice_bonds,
    lp_site_params,
    site_bonds,
)
from polariton_mott.observables import g2_zero, populations

G = 2500.0
LOSSLESS = dict(Q=1e300, tau_b=1e300)


def fock_density(basis, occ):
    rho = np.zeros((basis.dim, basis.dim), complex)
    k = basis.state_index(occ)
    rho[k, k] = 1
    return QuantumState(basis, rho)


def random_density(basis, rng, sector_diagonal=False):
    M = rng.normal(size=(basis.dim, basis.dim)) + 1j * rng.normal(size=(basis.dim, basis.dim))
    rho = M @ M.conj().T
    if sector_diagonal:
        tot = basis.totals
        rho = rho * (tot[:, None] == tot[None, :])
    return rho / np.trace(rho)


# --- initial states -------------------------------------------------------


def test_sf_state_small_cases():
    b1 = build_basis(1, 1)
    psi = prepare_sf_state(b1, 1, density=False).data
    assert abs(psi[b1.state_index([1])]) == pytest.approx(1.0)
    b = build_basis(2, 2)
    psi = prepare_sf_state(b, 2, density=False).data
    amps = [psi[b.state_index(o)] for o in ([2, 0], [1, 1], [0, 2])]
    assert np.allclose(amps, [0.5, 1 / math.sqrt(2), 0.5], atol=1e-12)


@pytest.mark.parametrize("N, n", [(3, 3), (4, 2), (6, 6)])
def test_sf_state_uniform_filling(N, n):
    b = build_basis(N, n)
    st = prepare_sf_state(b, n, density=False)
    assert np.allclose(populations(st, b), n / N, atol=1e-12)


def test_sf_state_truncation():
    with pytest.raises(TruncationOverflow):
        prepare_sf_state(build_basis(2, 2), 3)


def test_checkpoint_round_trip(tmp_path):
    b = build_basis(3, 3)
    rho = QuantumState(b, random_density(b, np.random.default_rng(1)))
    save_checkpoint(tmp_path / "c.bin", rho)
    back = load_checkpoint(tmp_path / "c.bin", b)
    assert np.array_equal(back.data, rho.data)
    raw = (tmp_path / "c.bin").read_bytes()
    assert len(raw) == 16 + 16 * b.dim**2
    assert int.from_bytes(raw[:8], "little") == b.dim
    psi = prepare_sf_state(b, 3, density=False)
    save_checkpoint(tmp_path / "v.bin", psi)
    assert np.array_equal(load_checkpoint(tmp_path / "v.bin", b).data, psi.data)


# --- generator ---------------------------------------------------------------


def _generic(basis, deltas, dev):
    params = [lp_site_params(d, dev) for d in deltas]
    return build_hamiltonian(basis, params, site_bonds(params, dev)), build_decay_channels(basis, params)


def test_vacuum_is_stationary():
    b = build_basis(3, 3)
    dev = DeviceParams(n_sites=3)
    H, ch = _generic(b, [-3 * G, 0, 4 * G], dev)
    assert np.max(np.abs(lindblad_rhs(vacuum(b).data, H, ch))) == 0.0


def test_single_site_decay_rate():
    b = build_basis(1, 1)
    dev = DeviceParams(n_sites=1)
    H, ch = _generic(b, [-3 * G], dev)
    d = lindblad_rhs(fock_density(b, [1]).data, H, ch)
    gamma = ch[0].rate
    assert np.real(np.diagonal(d)) @ b.states[:, 0] == pytest.approx(-gamma, rel=1e-12)


def test_rhs_traceless_on_random_states():
    b = build_basis(3, 3)
    dev = DeviceParams(n_sites=3)
    H, ch = _generic(b, [-3 * G, -G, 2 * G], dev)
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = lindblad_rhs(random_density(b, rng), H, ch)
        assert abs(np.trace(d)) < 1e-12


@pytest.mark.parametrize("N", [2, 3, 4])
def test_sector_engine_matches_generic(N):
    b = build_basis(N, N)
    dev = DeviceParams(n_sites=N)
    rng = np.random.default_rng(N)
    deltas = rng.uniform(-4 * G, 4 * G, N)
    H, ch = _generic(b, deltas, dev)
    bonds = lattice_bonds(N, dev.boundary)
    eng = SectorLiouvillian(b, bonds)
    params = [lp_site_params(d, dev) for d in deltas]
    eps = np.array([p.eps for p in params])
    U = np.array([p.U for p in params])
    rates = np.array([p.Gamma for p in params]) / HBAR
    J = np.array([dev.t_hop * params[i].A * params[j].A for i, j in bonds])
    rho = random_density(b, rng, sector_diagonal=True)
    y = eng.to_blocks(rho)
    out = np.empty_like(y)
    got = eng.to_full(eng.rhs(y, eps, U, rates, J, out))
    ref = lindblad_rhs(rho, H, ch)
    assert np.max(np.abs(got - ref)) < 1e-12 * max(1.0, np.max(np.abs(ref)))


def test_sector_engine_rejects_coherent_superpositions():
    b = build_basis(2, 2)
    eng = SectorLiouvillian(b, lattice_bonds(2))
    psi = np.zeros(b.dim, complex)
    psi[b.state_index([0, 0])] = psi[b.state_index([1, 0])] = 1 / math.sqrt(2)
    with pytest.raises(ValueError):
        eng.to_blocks(np.outer(psi, psi.conj()))


# --- analytic oracles ----------------------------------------------------


def test_exponential_decay():
    b = build_basis(1, 1)
    # Q chosen so the decay rate is close to 0.01 / ps
    dev = DeviceParams(n_sites=1, Q=2.45e5)
    sched = DetuningSchedule.constant([-3 * G], 0.0, 100.0)
    gamma = lp_site_params(-3 * G, dev).Gamma / HBAR
    rec = evolve(fock_density(b, [1]), sched, dev, (0.0, 100.0), 0.01, 10.0)
    expected = np.exp(-gamma * rec.times)
    assert np.max(np.abs(rec.n_lp[:, 0] - expected)) < 1e-8


def test_two_site_rabi():
    b = build_basis(2, 1)
    dev = DeviceParams(n_sites=2, **LOSSLESS)
    p = lp_site_params(-3 * G, dev)
    J = dev.t_hop * p.A**2
    period = math.pi * HBAR / J
    t_end = round(period, 1) + 0.1
    sched = DetuningSchedule.constant([-3 * G] * 2, 0.0, t_end)
    rec = evolve(fock_density(b, [1, 0]), sched, dev, (0.0, t_end), 0.01, 0.1)
    expected = np.cos(J * rec.times / HBAR) ** 2
    assert np.max(np.abs(rec.n_lp[:, 0] - expected)) < 1e-7


def _small_protocol(N=3, **dev_kw):
    cfg = ProtocolConfig(n_sites=N, device=DeviceParams(n_sites=N, **dev_kw))
    b = build_basis(N, N)
    return cfg, b, build_schedule(cfg)


def test_lossless_number_conservation():
    cfg, b, sched = _small_protocol(**LOSSLESS)
    rec = evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 300.0), 0.01, 5.0)
    total = rec.n_lp.sum(axis=1)
    assert np.max(np.abs(total - 3.0)) < 1e-9


def test_state_invariants_along_protocol():
    cfg, b, sched = _small_protocol()
    rec = evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 300.0), 0.01, 30.0,
                 checkpoint_times=np.arange(0.0, 301.0, 30.0))
    assert rec.diagnostics["max_trace_drift"] < 1e-8
    assert len(rec.checkpoints) == len(rec.times)
    for st in rec.checkpoints.values():
        rep = st.validate(herm_tol=1e-10, trace_tol=1e-8, pos_tol=1e-8)
        assert rep["min_eigenvalue"] >= -1e-8


def test_step_halving():
    cfg, b, sched = _small_protocol()
    a = evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 300.0), 0.01, 10.0)
    c = evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 300.0), 0.005, 10.0)
    for sa, sc in zip(a.snapshots, c.snapshots):
        for x, y in [(sa.n_lp, sc.n_lp), (np.array(sa.g2, float), np.array(sc.g2, float)),
                     (sa.V, sc.V), (sa.I, sc.I), (sa.eta, sc.eta)]:
            x, y = np.atleast_1d(np.asarray(x, float)), np.atleast_1d(np.asarray(y, float))
            assert np.array_equal(np.isnan(x), np.isnan(y))  # undefined at both step sizes
            ok = ~np.isnan(y)
            scale = np.maximum(np.abs(y[ok]), 1e-3)
            assert np.all(np.abs(x[ok] - y[ok]) / scale < 1e-4)


def test_trace_guard():
    cfg, b, sched = _small_protocol()
    rho = prepare_sf_state(b, 3).data * 1.1
    with pytest.raises(DivergenceError):
        evolve(QuantumState(b, rho), sched, cfg.device, (0.0, 1.0), 0.01, 1.0)


def test_bad_time_grid():
    cfg, b, sched = _small_protocol()
    with pytest.raises(ValueError):
        evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 1.005), 0.01, 1.0)


# --- driven preparation ---------------------------------------------------


def _drive_setup(area):
    b = build_basis(1, 14)
    dev = DeviceParams(n_sites=1, u=0.0, delta_g=0.0, **LOSSLESS)
    width = 1.0
    drive = DriveSpec(area / (width * math.sqrt(2 * math.pi)), 0.0, (0,), 0.0, width)
    sched = DetuningSchedule.constant([-3 * G], -8.0, 8.0)
    return b, dev, drive, sched


def test_resonant_pulse_gives_coherent_state():
    area = HBAR * math.sqrt(0.8)
    b, dev, drive, sched = _drive_setup(area)
    st = prepare_driven_state(b, dev, drive, (-8.0, 8.0), 0.01, sched)
    n = populations(st, b)[0]
    assert n == pytest.approx((area / HBAR) ** 2, rel=1e-4)
    assert g2_zero(st, b, 0) == pytest.approx(1.0, abs=1e-3)


def test_zero_drive_leaves_vacuum():
    b, dev, drive, sched = _drive_setup(0.0)
    st = prepare_driven_state(b, dev, drive, (-8.0, 8.0), 0.01, sched)
    assert np.allclose(st.data, vacuum(b).data, atol=1e-14)


def test_weak_pulse_quadratic_in_area():
    ns = []
    for area in (2.0, 4.0):
        b, dev, drive, sched = _drive_setup(area)
        ns.append(populations(prepare_driven_state(b, dev, drive, (-8.0, 8.0), 0.01, sched), b)[0])
    assert ns[1] / ns[0] == pytest.approx(4.0, rel=1e-3)


def test_driven_truncation_overflow():
    b = build_basis(1, 2)
    dev = DeviceParams(n_sites=1, u=0.0, delta_g=0.0, **LOSSLESS)
    drive = DriveSpec(HBAR * 2.0 / math.sqrt(2 * math.pi), 0.0, (0,), 0.0, 1.0)
    sched = DetuningSchedule.constant([-3 * G], -8.0, 8.0)
    with pytest.raises(TruncationOverflow):
        prepare_driven_state(b, dev, drive, (-8.0, 8.0), 0.01, sched)


# --- trajectories ----------------------------------------------------------


def test_mcwf_lossless_single_trajectory_is_unitary():
    b = build_basis(2, 1)
    dev = DeviceParams(n_sites=2, **LOSSLESS)
    sched = DetuningSchedule.constant([-3 * G] * 2, 0.0, 30.0)
    psi = np.zeros(b.dim, complex)
    psi[b.state_index([1, 0])] = 1
    traj = mcwf_evolve(QuantumState(b, psi), sched, dev, (0.0, 30.0), 0.01, 1, 0, 1.0)
    ref = evolve(QuantumState(b, psi), sched, dev, (0.0, 30.0), 0.01, 1.0)
    assert np.max(np.abs(traj.n_lp - ref.n_lp)) < 1e-7
    assert traj.jumps == []


def test_mcwf_jump_time_distribution():
    b = build_basis(1, 1)
    dev = DeviceParams(n_sites=1, Q=2.2e4)
    gamma = lp_site_params(-3 * G, dev).Gamma / HBAR
    t_end = 20.0 / gamma
    t_end = math.ceil(t_end)
    sched = DetuningSchedule.constant([-3 * G], 0.0, t_end)
    psi = np.zeros(b.dim, complex)
    psi[b.state_index([1])] = 1
    n = 10_000
    traj = mcwf_evolve(QuantumState(b, psi), sched, dev, (0.0, t_end), 0.01, n, 7, float(t_end))
    times = np.array([t for _, t, _ in traj.jumps])
    assert len(times) == n
    se = (1 / gamma) / math.sqrt(n)
    assert abs(times.mean() - 1 / gamma) < 3 * se


def test_mcwf_batching_does_not_change_results():
    cfg, b, sched = _small_protocol()
    psi = prepare_sf_state(b, 3, density=False)
    a = mcwf_evolve(psi, sched, cfg.device, (0.0, 20.0), 0.01, 12, 3, 5.0, batch_size=12)
    c = mcwf_evolve(psi, sched, cfg.device, (0.0, 20.0), 0.01, 12, 3, 5.0, batch_size=5)
    assert np.allclose(a.n_lp, c.n_lp, rtol=0, atol=1e-13)
    assert a.jumps == c.jumps


def test_mcwf_needs_pure_state():
    cfg, b, sched = _small_protocol()
    with pytest.raises(ValueError):
        mcwf_evolve(prepare_sf_state(b, 3), sched, cfg.device, (0.0, 1.0), 0.01, 2)
