import math

import numpy as np
import pytest

from polariton_mott.experiments import (
    NoCrossingError,
    PhaseSweepConfig,
    ProtocolConfig,
    build_schedule,
    disorder_offsets,
    disorder_study,
    interaction_ratio,
    phase_sweep,
    run_protocol,
)
from polariton_mott.model import DeviceParams, ghz_to_ueV

G = 2500.0


# --- configuration ------------------------------------------------------------


def test_protocol_config_rejects_early_trigger():
    with pytest.raises(ValueError):
        ProtocolConfig(trigger_time=110.0)  # switch still 50% unfinished
    with pytest.raises(ValueError):
        ProtocolConfig(trigger_time=400.0)


def test_protocol_config_rejects_bad_values():
    with pytest.raises(ValueError):
        ProtocolConfig(trigger_sites="half")
    with pytest.raises(ValueError):
        ProtocolConfig(disorder_sigma=-1.0)
    with pytest.raises(ValueError):
        ProtocolConfig(delta_start_g=1.0)
    with pytest.raises(ValueError):
        ProtocolConfig(dt=0.0)


def test_protocol_config_syncs_device_lattice():
    cfg = ProtocolConfig(n_sites=4, boundary="open")
    assert cfg.device.n_sites == 4 and cfg.device.boundary == "open"


@pytest.mark.parametrize("mode,expected", [("odd", [0, 2]), ("even", [1, 3]), ("all", [0, 1, 2, 3]), ("none", [])])
def test_trigger_indices(mode, expected):
    assert ProtocolConfig(n_sites=4, trigger_sites=mode).trigger_indices() == expected


def test_schedule_structure():
    cfg = ProtocolConfig(n_sites=4)
    s = build_schedule(cfg)
    assert np.allclose(s.evaluate_all(0.0), -3 * G, rtol=1e-4)  # tanh tail of the first switch
    assert np.allclose(s.evaluate_all(199.0), 4 * G, rtol=1e-4)
    late = s.evaluate_all(260.0)
    assert np.allclose(late[[0, 2]], -4 * G, rtol=1e-7)
    assert np.allclose(late[[1, 3]], 4 * G, rtol=1e-7)


def test_disorder_offsets():
    assert np.array_equal(disorder_offsets(4, 0.0, 7), np.zeros(4))
    a = disorder_offsets(4, 7.58, 3)
    assert np.array_equal(a, disorder_offsets(4, 7.58, 3))
    assert not np.array_equal(a, disorder_offsets(4, 7.58, 4))
    s0 = build_schedule(ProtocolConfig(n_sites=4))
    s1 = build_schedule(ProtocolConfig(n_sites=4, disorder_sigma=7.58, disorder_seed=3))
    assert np.allclose(s1.evaluate_all(150.0) - s0.evaluate_all(150.0), a)


# --- phase sweep --------------------------------------------------------------


def test_ratio_at_superfluid_point():
    _, _, ratio = interaction_ratio(-3 * G, DeviceParams())
    assert abs(ratio - 0.13) < 0.01


def test_phase_sweep_monotone_and_ordered():
    res = phase_sweep(PhaseSweepConfig())
    t2, t20 = ghz_to_ueV(2.0), ghz_to_ueV(20.0)
    for t in (t2, t20):
        r = np.array([row["ratio"] for row in res.rows if row["t_hop_ueV"] == t])
        assert len(r) == 401 and np.all(np.diff(r) > 0)
        assert res.residuals[t] < 1e-6
    assert res.delta_c(t2) < res.delta_c(t20)


def test_phase_sweep_row_at_minus_3g():
    res = phase_sweep(PhaseSweepConfig())
    row = [r for r in res.rows if r["t_hop_ueV"] == ghz_to_ueV(20.0) and abs(r["delta_over_g"] + 3) < 1e-9]
    assert len(row) == 1
    assert row[0]["t_hop_ueV"] == pytest.approx(82.7, abs=0.05)
    assert row[0]["ratio"] == pytest.approx(0.13, abs=0.01)


def test_phase_sweep_grid_refinement():
    coarse = phase_sweep(PhaseSweepConfig(n_points=401))
    fine = phase_sweep(PhaseSweepConfig(n_points=801))
    step = 8 * G / 400
    for t, dc in coarse.crossings.items():
        assert abs(dc - fine.crossings[t]) < step


def test_phase_sweep_no_crossing():
    res = phase_sweep(PhaseSweepConfig(delta_min_g=-4.0, delta_max_g=-3.5))
    for t, dc in res.crossings.items():
        assert dc is None and res.residuals[t] is None
        with pytest.raises(NoCrossingError):
            res.delta_c(t)


# --- protocol -------------------------------------------------------------------


def test_lossless_no_trigger_conserves_number():
    dev = DeviceParams(Q=math.inf, tau_b=math.inf)
    cfg = ProtocolConfig(device=dev, n_sites=3, trigger_sites="none", t_end=200.0, complete_emission=False)
    res = run_protocol(cfg)
    total = res.record.n_lp.sum(axis=1)
    assert np.max(np.abs(total - 3.0)) < 1e-9
    assert res.summary["eta"] == 0.0


def test_protocol_summary_n3(protocol_n3):
    s = protocol_n3.summary
    assert s["g2_initial"] == pytest.approx(2 / 3, abs=1e-9)
    assert s["trace_drift"] < 1e-8
    assert 0.0 < s["eta"] <= 1.0
    assert s["eta_window"] <= s["eta"] + 1e-12


def test_protocol_deterministic():
    cfg = ProtocolConfig(n_sites=2, t_end=250.0, sample_every=5.0)
    a, b = run_protocol(cfg), run_protocol(cfg)
    assert a.summary == b.summary
    assert np.array_equal(a.record.n_lp, b.record.n_lp)


# --- disorder -------------------------------------------------------------------


def test_disorder_sigma_zero_rows_identical():
    cfg = ProtocolConfig(n_sites=2, sample_every=5.0)
    res = disorder_study(cfg, [0.0], 3)
    assert res.failures == 0 and len(res.rows) == 3
    keys = ("g2_trigger", "I_final", "eta")
    assert len({tuple(r[k] for k in keys) for r in res.rows}) == 1
    clean = run_protocol(cfg).summary
    assert res.rows[0]["eta"] == clean["eta"]
    assert res.stats[0.0]["eta"] == (clean["eta"], 0.0)


def test_disorder_seed_failures_reported():
    cfg = ProtocolConfig(n_sites=2, sample_every=5.0, dt=60.0)  # unstable step
    res = disorder_study(cfg, [0.0], 2)
    assert res.failures == 2
    assert all(r["error"] for r in res.rows)
    assert res.stats[0.0]["eta"] == (None, None)


@pytest.mark.long
def test_disorder_j_over_10_n4():
    cfg = ProtocolConfig(n_sites=4)
    res = disorder_study(cfg, [7.58], 8)
    assert res.failures == 0 and len(res.rows) == 8
    assert all(r[k] is not None for r in res.rows for k in ("g2_trigger", "I_final", "eta"))
