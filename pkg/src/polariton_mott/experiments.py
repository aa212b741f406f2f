"""The three numerical studies: phase-boundary sweep, generation protocol, disorder robustness."""
from __future__ import annotations

import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .evolution import (
    EvolutionRecord,
    ObservableConfig,
    emission_tail,
    evolve,
    mcwf_evolve,
    prepare_sf_state,
)
from .fockspace import build_basis
from .model import (
    DetuningSchedule,
    DeviceParams,
    TanhStep,
    ghz_to_ueV,
    lattice_bonds,
    lp_site_params,
    switch_rate,
)
from .observables import quantum_efficiency

log = logging.getLogger(__name__)

CRITICAL_RATIO = 2.04
TRIGGER_MODES = ("odd", "even", "all", "none")


class NoCrossingError(ValueError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    device: DeviceParams = DeviceParams()
    n_sites: int = 6
    boundary: str = "periodic"
    delta_start_g: float = -3.0
    delta_mi_g: float = 4.0
    delta_trigger_g: float = -4.0
    switch_center: float = 100.0  # ps
    switch_speed_ghz: float = 10.0
    trigger_time: float = 200.0  # ps
    trigger_speed_ghz: float = 1000.0
    trigger_sites: str = "odd"
    t_end: float = 300.0
    dt: float = 0.01
    sample_every: float = 1.0
    disorder_sigma: float = 0.0  # ueV
    disorder_seed: int = 0
    site_pair: tuple[int, int] = (1, 3)  # 1-based
    complete_emission: bool = True

    def __post_init__(self):
        if not self.delta_start_g < 0 < self.delta_mi_g:
            raise ValueError("need delta_start < 0 < delta_MI")
        if self.trigger_sites not in TRIGGER_MODES:
            raise ValueError(f"trigger_sites must be one of {TRIGGER_MODES}")
        if self.trigger_sites != "none":
            if not 0 < self.trigger_time < self.t_end:
                raise ValueError("trigger time outside the simulation window")
            residual = math.exp(-2 * switch_rate(self.switch_speed_ghz) * (self.trigger_time - self.switch_center))
            if self.trigger_time <= self.switch_center or residual > 1e-3:
                raise ValueError("trigger must come after the adiabatic switch has completed")
        if self.disorder_sigma < 0:
            raise ValueError("disorder sigma must be non-negative")
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.dt <= 0 or self.sample_every <= 0:
            raise ValueError("dt and sample_every must be positive")
        if self.device.n_sites != self.n_sites or self.device.boundary != self.boundary:
            object.__setattr__(self, "device", replace(self.device, n_sites=self.n_sites, boundary=self.boundary))

    @property
    def g(self) -> float:
        return self.device.g

    def trigger_indices(self) -> list[int]:
        """0-based indices of the sites switched back at the trigger."""
        N = self.n_sites
        return {
            "odd": list(range(0, N, 2)),
            "even": list(range(1, N, 2)),
            "all": list(range(N)),
            "none": [],
        }[self.trigger_sites]

    def odd_indices(self) -> list[int]:
        return list(range(0, self.n_sites, 2))

    def pair_indices(self) -> tuple[int, int]:
        return (self.site_pair[0] - 1, self.site_pair[1] - 1)


def disorder_offsets(n_sites: int, sigma: float, seed: int) -> np.ndarray:
    if sigma == 0:
        return np.zeros(n_sites)
    return np.random.default_rng(seed).normal(0.0, sigma, n_sites)


def build_schedule(cfg: ProtocolConfig) -> DetuningSchedule:
    g = cfg.g
    start, mi, trig = cfg.delta_start_g * g, cfg.delta_mi_g * g, cfg.delta_trigger_g * g
    sweep = TanhStep(start, mi, cfg.switch_center, switch_rate(cfg.switch_speed_ghz))
    trig_sites = set(cfg.trigger_indices())
    steps = []
    for i in range(cfg.n_sites):
        chain = [sweep]
        if i in trig_sites:
            chain.append(TanhStep(mi, trig, cfg.trigger_time, switch_rate(cfg.trigger_speed_ghz)))
        steps.append(tuple(chain))
    offsets = disorder_offsets(cfg.n_sites, cfg.disorder_sigma, cfg.disorder_seed)
    return DetuningSchedule((start,) * cfg.n_sites, tuple(steps), 0.0, cfg.t_end, tuple(offsets))


def observable_config(cfg: ProtocolConfig) -> ObservableConfig:
    emit = cfg.trigger_indices() or list(range(cfg.n_sites))
    return ObservableConfig(
        site_pair=cfg.pair_indices(),  # out-of-range pairs leave I undefined
        visibility_sites=tuple(cfg.odd_indices()),
        emission_sites=tuple(emit),
    )


@dataclass
class ProtocolResult:
    config: ProtocolConfig
    record: EvolutionRecord
    schedule: DetuningSchedule
    summary: dict
    eta_sites: np.ndarray = field(default=None)


def _nearest_snapshot(record: EvolutionRecord, t: float):
    k = int(np.argmin(np.abs(record.times - t)))
    return record.snapshots[k]


def post_trigger_coherence(record: EvolutionRecord, cfg: ProtocolConfig, after: Optional[float] = None) -> float:
    """Largest |<p_i^dag p_j>| over bonded odd/even pairs after the trigger."""
    if after is None:
        after = cfg.trigger_time + 5.0 / switch_rate(cfg.trigger_speed_ghz)
    bonds = [(i, j) for i, j in lattice_bonds(cfg.n_sites, cfg.boundary) if (i % 2) != (j % 2)]
    best = 0.0
    for snap in record.snapshots:
        if snap.time < after:
            continue
        C = snap.extras["lp_coherence"]
        for i, j in bonds:
            best = max(best, abs(C[i, j]))
    return best


def run_protocol(cfg: ProtocolConfig = ProtocolConfig()) -> ProtocolResult:
    """Prepare the superfluid state with one polariton per site and run both switches."""
    n = cfg.n_sites
    basis = build_basis(n, n)
    schedule = build_schedule(cfg)
    rho0 = prepare_sf_state(basis, n)
    ocfg = observable_config(cfg)
    record = evolve(rho0, schedule, cfg.device, (0.0, cfg.t_end), cfg.dt, cfg.sample_every, observe=ocfg)

    emit = list(ocfg.emission_sites)
    n0 = record.initial_populations[emit].sum()
    eta_window = quantum_efficiency(record, cfg.device, emit, check_refinement=False)
    eta_step = record.emitted[-1][emit].sum() / n0
    emitted_total = record.emitted[-1].copy()
    eta = eta_step
    tail = None
    if cfg.complete_emission:
        try:
            tail = emission_tail(record, schedule, cfg.device)
            emitted_total = emitted_total + tail
            eta = emitted_total[emit].sum() / n0
        except ValueError as exc:
            log.warning("emission tail not added: %s", exc)

    trig_snap = _nearest_snapshot(record, cfg.trigger_time) if cfg.trigger_sites != "none" else record.snapshots[-1]
    g2_trig = [v for v in trig_snap.g2 if v is not None]
    g2_trigger = max(g2_trig) if g2_trig else None
    if g2_trigger is not None and g2_trigger > 0.1:
        warnings.warn(f"g2(0) = {g2_trigger:.3f} at the trigger: sweep not adiabatic", RuntimeWarning)
    final = record.snapshots[-1]
    g2_final = [final.g2[i] for i in emit if final.g2[i] is not None]
    summary = {
        "eta": float(eta),
        "eta_window": float(eta_window),
        "eta_stepwise": float(eta_step),
        "V_final": final.V,
        "I_final": final.I,
        "g2_at_trigger": g2_trigger,
        "g2_final_mean": float(np.mean(g2_final)) if g2_final else None,
        "g2_initial": record.snapshots[0].g2[0],
        "trace_drift": float(record.diagnostics["max_trace_drift"]),
        "coherence_post_trigger": post_trigger_coherence(record, cfg) if cfg.trigger_sites != "none" else None,
    }
    with np.errstate(divide="ignore", invalid="ignore"):
        eta_sites = emitted_total / record.initial_populations
    return ProtocolResult(cfg, record, schedule, summary, eta_sites)


# --- phase sweep -----------------------------------------------------------


@dataclass(frozen=True)
class PhaseSweepConfig:
    device: DeviceParams = DeviceParams()
    t_hop_ghz: tuple[float, ...] = (2.0, 20.0)
    delta_min_g: float = -4.0
    delta_max_g: float = 4.0
    n_points: int = 401
    critical_ratio: float = CRITICAL_RATIO

    def __post_init__(self):
        if not self.delta_max_g > self.delta_min_g:
            raise ValueError("detuning grid must be increasing")
        if self.n_points < 2:
            raise ValueError("need at least two grid points")
        if self.critical_ratio <= 0:
            raise ValueError("critical ratio must be positive")

    def grid(self) -> np.ndarray:
        return np.linspace(self.delta_min_g, self.delta_max_g, self.n_points) * self.device.g


@dataclass
class PhaseSweepResult:
    rows: list
    crossings: dict  # t_hop (ueV) -> delta_c (ueV) or None
    residuals: dict

    def delta_c(self, t_hop: float) -> float:
        """Critical detuning (ueV) for one tunneling energy; NoCrossingError if the grid never reaches it."""
        dc = self.crossings[t_hop]
        if dc is None:
            raise NoCrossingError(f"U/J stays below the critical ratio for t_hop = {t_hop}")
        return dc


def interaction_ratio(delta: float, dev: DeviceParams) -> tuple[float, float, float]:
    p = lp_site_params(delta, dev)
    J = dev.t_hop * p.A**2
    return p.U, J, p.U / J


def _bisect(f, lo, hi, target, tol=1e-12, max_iter=200):
    flo = f(lo) - target
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = f(mid) - target
        if abs(fm) < tol or hi - lo < 1e-12 * max(1.0, abs(mid)):
            return mid
        if (fm < 0) == (flo < 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def phase_sweep(cfg: PhaseSweepConfig = PhaseSweepConfig()) -> PhaseSweepResult:
    rows, crossings, residuals = [], {}, {}
    grid = cfg.grid()
    g = cfg.device.g
    for f_ghz in cfg.t_hop_ghz:
        dev = replace(cfg.device, t_hop=ghz_to_ueV(f_ghz))
        ratios = []
        for d in grid:
            p = lp_site_params(d, dev)
            U, J, ratio = interaction_ratio(d, dev)
            ratios.append(ratio)
            rows.append({"t_hop_ueV": dev.t_hop, "delta_over_g": d / g, "A": p.A, "B": p.B,
                         "U_ueV": U, "J_ueV": J, "ratio": ratio})
        ratios = np.array(ratios)
        if np.any(np.diff(ratios) <= 0):
            raise ArithmeticError(f"U/J not strictly increasing for t_hop = {dev.t_hop}")
        above = np.flatnonzero(ratios >= cfg.critical_ratio)
        if len(above) == 0 or above[0] == 0:
            crossings[dev.t_hop] = None
            residuals[dev.t_hop] = None
            continue
        k = above[0]
        dc = _bisect(lambda x: interaction_ratio(x, dev)[2], grid[k - 1], grid[k], cfg.critical_ratio)
        crossings[dev.t_hop] = dc
        residuals[dev.t_hop] = abs(interaction_ratio(dc, dev)[2] - cfg.critical_ratio)
    return PhaseSweepResult(rows, crossings, residuals)


# --- disorder ----------------------------------------------------------------


def _disorder_job(args):
    cfg = args
    try:
        res = run_protocol(cfg)
        s = res.summary
        return {"sigma_ueV": cfg.disorder_sigma, "seed": cfg.disorder_seed,
                "g2_trigger": s["g2_at_trigger"], "I_final": s["I_final"], "eta": s["eta"], "error": None}
    except Exception as exc:  # reported per seed
        return {"sigma_ueV": cfg.disorder_sigma, "seed": cfg.disorder_seed,
                "g2_trigger": None, "I_final": None, "eta": None, "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class DisorderResult:
    rows: list
    stats: dict  # sigma -> {metric: (mean, std)}
    failures: int


def disorder_study(cfg: ProtocolConfig, sigmas: Sequence[float], n_seeds: int,
                   base_seed: int = 0, workers: int = 1) -> DisorderResult:
    """Protocol runs with Gaussian static site offsets for every (sigma, seed)."""
    if any(s < 0 for s in sigmas):
        raise ValueError("sigma must be >= 0")
    jobs = [replace(cfg, disorder_sigma=float(s), disorder_seed=base_seed + k)
            for s in sigmas for k in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_disorder_job, jobs))
    else:
        rows = [_disorder_job(j) for j in jobs]
    stats = {}
    for s in sigmas:
        sel = [r for r in rows if r["sigma_ueV"] == s and r["error"] is None]
        entry = {}
        for key in ("g2_trigger", "I_final", "eta"):
            vals = np.array([r[key] for r in sel if r[key] is not None], dtype=float)
            entry[key] = (float(vals.mean()), float(vals.std())) if len(vals) else (None, None)
        stats[float(s)] = entry
    failures = sum(r["error"] is not None for r in rows)
    return DisorderResult(rows, stats, failures)


# --- MCWF cross-check ----------------------------------------------------------


@dataclass
class McwfComparison:
    master: ProtocolResult
    mcwf: EvolutionRecord
    rows: list
    eta_master: float
    eta_mcwf: float
    eta_mcwf_se: float


def mcwf_comparison(cfg: ProtocolConfig, n_traj: int, seed: int = 0, workers: int = 1,
                    batch_size: int = 2000) -> McwfComparison:
    """Run the same protocol as a density matrix and as quantum-jump trajectories."""
    cfg = replace(cfg, complete_emission=False)
    master = run_protocol(cfg)
    basis = build_basis(cfg.n_sites, cfg.n_sites)
    psi0 = prepare_sf_state(basis, cfg.n_sites, density=False)
    traj = mcwf_evolve(psi0, master.schedule, cfg.device, (0.0, cfg.t_end), cfg.dt, n_traj, seed,
                       cfg.sample_every, batch_size=batch_size, workers=workers)
    rows = []
    for k, t in enumerate(traj.times):
        me = master.record.snapshots[k]
        for i in range(cfg.n_sites):
            rows.append({"time_ps": float(t), "site": i + 1, "observable": "n_lp",
                         "master_eq": float(me.n_lp[i]), "mcwf_mean": float(traj.n_lp[k, i]),
                         "mcwf_se": float(traj.stderr["n_lp"][k, i])})
            rows.append({"time_ps": float(t), "site": i + 1, "observable": "g2",
                         "master_eq": me.g2[i], "mcwf_mean": float(traj.g2[k, i]),
                         "mcwf_se": float(traj.stderr["g2"][k, i])})
    emit = list(observable_config(cfg).emission_sites)
    n0 = master.record.initial_populations[emit].sum()
    eta_master = float(master.record.emitted[-1][emit].sum() / n0)
    per_traj = traj.per_trajectory_emitted[:, emit].sum(axis=1) / n0
    eta_mcwf = float(per_traj.mean())
    eta_se = float(per_traj.std(ddof=1) / math.sqrt(n_traj)) if n_traj > 1 else 0.0
    return McwfComparison(master, traj, rows, eta_master, eta_mcwf, eta_se)
