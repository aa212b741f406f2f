"""Figures of merit: populations, g2(0), quantum efficiency, visibility, HOM indistinguishability.

Photon operators are represented inside the lower-polariton space as
a_i = -A_i p_i; the sign drops out of every quantity computed here.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fockspace import FockBasis, SparseOperator, lowering
from .model import DetuningSchedule, DeviceParams, lp_arrays

POPULATION_FLOOR = 1e-8


class UndefinedStatistic(ValueError):
    """A normalized statistic whose denominator is below the population floor."""


@dataclass
class ObservableSnapshot:
    time: float
    n_lp: np.ndarray
    n_photon: np.ndarray
    g2: list  # per site, None where undefined
    coherence: np.ndarray  # C_mn = <a_m^dag a_n>
    V: Optional[float] = None
    I: Optional[float] = None
    eta: Optional[float] = None
    eta_sites: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)


def _matrix(state) -> np.ndarray:
    return state.data if hasattr(state, "data") else np.asarray(state)


def expect(op: SparseOperator, state) -> complex:
    """<op> for a density matrix or a state vector."""
    data = _matrix(state)
    m = op.matrix if isinstance(op, SparseOperator) else op
    if data.ndim == 1:
        return complex(np.vdot(data, m @ data))
    return complex(m.multiply(data.T).sum())


@functools.lru_cache(maxsize=8)
def _lowering_ops(basis: FockBasis) -> tuple:
    return tuple(lowering(basis, i).matrix for i in range(basis.n_sites))


@functools.lru_cache(maxsize=8)
def _coherence_ops(basis: FockBasis) -> tuple:
    lows = _lowering_ops(basis)
    return tuple(tuple((lows[m].conj().T @ lows[n]).tocsr() for n in range(basis.n_sites))
                 for m in range(basis.n_sites))


def populations(state, basis: FockBasis) -> np.ndarray:
    """<p_i^dag p_i> for every site."""
    data = _matrix(state)
    probs = np.abs(data) ** 2 if data.ndim == 1 else np.real(np.diagonal(data))
    return probs @ basis.states


def pair_populations(state, basis: FockBasis) -> np.ndarray:
    """<p_i^dag p_i^dag p_i p_i> = <n_i (n_i - 1)> for every site."""
    data = _matrix(state)
    probs = np.abs(data) ** 2 if data.ndim == 1 else np.real(np.diagonal(data))
    occ = basis.states
    return probs @ (occ * (occ - 1))


def g2_zero(state, basis: FockBasis, site: int, floor: float = POPULATION_FLOOR) -> float:
    n = populations(state, basis)[site]
    if n <= floor:
        raise UndefinedStatistic(f"site {site} population {n:.3g} below floor {floor:g}")
    return float(pair_populations(state, basis)[site] / n**2)


def lp_coherence(state, basis: FockBasis) -> np.ndarray:
    """Matrix <p_m^dag p_n>."""
    ops = _coherence_ops(basis)
    N = basis.n_sites
    out = np.empty((N, N), dtype=complex)
    for m in range(N):
        for n in range(m, N):
            out[m, n] = expect(ops[m][n], state)
            out[n, m] = np.conj(out[m, n])
    return out


def photon_coherence(state, basis: FockBasis, A: Sequence[float]) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    return np.outer(A, A) * lp_coherence(state, basis)


def far_field_profile(coherence: np.ndarray, sites: Sequence[int], phis: np.ndarray) -> np.ndarray:
    """n_a(phi) = (1/N) sum_{mn} C_mn exp(i (m - n) phi) restricted to ``sites``."""
    sites = np.asarray(sites)
    C = coherence[np.ix_(sites, sites)]
    pos = sites.astype(float)
    phase = np.exp(1j * np.subtract.outer(pos, pos)[None, :, :] * phis[:, None, None])
    return np.real(np.einsum("pmn,mn->p", phase, C)) / len(sites)


def visibility(state, basis: FockBasis, A: Sequence[float], phi_samples: int = 720,
               sites: Optional[Sequence[int]] = None, floor: float = POPULATION_FLOOR):
    """Far-field interference contrast; returns (V, phi at max, phi at min)."""
    if sites is None:
        sites = range(basis.n_sites)
    sites = list(sites)
    C = photon_coherence(state, basis, A)
    return visibility_from_coherence(C, sites, phi_samples, floor)


def visibility_from_coherence(C: np.ndarray, sites: Sequence[int], phi_samples: int = 720,
                              floor: float = POPULATION_FLOOR):
    phis = 2.0 * np.pi * np.arange(phi_samples) / phi_samples
    prof = far_field_profile(C, sites, phis)
    step = phis[1] - phis[0]

    idx = np.asarray(sites)
    sub = C[np.ix_(idx, idx)] / len(sites)
    d = np.subtract.outer(idx, idx).astype(float)

    def refine(k, sign):
        # Newton polish of the grid extremum; the profile is a trig polynomial
        x = phis[k]
        best = (sign * prof[k], x)
        for _ in range(20):
            e = sub * np.exp(1j * d * x)
            g1 = np.real(np.sum(1j * d * e))
            g2 = np.real(np.sum(-d * d * e))
            if sign * g2 <= 0.0:
                break
            nx = x - g1 / g2
            if abs(nx - phis[k]) > step:
                break
            if abs(nx - x) < 1e-13:
                x = nx
                break
            x = nx
        val = sign * np.real(np.sum(sub * np.exp(1j * d * x)))
        best = min(best, (val, x))
        return sign * best[0], best[1] % (2 * np.pi)

    p_hi, phi_hi = refine(int(np.argmax(prof)), -1.0)
    p_lo, phi_lo = refine(int(np.argmin(prof)), 1.0)
    p_lo = max(p_lo, 0.0)
    denom = p_hi + p_lo
    if denom < floor:
        raise UndefinedStatistic(f"far-field intensity {denom:.3g} below floor")
    return float((p_hi - p_lo) / denom), float(phi_hi), float(phi_lo)


def indistinguishability(state, basis: FockBasis, A: Sequence[float], site_pair=(0, 2),
                         floor: float = POPULATION_FLOOR) -> float:
    """1 - <c1^dag c3^dag c3 c1> / (<c1^dag c1><c3^dag c3>) behind a 50/50 beamsplitter."""
    i, j = site_pair
    if i == j:
        raise ValueError("site pair must be two distinct sites")
    lows = _lowering_ops(basis)
    a1 = -A[i] * lows[i]
    a3 = -A[j] * lows[j]
    c1 = (a1 + a3) / np.sqrt(2.0)
    c3 = (-a1 + a3) / np.sqrt(2.0)
    d1 = expect(c1.conj().T @ c1, state).real
    d3 = expect(c3.conj().T @ c3, state).real
    if d1 < floor or d3 < floor:
        raise UndefinedStatistic("beamsplitter output population below floor")
    coinc = expect(c1.conj().T @ c3.conj().T @ c3 @ c1, state).real
    return float(1.0 - coinc / (d1 * d3))


def quantum_efficiency(record, device: DeviceParams, sites: Optional[Sequence[int]] = None,
                       check_refinement: bool = True) -> float:
    """Fraction of initially injected polaritons leaving through the cavity mode.

    Trapezoidal integral of A_i^2 (omega_a/Q) <n_i> over the sampled record,
    normalized by the initial population of the selected sites.
    """
    times = np.asarray(record.times)
    if sites is None:
        sites = range(record.n_lp.shape[1])
    sites = list(sites)
    rates = record.photon_rates[:, sites]
    flux = (rates * record.n_lp[:, sites]).sum(axis=1)
    n0 = record.n_lp[0, sites].sum()
    if n0 <= 0:
        raise UndefinedStatistic("no initial population on the selected sites")
    eta = np.trapezoid(flux, times) / n0
    if check_refinement and len(times) >= 5:
        coarse = np.trapezoid(flux[::2], times[::2])
        if len(times) % 2 == 0:  # keep the coarse grid on the same window
            coarse += 0.5 * (flux[-2] + flux[-1]) * (times[-1] - times[-2])
        if abs(coarse / n0 - eta) > 1e-3:
            raise UndefinedStatistic("sampling too coarse: halving the grid moves eta by > 1e-3")
    return float(eta)


def snapshot(state, time: float, device: DeviceParams, schedule: DetuningSchedule,
             site_pair=(0, 2), visibility_sites: Optional[Sequence[int]] = None,
             phi_samples: int = 720, eta: Optional[float] = None,
             eta_sites: Optional[np.ndarray] = None) -> ObservableSnapshot:
    """All figures of merit for one state; undefined statistics become None."""
    basis = state.basis
    A = lp_arrays(schedule.evaluate_all(time), device)["A"]
    n_lp = populations(state, basis)
    g2 = []
    for i in range(basis.n_sites):
        try:
            g2.append(g2_zero(state, basis, i))
        except UndefinedStatistic:
            g2.append(None)
    C_lp = lp_coherence(state, basis)
    C = np.outer(A, A) * C_lp
    if visibility_sites is None:
        visibility_sites = list(range(basis.n_sites))
    try:
        V = visibility_from_coherence(C, visibility_sites, phi_samples)[0]
    except UndefinedStatistic:
        V = None
    I = None
    if max(site_pair) < basis.n_sites and site_pair[0] != site_pair[1]:
        try:
            I = indistinguishability(state, basis, A, site_pair)
        except UndefinedStatistic:
            I = None
    return ObservableSnapshot(time, n_lp, A**2 * n_lp, g2, C, V, I, eta, eta_sites,
                              {"lp_coherence": C_lp, "A": A})
