"""Lower-polariton lattice parameters, detuning schedules and Hamiltonian assembly.

Units throughout: energies in micro-eV, times in ps.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .fockspace import FockBasis, SparseOperator, lowering

HBAR = 658.2119569  # ueV ps
PLANCK_UEV_PER_GHZ = 4.135667696  # h in ueV / GHz


def ghz_to_ueV(f_ghz: float) -> float:
    """Energy h*f of a frequency given in GHz."""
    return PLANCK_UEV_PER_GHZ * f_ghz


def switch_rate(speed_ghz: float) -> float:
    """Angular rate (1/ps) used inside tanh for a switching speed in GHz."""
    return 2.0 * math.pi * speed_ghz * 1e-3


def hopfield(delta, g):
    """Photonic (A) and excitonic (B) Hopfield amplitudes of the lower polariton.

    Accepts scalars or arrays for ``delta``; ``g`` must be positive.
    """
    if np.any(np.asarray(g) <= 0):
        raise ValueError("coupling g must be positive")
    delta = np.asarray(delta, dtype=float)
    root = np.hypot(delta, 2.0 * g)
    # delta + root loses precision for delta << -g; use the conjugate form there
    s = np.where(delta >= 0, delta + root, (2.0 * g) ** 2 / np.where(root - delta == 0, 1.0, root - delta))
    norm = np.hypot(s, 2.0 * g)
    A = 2.0 * g / norm
    B = s / norm
    if A.ndim == 0:
        return float(A), float(B)
    return A, B


def lower_branch_energy(delta, g):
    """LP energy relative to the bare cavity photon: -(delta + sqrt(delta^2 + 4g^2))/2."""
    delta = np.asarray(delta, dtype=float)
    root = np.hypot(delta, 2.0 * g)
    eps = np.where(delta >= 0, -(delta + root) / 2.0, -(2.0 * g) ** 2 / (2.0 * np.where(root - delta == 0, 1.0, root - delta)))
    return float(eps) if eps.ndim == 0 else eps


def derive_interactions(E_B: float, a_B: float, wavelength: float, g: float) -> tuple[float, float]:
    """Exciton-exciton repulsion u and saturation Delta g for a trap of area pi*(lambda/2)^2.

    E_B and g in ueV, a_B and wavelength in nm; returns (u, delta_g) in ueV.
    """
    for name, v in (("E_B", E_B), ("a_B", a_B), ("wavelength", wavelength), ("g", g)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    area = math.pi * (wavelength / 2.0) ** 2
    u = 2.2 * E_B * math.pi * a_B**2 / area
    delta_g = 4.0 * g * math.pi * a_B**2 / area
    return u, delta_g


@dataclass(frozen=True)
class DeviceParams:
    g: float = 2500.0
    t_hop: float = ghz_to_ueV(20.0)
    Q: float = 1e6
    tau_b: float = 500.0
    hbar_omega_a: float = 1.596e6
    E_B: float = 10_000.0
    a_B: float = 10.0
    wavelength: float = 222.0
    u: float = 200.0
    delta_g: float = 90.0
    n_sites: int = 6
    boundary: str = "periodic"
    interactions_derived: bool = False

    def __post_init__(self):
        for name in ("g", "Q", "tau_b", "hbar_omega_a", "E_B", "a_B", "wavelength"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.t_hop < 0 or self.u < 0 or self.delta_g < 0:
            raise ValueError("t_hop, u and delta_g must be non-negative")
        if self.Q < 1:
            raise ValueError("Q must be >= 1")
        if self.n_sites < 1:
            raise ValueError("n_sites must be >= 1")
        if self.boundary not in ("periodic", "open"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.interactions_derived:
            u, dg = derive_interactions(self.E_B, self.a_B, self.wavelength, self.g)
            if not (math.isclose(u, self.u, rel_tol=1e-9) and math.isclose(dg, self.delta_g, rel_tol=1e-9)):
                raise ValueError("derived interactions inconsistent with E_B, a_B, wavelength, g")

    @classmethod
    def with_derived_interactions(cls, **kw) -> "DeviceParams":
        base = cls(**kw)
        u, dg = derive_interactions(base.E_B, base.a_B, base.wavelength, base.g)
        return replace(base, u=u, delta_g=dg, interactions_derived=True)

    def scaled(self, **kw) -> "DeviceParams":
        return replace(self, **kw)

    @property
    def photon_width(self) -> float:
        """Bare cavity linewidth hbar*omega_a/Q in ueV."""
        return self.hbar_omega_a / self.Q

    @property
    def exciton_width(self) -> float:
        return HBAR / self.tau_b


@dataclass(frozen=True)
class PolaritonSiteParams:
    A: float
    B: float
    eps: float
    U: float
    Gamma: float
    delta: float


def lp_site_params(delta: float, dev: DeviceParams) -> PolaritonSiteParams:
    A, B = hopfield(delta, dev.g)
    eps = lower_branch_energy(delta, dev.g)
    U = dev.u * B**4 + 4.0 * dev.delta_g * B**3 * A
    Gamma = A**2 * dev.photon_width + B**2 * dev.exciton_width
    return PolaritonSiteParams(A, B, eps, U, Gamma, float(delta))


def lp_arrays(deltas, dev: DeviceParams) -> dict[str, np.ndarray]:
    """Vectorized lp_site_params: arrays A, B, eps, U, Gamma for many detunings."""
    deltas = np.asarray(deltas, dtype=float)
    A, B = hopfield(deltas, dev.g)
    A = np.asarray(A)
    B = np.asarray(B)
    eps = np.asarray(lower_branch_energy(deltas, dev.g))
    U = dev.u * B**4 + 4.0 * dev.delta_g * B**3 * A
    Gamma = A**2 * dev.photon_width + B**2 * dev.exciton_width
    return {"A": A, "B": B, "eps": eps, "U": U, "Gamma": Gamma}


def photon_rate(A, dev: DeviceParams):
    """Emission rate (1/ps) into the cavity output channel for photonic weight A."""
    return np.asarray(A) ** 2 * dev.photon_width / HBAR


def bond_tunneling(site_i: PolaritonSiteParams, site_j: PolaritonSiteParams, t_hop: float) -> float:
    return t_hop * site_i.A * site_j.A


def lattice_bonds(n_sites: int, boundary: str = "periodic") -> list[tuple[int, int]]:
    """Nearest-neighbour pairs (i, j), each undirected bond listed once."""
    if n_sites < 2:
        return []
    bonds = [(i, i + 1) for i in range(n_sites - 1)]
    if boundary == "periodic" and n_sites > 2:
        bonds.append((n_sites - 1, 0))
    return bonds


# --- detuning schedules -------------------------------------------------


@dataclass(frozen=True)
class TanhStep:
    """Smooth step from delta_start to delta_end centred at t_center."""

    delta_start: float
    delta_end: float
    t_center: float
    rate: float

    def profile(self, tau):
        return 0.5 * (1.0 + np.tanh(self.rate * (np.asarray(tau, dtype=float) - self.t_center)))


@dataclass(frozen=True)
class Segment:
    kind: str  # "hold" | "tanh"
    t_start: float
    t_end: float
    delta_start: float
    delta_end: float
    t_center: Optional[float] = None
    rate: Optional[float] = None


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DetuningSchedule:
    """Per-site detuning trajectories built from chained tanh steps.

    A site's detuning is ``delta0 + sum_k (end_k - start_k) * profile_k(tau)`` plus
    a static disorder offset.  Each step starts where the previous one ends, so
    the trajectory is smooth everywhere, including across step boundaries.
    """

    initial: tuple[float, ...]
    steps: tuple[tuple[TanhStep, ...], ...]
    t_start: float = 0.0
    t_end: float = 300.0
    disorder: tuple[float, ...] = ()

    def __post_init__(self):
        n = len(self.initial)
        if len(self.steps) != n:
            raise ScheduleError("steps must be given for every site")
        if not self.disorder:
            object.__setattr__(self, "disorder", (0.0,) * n)
        if len(self.disorder) != n:
            raise ScheduleError("disorder must have one offset per site")
        if self.t_end <= self.t_start:
            raise ScheduleError("empty schedule window")
        for site, chain in enumerate(self.steps):
            prev = self.initial[site]
            for st in chain:
                if not math.isclose(st.delta_start, prev, rel_tol=0, abs_tol=1e-9 * max(1.0, abs(prev))):
                    raise ScheduleError(f"site {site}: step starts at {st.delta_start}, previous ends at {prev}")
                if st.rate < 0:
                    raise ScheduleError("tanh rate must be non-negative")
                prev = st.delta_end

    @property
    def n_sites(self) -> int:
        return len(self.initial)

    @classmethod
    def constant(cls, deltas: Sequence[float], t_start=0.0, t_end=300.0, disorder=()) -> "DetuningSchedule":
        return cls(tuple(float(d) for d in deltas), tuple(() for _ in deltas), t_start, t_end, tuple(disorder))

    def with_disorder(self, offsets: Sequence[float]) -> "DetuningSchedule":
        return replace(self, disorder=tuple(float(d) for d in offsets))

    def _check_time(self, tau) -> None:
        tau = np.asarray(tau)
        span = self.t_end - self.t_start
        if np.any(tau < self.t_start - 1e-9 * span) or np.any(tau > self.t_end + 1e-9 * span):
            raise ScheduleError(f"time outside schedule window [{self.t_start}, {self.t_end}]")

    def evaluate(self, site: int, tau):
        self._check_time(tau)
        d = self.initial[site] + self.disorder[site]
        out = np.full(np.shape(tau), d, dtype=float) if np.ndim(tau) else d
        for st in self.steps[site]:
            out = out + (st.delta_end - st.delta_start) * st.profile(tau)
        return float(out) if np.ndim(out) == 0 else out

    def evaluate_all(self, tau: float) -> np.ndarray:
        """Detuning of every site at one time."""
        self._check_time(tau)
        base, flat = self._flat
        out = base.copy()
        for site, amp, center, rate in flat:
            out[site] += amp * 0.5 * (1.0 + math.tanh(rate * (tau - center)))
        return out

    @functools.cached_property
    def _flat(self):
        base = np.array(self.initial, dtype=float) + np.array(self.disorder, dtype=float)
        flat = [(site, st.delta_end - st.delta_start, st.t_center, st.rate)
                for site, chain in enumerate(self.steps) for st in chain]
        return base, flat

    def is_static_after(self, tau: float, tol: float = 1e-12) -> bool:
        """True if every step is saturated (relative residual < tol) from tau onwards."""
        for chain in self.steps:
            for st in chain:
                if st.rate == 0:
                    if st.delta_end != st.delta_start:
                        return False
                    continue
                # residual of (1 + tanh(x))/2 from 1 is ~exp(-2x)
                x = st.rate * (tau - st.t_center)
                if x <= 0 or math.exp(-2.0 * x) > tol:
                    return False
        return True

    def final_deltas(self) -> np.ndarray:
        """Asymptotic (fully switched) detunings including disorder."""
        out = []
        for site, chain in enumerate(self.steps):
            d = chain[-1].delta_end if chain else self.initial[site]
            out.append(d + self.disorder[site])
        return np.array(out)

    def segments(self, site: int) -> list[Segment]:
        """Piecewise description of one site's trajectory covering the window.

        Each tanh step owns the interval from the midpoint between its centre and
        the previous centre to the midpoint with the next one.
        """
        chain = sorted(self.steps[site], key=lambda s: s.t_center)
        if not chain:
            d = self.initial[site]
            return [Segment("hold", self.t_start, self.t_end, d, d)]
        edges = [self.t_start]
        for a, b in zip(chain, chain[1:]):
            edges.append(0.5 * (a.t_center + b.t_center))
        edges.append(self.t_end)
        return [
            Segment("tanh", lo, hi, st.delta_start, st.delta_end, st.t_center, st.rate)
            for st, lo, hi in zip(chain, edges, edges[1:])
        ]


def eval_schedule(sched: DetuningSchedule, site: int, tau: float) -> float:
    return sched.evaluate(site, tau)


# --- drive --------------------------------------------------------------


@dataclass(frozen=True)
class DriveSpec:
    """Coherent laser on the cavity mode, projected onto the LP.

    The envelope F(tau) is Gaussian (``width`` in ps) or constant when ``width``
    is None.  ``detuning`` is laser energy minus the LP energy of the first
    target site; Hamiltonians with a drive are expressed in the laser frame.
    """

    amplitude: float
    detuning: float = 0.0
    sites: tuple[int, ...] = (0,)
    t_center: float = 0.0
    width: Optional[float] = None

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError("drive amplitude must be non-negative")
        if self.width is not None and self.width <= 0:
            raise ValueError("drive width must be positive")

    def envelope(self, tau: float) -> float:
        if self.width is None:
            return self.amplitude
        return self.amplitude * math.exp(-0.5 * ((tau - self.t_center) / self.width) ** 2)

    def area(self) -> float:
        """Integral of F over all time (ueV ps)."""
        if self.width is None:
            return math.inf
        return self.amplitude * self.width * math.sqrt(2 * math.pi)


# --- Hamiltonian --------------------------------------------------------


def _diag_op(values: np.ndarray) -> SparseOperator:
    return SparseOperator(sparse.diags(values.astype(complex), format="csr"), hermitian=True)


def build_hamiltonian(
    basis: FockBasis,
    params: Sequence[PolaritonSiteParams],
    bonds: Sequence[tuple[int, int, float]],
    drive: Optional[DriveSpec] = None,
    tau: float = 0.0,
) -> SparseOperator:
    """Site-resolved Bose-Hubbard Hamiltonian for the lower polaritons.

    ``bonds`` holds (i, j, J_ij) with each undirected bond once.
    """
    if len(params) != basis.n_sites:
        raise ValueError(f"expected {basis.n_sites} site parameter sets, got {len(params)}")
    occ = basis.states.astype(float)
    frame = 0.0
    if drive is not None:
        frame = params[drive.sites[0]].eps + drive.detuning
    diag = np.zeros(basis.dim)
    for i, p in enumerate(params):
        n = occ[:, i]
        diag += (p.eps - frame) * n + 0.5 * p.U * n * (n - 1)
    H = _diag_op(diag).matrix
    lows = [lowering(basis, i).matrix for i in range(basis.n_sites)]
    for i, j, J in bonds:
        if not (0 <= i < basis.n_sites and 0 <= j < basis.n_sites):
            raise ValueError(f"bond ({i}, {j}) outside lattice")
        hop = lows[i].conj().T @ lows[j]
        H = H - J * (hop + hop.conj().T)
    if drive is not None:
        F = drive.envelope(tau)
        if F:
            for i in drive.sites:
                H = H + F * (lows[i] + lows[i].conj().T)
    return SparseOperator(H.tocsr(), hermitian=True)


def site_bonds(params: Sequence[PolaritonSiteParams], dev: DeviceParams) -> list[tuple[int, int, float]]:
    return [(i, j, bond_tunneling(params[i], params[j], dev.t_hop))
            for i, j in lattice_bonds(len(params), dev.boundary)]


@dataclass(frozen=True)
class DecayChannel:
    rate: float  # 1/ps
    op: SparseOperator
    site: int = 0


def build_decay_channels(basis: FockBasis, params: Sequence[PolaritonSiteParams]) -> list[DecayChannel]:
    if len(params) != basis.n_sites:
        raise ValueError(f"expected {basis.n_sites} site parameter sets, got {len(params)}")
    return [DecayChannel(p.Gamma / HBAR, lowering(basis, i), i) for i, p in enumerate(params)]


def params_at(sched: DetuningSchedule, dev: DeviceParams, tau: float) -> list[PolaritonSiteParams]:
    return [lp_site_params(d, dev) for d in sched.evaluate_all(tau)]
