"""Master-equation time evolution, initial states and quantum-jump trajectories.

The integrator is fixed-step RK4 on the density matrix.  Undriven runs conserve
particle number in the Hamiltonian and only lower it through decay, so the
density matrix is stored as one dense block per total-number sector and the
diagonal part of the generator is integrated exactly (integrating-factor RK4);
driven runs fall back to plain RK4 on the full matrix.
"""
from __future__ import annotations

import functools
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, sparse

from . import _kernels
from . import observables as obs
from .fockspace import FockBasis, SparseOperator, lowering
from .model import (
    HBAR,
    DecayChannel,
    DetuningSchedule,
    DeviceParams,
    DriveSpec,
    build_decay_channels,
    build_hamiltonian,
    lattice_bonds,
    lp_arrays,
    lp_site_params,
    site_bonds,
)


class DivergenceError(RuntimeError):
    """Integration left the physically valid region (trace drift, truncation)."""


class TruncationOverflow(RuntimeError):
    pass


# --- states ---------------------------------------------------------------


@dataclass
class QuantumState:
    basis: FockBasis
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=complex)
        d = self.basis.dim
        if self.data.shape not in ((d,), (d, d)):
            raise ValueError(f"state shape {self.data.shape} does not match basis dimension {d}")

    @property
    def is_pure(self) -> bool:
        return self.data.ndim == 1

    def density_matrix(self) -> "QuantumState":
        if not self.is_pure:
            return self
        return QuantumState(self.basis, np.outer(self.data, self.data.conj()))

    def trace(self) -> float:
        if self.is_pure:
            return float(np.vdot(self.data, self.data).real)
        return float(np.trace(self.data).real)

    def validate(self, herm_tol=1e-10, trace_tol=1e-8, pos_tol=1e-8) -> dict:
        """Check the state invariants; returns the measured deviations."""
        if self.is_pure:
            norm_err = abs(np.linalg.norm(self.data) - 1.0)
            if norm_err > 1e-10:
                raise ValueError(f"state vector norm off by {norm_err:.3g}")
            return {"norm_error": norm_err}
        rho = self.data
        herm = float(np.max(np.abs(rho - rho.conj().T))) if rho.size else 0.0
        tr = abs(np.trace(rho).real - 1.0)
        min_eig = float(np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min())
        report = {"hermiticity": herm, "trace_error": tr, "min_eigenvalue": min_eig}
        if herm > herm_tol or tr > trace_tol or min_eig < -pos_tol:
            raise ValueError(f"invalid density matrix: {report}")
        return report


def vacuum(basis: FockBasis, density: bool = True) -> QuantumState:
    psi = np.zeros(basis.dim, dtype=complex)
    psi[basis.state_index([0] * basis.n_sites)] = 1.0
    state = QuantumState(basis, psi)
    return state.density_matrix() if density else state


def prepare_sf_state(basis: FockBasis, n: int, density: bool = True) -> QuantumState:
    """Normalized (sum_i p_i^dag / sqrt(N))^n |vac>: n bosons in the uniform k=0 mode."""
    if n > basis.max_total or (basis.max_per_site is not None and n > basis.max_per_site):
        raise TruncationOverflow(f"{n} particles do not fit the basis truncation")
    N = basis.n_sites
    create = sum((lowering(basis, i).adjoint().matrix for i in range(N)), sparse.csr_matrix((basis.dim, basis.dim)))
    create = create / math.sqrt(N)
    psi = vacuum(basis, density=False).data
    for _ in range(n):
        psi = create @ psi
    psi = psi / np.linalg.norm(psi)
    state = QuantumState(basis, psi)
    return state.density_matrix() if density else state


# --- checkpoints ----------------------------------------------------------

_HEADER = struct.Struct("<QQ")


def save_checkpoint(path, state: QuantumState) -> None:
    """Binary layout: two little-endian uint64 (rows, cols), then rows*cols
    complex values in row-major order as little-endian float64 (re, im) pairs."""
    data = state.data if not state.is_pure else state.data[:, None]
    rows, cols = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(rows, cols))
        fh.write(np.ascontiguousarray(data, dtype="<c16").tobytes())


def load_checkpoint(path, basis: FockBasis) -> QuantumState:
    with open(path, "rb") as fh:
        rows, cols = _HEADER.unpack(fh.read(_HEADER.size))
        raw = np.frombuffer(fh.read(), dtype="<c16")
    if raw.size != rows * cols:
        raise ValueError("checkpoint payload length does not match header")
    data = raw.reshape(rows, cols).astype(complex)
    if cols == 1:
        data = data[:, 0]
    return QuantumState(basis, data)


# --- generic right-hand side ----------------------------------------------


def lindblad_rhs(rho, H: SparseOperator, channels: Sequence[DecayChannel]) -> np.ndarray:
    """d rho / d tau = -i/hbar [H, rho] + sum_k g_k (L rho L^dag - {L^dag L, rho}/2)."""
    rho = rho.data if isinstance(rho, QuantumState) else np.asarray(rho)
    if rho.shape != (H.dim, H.dim):
        raise ValueError(f"dimension mismatch: rho {rho.shape} vs H {H.dim}")
    Hm = H.matrix
    out = (-1j / HBAR) * (Hm @ rho - (Hm.conj().T @ rho.conj().T).conj().T)
    for ch in channels:
        if ch.op.dim != H.dim:
            raise ValueError("decay operator dimension mismatch")
        if ch.rate == 0:
            continue
        L = ch.op.matrix
        Ld = L.conj().T
        LdL = (Ld @ L).tocsr()
        LrL = L @ (L @ rho.conj().T).conj().T  # L rho L^dag
        anti = LdL @ rho + (LdL @ rho.conj().T).conj().T
        out += ch.rate * (LrL - 0.5 * anti)
    return out


# --- sector-blocked Liouvillian ------------------------------------------


@dataclass
class _Sector:
    total: int
    idx: np.ndarray  # basis indices
    offset: int
    occ: np.ndarray  # (d, n_sites) float
    pairs: np.ndarray  # n (n - 1) / 2
    hop: Optional[sparse.csr_matrix] = None
    hop_base: Optional[np.ndarray] = None
    hop_bond: Optional[np.ndarray] = None
    feeds: list = field(default_factory=list)  # (site, tgt, src, sqrt weights)
    scratch: Optional[np.ndarray] = None
    zeros: Optional[np.ndarray] = None

    @property
    def dim(self) -> int:
        return len(self.idx)


class SectorLiouvillian:
    """Number-conserving Lindbladian with one dense block per total-number sector.

    Hopping within a sector is a sparse matrix whose nonzero pattern is fixed;
    its values are refreshed from the bond amplitudes at every stage.  Decay
    feeds sector N from sector N+1 by a gather with precomputed indices.
    """

    def __init__(self, basis: FockBasis, bonds: Sequence[tuple[int, int]]):
        self.basis = basis
        self.bonds = list(bonds)
        totals = basis.totals
        self.sectors: list[_Sector] = []
        offset = 0
        local = np.empty(basis.dim, dtype=np.int64)
        for N in range(basis.max_total + 1):
            idx = np.flatnonzero(totals == N)
            if len(idx) == 0:
                continue
            local[idx] = np.arange(len(idx))
            occ = basis.states[idx].astype(float)
            self.sectors.append(_Sector(N, idx, offset, occ, 0.5 * occ * (occ - 1)))
            offset += len(idx) ** 2
        self.size = offset
        self._by_total = {s.total: s for s in self.sectors}
        for sec in self.sectors:
            self._build_hopping(sec, local)
            up = self._by_total.get(sec.total + 1)
            if up is not None:
                self._build_feeds(sec, up)
            sec.scratch = np.zeros((sec.dim, sec.dim), dtype=complex)
            sec.zeros = np.zeros(sec.dim)

    def _build_hopping(self, sec: _Sector, local: np.ndarray) -> None:
        rows, cols, vals, bond_ids = [], [], [], []
        states = self.basis.states
        for b, (i, j) in enumerate(self.bonds):
            for src, dst in ((i, j), (j, i)):  # p_dst^dag p_src
                for k, gidx in enumerate(sec.idx):
                    occ = states[gidx]
                    if occ[src] == 0:
                        continue
                    new = occ.copy()
                    new[src] -= 1
                    new[dst] += 1
                    target = self.basis.index.get(tuple(int(x) for x in new))
                    if target is None:
                        continue
                    rows.append(local[target])
                    cols.append(k)
                    vals.append(math.sqrt(occ[src] * (occ[dst] + 1)))
                    bond_ids.append(b)
        if not rows:
            return
        order = np.lexsort((cols, rows))
        rows = np.asarray(rows)[order]
        cols = np.asarray(cols)[order]
        d = sec.dim
        indptr = np.zeros(d + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        indptr = np.cumsum(indptr)
        sec.hop_base = np.asarray(vals, dtype=float)[order]
        sec.hop_bond = np.asarray(bond_ids, dtype=np.int64)[order]
        sec.hop = sparse.csr_matrix((sec.hop_base.astype(complex), cols, indptr), shape=(d, d))

    def _build_feeds(self, sec: _Sector, up: _Sector) -> None:
        up_local = {int(g): k for k, g in enumerate(up.idx)}
        states = self.basis.states
        for site in range(self.basis.n_sites):
            tgt, src, w = [], [], []
            for k, gidx in enumerate(sec.idx):
                occ = states[gidx].copy()
                occ[site] += 1
                j = self.basis.index.get(tuple(int(x) for x in occ))
                if j is None:
                    continue
                tgt.append(k)
                src.append(up_local[j])
                w.append(math.sqrt(occ[site]))
            if tgt:
                sec.feeds.append((site, np.asarray(tgt, dtype=np.int64), np.asarray(src, dtype=np.int64),
                                  np.asarray(w, dtype=float)))

    # layout helpers
    def block(self, y: np.ndarray, sec: _Sector) -> np.ndarray:
        return y[sec.offset: sec.offset + sec.dim**2].reshape(sec.dim, sec.dim)

    def to_blocks(self, rho: np.ndarray, tol: float = 1e-12) -> np.ndarray:
        y = np.zeros(self.size, dtype=complex)
        kept = 0.0
        for sec in self.sectors:
            blk = rho[np.ix_(sec.idx, sec.idx)]
            self.block(y, sec)[:] = blk
            kept += float(np.sum(np.abs(blk) ** 2))
        lost = float(np.sum(np.abs(rho) ** 2)) - kept
        if lost > tol:
            raise ValueError("state has coherences between particle-number sectors")
        return y

    def to_full(self, y: np.ndarray) -> np.ndarray:
        rho = np.zeros((self.basis.dim, self.basis.dim), dtype=complex)
        for sec in self.sectors:
            rho[np.ix_(sec.idx, sec.idx)] = self.block(y, sec)
        return rho

    def populations(self, y: np.ndarray) -> np.ndarray:
        fl = self.flat
        return y[fl["diag"]].real @ fl["occ"]

    def trace(self, y: np.ndarray) -> float:
        return float(sum(np.trace(self.block(y, sec)).real for sec in self.sectors))

    def rhs(self, y: np.ndarray, eps, U, rates, J, out: np.ndarray, diagonal: bool = True) -> np.ndarray:
        """Write L(rho) into ``out``; eps, U in ueV, rates in 1/ps, J per bond in ueV.

        With ``diagonal=False`` the on-site energies and the anticommutator
        damping are left out, leaving hopping and the feed from the sector above.
        """
        for sec in self.sectors:
            R = self.block(y, sec)
            O = self.block(out, sec)
            if diagonal:
                E = sec.occ @ eps + sec.pairs @ U
                G = sec.occ @ rates
            else:
                E = G = sec.zeros
            if sec.hop is not None:
                kdata = -J[sec.hop_bond] * sec.hop_base
                _kernels.hop_product(sec.hop.indptr, sec.hop.indices, kdata,
                                     R.view(np.float64), sec.scratch.view(np.float64))
            _kernels.coherent_and_damping(R, sec.scratch, E, G, 1.0 / HBAR, O, sec.hop is not None)
            if sec.feeds:
                up = self.block(y, self._by_total[sec.total + 1])
                for site, tgt, src, w in sec.feeds:
                    if rates[site]:
                        _kernels.feed(O, up, tgt, src, w, rates[site])
        return out

    @functools.cached_property
    def flat(self) -> dict:
        """All sector data concatenated for the fused step kernel."""
        sec_off = np.array([sec.offset for sec in self.sectors], dtype=np.int64)
        sec_dim = np.array([sec.dim for sec in self.sectors], dtype=np.int64)
        hp_row, indptr, indices, base, bond = [], [], [], [], []
        nnz = 0
        rows = 0
        for sec in self.sectors:
            hp_row.append(rows)
            if sec.hop is not None:
                indptr.append(sec.hop.indptr.astype(np.int64) + nnz)
                indices.append(sec.hop.indices.astype(np.int64))
                base.append(sec.hop_base)
                bond.append(sec.hop_bond)
                nnz += sec.hop.nnz
            else:
                indptr.append(np.full(sec.dim + 1, nnz, dtype=np.int64))
            rows += sec.dim + 1
        pos = {sec.total: k for k, sec in enumerate(self.sectors)}
        fd_ptr, fd_sec, fd_up, fd_site, fd_tgt, fd_src, fd_w = [0], [], [], [], [], [], []
        for k, sec in enumerate(self.sectors):
            for site, tgt, src, w in sec.feeds:
                fd_sec.append(k)
                fd_up.append(pos[sec.total + 1])
                fd_site.append(site)
                fd_tgt.append(tgt)
                fd_src.append(src)
                fd_w.append(w)
                fd_ptr.append(fd_ptr[-1] + len(tgt))

        def cat(parts, dtype):
            return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

        return {
            "sec_off": sec_off, "sec_dim": sec_dim, "hp_row": np.array(hp_row, dtype=np.int64),
            "hp_indptr": cat(indptr, np.int64), "hp_indices": cat(indices, np.int64),
            "hp_base": cat(base, np.float64), "hp_bond": cat(bond, np.int64),
            "fd_ptr": np.array(fd_ptr, dtype=np.int64), "fd_sec": np.array(fd_sec, dtype=np.int64),
            "fd_up": np.array(fd_up, dtype=np.int64), "fd_site": np.array(fd_site, dtype=np.int64),
            "fd_tgt": cat(fd_tgt, np.int64), "fd_src": cat(fd_src, np.int64), "fd_w": cat(fd_w, np.float64),
            "occ": np.concatenate([sec.occ for sec in self.sectors]),
            "pairs": np.concatenate([sec.pairs for sec in self.sectors]),
            "Y": np.zeros(max(sec.dim for sec in self.sectors) ** 2, dtype=complex),
            "diag": np.concatenate([sec.offset + np.arange(sec.dim) * (sec.dim + 1) for sec in self.sectors]),
        }

    def integrated_populations(self, y: np.ndarray, eps, U, rates, J) -> np.ndarray:
        """int_0^inf <n_i>(s) ds under a constant generator, starting from blocks ``y``.

        Solves L X = -rho sector by sector from the top, where the sector
        generator is a Sylvester operator; sector 0 (vacuum) is skipped since
        it carries no population.
        """
        X = np.zeros_like(y)
        result = np.zeros(self.basis.n_sites)
        for sec in sorted(self.sectors, key=lambda s: -s.total):
            if sec.total == 0:
                continue
            E = sec.occ @ eps + sec.pairs @ U
            G = sec.occ @ rates
            if np.any(G <= 0):
                raise ValueError("population never decays: tail integral diverges")
            Hs = np.diag(E).astype(complex)
            if sec.hop is not None:
                sec.hop.data[:] = -J[sec.hop_bond] * sec.hop_base
                Hs = Hs + sec.hop.toarray()
            a = (-1j / HBAR) * Hs - 0.5 * np.diag(G)
            q = -self.block(y, sec).copy()
            if sec.feeds:
                upX = self.block(X, self._by_total[sec.total + 1])
                for site, tgt, src, w in sec.feeds:
                    q[np.ix_(tgt, tgt)] -= rates[site] * np.outer(w, w) * upX[np.ix_(src, src)]
            Xs = linalg.solve_sylvester(a, a.conj().T, q)
            self.block(X, sec)[:] = Xs
            result += np.real(np.diagonal(Xs)) @ sec.occ
        return result


# --- evolution records ------------------------------------------------------


@dataclass
class EvolutionRecord:
    times: np.ndarray
    snapshots: list
    n_lp: np.ndarray  # (samples, sites)
    photon_rates: np.ndarray  # (samples, sites), 1/ps
    emitted: np.ndarray  # (samples, sites) cumulative cavity emission
    initial_populations: np.ndarray
    checkpoints: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    final_state: Optional[QuantumState] = None
    stderr: dict = field(default_factory=dict)
    jumps: list = field(default_factory=list)

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("sample times must be strictly increasing")


@dataclass(frozen=True)
class ObservableConfig:
    site_pair: tuple[int, int] = (0, 2)
    visibility_sites: Optional[tuple[int, ...]] = None
    emission_sites: Optional[tuple[int, ...]] = None
    phi_samples: int = 720


class _CoefficientTable:
    """Schedule-derived coefficients on the quarter-step grid, evaluated in one vectorized pass.

    Row q holds the values at t0 + q * dt / 4.
    """

    def __init__(self, schedule: DetuningSchedule, dev: DeviceParams, bonds, t0: float, dt: float, n_steps: int):
        times = np.minimum(t0 + 0.25 * dt * np.arange(4 * n_steps + 1), schedule.t_end)
        deltas = np.stack([schedule.evaluate(i, times) for i in range(schedule.n_sites)], axis=1)
        p = lp_arrays(deltas, dev)
        self.eps, self.U, self.A = p["eps"], p["U"], p["A"]
        self.rates = p["Gamma"] / HBAR
        if bonds:
            left = [i for i, _ in bonds]
            right = [j for _, j in bonds]
            self.J = dev.t_hop * self.A[:, left] * self.A[:, right]
        else:
            self.J = np.zeros((len(times), 0))

        # Simpson exponents of the diagonal generator over each half step
        lam_site = (-1j / HBAR) * self.eps - 0.5 * self.rates
        lam_pair = (-1j / HBAR) * self.U
        h = dt / 12.0
        self.site_first = h * (lam_site[0:-1:4] + 4 * lam_site[1::4] + lam_site[2::4])
        self.site_second = h * (lam_site[2::4] + 4 * lam_site[3::4] + lam_site[4::4])
        self.pair_first = h * (lam_pair[0:-1:4] + 4 * lam_pair[1::4] + lam_pair[2::4])
        self.pair_second = h * (lam_pair[2::4] + 4 * lam_pair[3::4] + lam_pair[4::4])

    def __call__(self, q: int):
        return self.eps[q], self.U[q], self.rates[q], self.J[q], self.A[q]


def _photon_rates(A: np.ndarray, dev: DeviceParams) -> np.ndarray:
    return A**2 * dev.photon_width / HBAR


def _sample_grid(tau_span, dt, sample_every):
    t0, t1 = map(float, tau_span)
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round((t1 - t0) / dt))
    if n_steps < 1 or not math.isclose(n_steps * dt, t1 - t0, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("time span must be an integer number of steps")
    stride = max(1, int(round(sample_every / dt)))
    return t0, n_steps, stride


def evolve(
    rho0: QuantumState,
    schedule: DetuningSchedule,
    device: DeviceParams,
    tau_span=(0.0, 300.0),
    dt: float = 0.01,
    sample_every: float = 1.0,
    drive: Optional[DriveSpec] = None,
    observe: ObservableConfig = ObservableConfig(),
    checkpoint_times: Sequence[float] = (),
    trace_tol: float = 1e-6,
    snapshots: bool = True,
) -> EvolutionRecord:
    """Integrate the master equation with a fixed step.

    Undriven runs use integrating-factor RK4 on number-sector blocks: the diagonal
    part (site energies, interactions, widths) is propagated exactly and RK4 covers
    hopping and jump feeds. Driven runs use plain RK4 on the dense matrix.
    Coefficients come from the schedule at every substage. Trace is never
    renormalized; the drift is reported.
    """
    basis = rho0.basis
    if schedule.n_sites != basis.n_sites or device.n_sites != basis.n_sites:
        raise ValueError("schedule, device and basis disagree on the number of sites")
    t0, n_steps, stride = _sample_grid(tau_span, dt, sample_every)
    bonds = lattice_bonds(basis.n_sites, device.boundary)
    rho0 = rho0.density_matrix()

    engine = None
    if drive is None:
        try:
            engine = SectorLiouvillian(basis, bonds)
            y = engine.to_blocks(rho0.data)
        except ValueError:
            engine = None
    if engine is None:
        y = rho0.data.reshape(-1).copy()

    def full(yv):
        return engine.to_full(yv) if engine else yv.reshape(basis.dim, basis.dim)

    def pops(yv):
        if engine:
            return engine.populations(yv)
        return np.real(np.diagonal(yv.reshape(basis.dim, basis.dim))) @ basis.states

    def trace(yv):
        return engine.trace(yv) if engine else float(np.trace(yv.reshape(basis.dim, basis.dim)).real)

    table = _CoefficientTable(schedule, device, bonds, t0, dt, n_steps) if engine else None

    def f(tau, yv, out):
        params = [lp_site_params(d, device) for d in schedule.evaluate_all(tau)]
        H = build_hamiltonian(basis, params, site_bonds(params, device), drive, tau)
        chans = build_decay_channels(basis, params)
        out[:] = lindblad_rhs(yv.reshape(basis.dim, basis.dim), H, chans).reshape(-1)
        return out

    emission_sites = observe.emission_sites or tuple(range(basis.n_sites))
    vis_sites = observe.visibility_sites or tuple(range(basis.n_sites))
    cap_support = basis.max_total

    times, snaps, n_rows, rate_rows, emit_rows = [], [], [], [], []
    checkpoints = {}
    pending_ckpt = sorted(float(t) for t in checkpoint_times)
    emitted = np.zeros(basis.n_sites)
    n_now = np.ascontiguousarray(pops(y), dtype=float)
    n_initial = n_now.copy()
    A_now = lp_arrays(schedule.evaluate_all(t0), device)["A"]
    max_drift = 0.0

    def sample(step, tau):
        nonlocal max_drift
        drift = abs(trace(y) - 1.0)
        max_drift = max(max_drift, drift)
        if drift > trace_tol:
            raise DivergenceError(f"trace drift {drift:.3g} at t={tau:.3f} ps")
        if np.any(n_now > cap_support + 1e-9) or not np.all(np.isfinite(n_now)):
            raise DivergenceError(f"populations {n_now} outside truncation support at t={tau:.3f} ps")
        rates_ph = _photon_rates(A_now, device)
        times.append(tau)
        n_rows.append(n_now.copy())
        rate_rows.append(rates_ph)
        emit_rows.append(emitted.copy())
        if snapshots:
            n0 = n_initial[list(emission_sites)].sum()
            eta = emitted[list(emission_sites)].sum() / n0 if n0 > 0 else None
            with np.errstate(divide="ignore", invalid="ignore"):
                eta_sites = np.where(n_initial > 0, emitted / np.where(n_initial > 0, n_initial, 1), np.nan)
            state = QuantumState(basis, full(y))
            snaps.append(obs.snapshot(state, tau, device, schedule, observe.site_pair, vis_sites,
                                      observe.phi_samples, eta, eta_sites))
        while pending_ckpt and pending_ckpt[0] <= tau + 0.5 * dt:
            pending_ckpt.pop(0)
            checkpoints[tau] = QuantumState(basis, full(y).copy())

    k1, k2, k3, k4 = (np.empty_like(y) for _ in range(4))
    tmp = np.empty_like(y)
    sample(0, t0)
    if engine:
        fl = engine.flat
        phot = _photon_rates(table.A, device)
        step = 0
        while step < n_steps:
            nxt = min(n_steps, (step // stride + 1) * stride)
            _kernels.lawson_run(
                y, step, nxt - step, dt, table.site_first, table.site_second, table.pair_first,
                table.pair_second, table.J, table.rates, phot, fl["occ"], fl["pairs"], fl["diag"], 1.0 / HBAR,
                fl["sec_off"], fl["sec_dim"], fl["hp_row"], fl["hp_indptr"], fl["hp_indices"], fl["hp_base"],
                fl["hp_bond"], fl["fd_ptr"], fl["fd_sec"], fl["fd_up"], fl["fd_site"], fl["fd_tgt"],
                fl["fd_src"], fl["fd_w"], k1, k2, k3, k4, tmp, fl["Y"], emitted, n_now)
            step = nxt
            A_now = table.A[4 * step]
            sample(step, t0 + step * dt)
    else:
        for step in range(1, n_steps + 1):
            tau = t0 + (step - 1) * dt
            tau_mid = t0 + (step - 0.5) * dt
            tau_new = t0 + step * dt
            f(tau, y, k1)
            _kernels.rk4_stage(y, k1, 0.5 * dt, tmp)
            f(tau_mid, tmp, k2)
            _kernels.rk4_stage(y, k2, 0.5 * dt, tmp)
            f(tau_mid, tmp, k3)
            _kernels.rk4_stage(y, k3, dt, tmp)
            f(tau_new, tmp, k4)
            _kernels.rk4_combine(y, k1, k2, k3, k4, dt)
            flux_before = _photon_rates(A_now, device) * n_now
            A_now = lp_arrays(schedule.evaluate_all(tau_new), device)["A"]
            n_now = pops(y)
            emitted += 0.5 * dt * (flux_before + _photon_rates(A_now, device) * n_now)
            if step % stride == 0 or step == n_steps:
                sample(step, tau_new)

    final = QuantumState(basis, full(y))
    diagnostics = {"steps": n_steps, "max_trace_drift": max_drift, "dt": dt,
                   "engine": "sector" if engine else "dense"}
    record = EvolutionRecord(np.array(times), snaps, np.array(n_rows), np.array(rate_rows),
                             np.array(emit_rows), n_initial, checkpoints, diagnostics, final)
    record.engine = engine
    record.final_blocks = y if engine else None
    return record


def emission_tail(record: EvolutionRecord, schedule: DetuningSchedule, device: DeviceParams,
                  tol: float = 1e-9) -> np.ndarray:
    """Cavity emission per site still to come after the end of ``record``.

    Valid only when the schedule is fully switched by the last sample, so the
    generator is constant from there on.
    """
    t_end = float(record.times[-1])
    if not schedule.is_static_after(t_end, tol):
        raise ValueError("schedule still switching at the end of the record")
    engine = getattr(record, "engine", None)
    if engine is None:
        basis = record.final_state.basis
        engine = SectorLiouvillian(basis, lattice_bonds(basis.n_sites, device.boundary))
        y = engine.to_blocks(record.final_state.data)
    else:
        y = record.final_blocks
    bonds = engine.bonds
    p = lp_arrays(schedule.final_deltas(), device)
    rates = p["Gamma"] / HBAR
    J = np.array([device.t_hop * p["A"][i] * p["A"][j] for i, j in bonds])
    integral = engine.integrated_populations(y, p["eps"], p["U"], rates, J)
    return _photon_rates(p["A"], device) * integral


# --- driven preparation ---------------------------------------------------


def prepare_driven_state(basis: FockBasis, device: DeviceParams, drive: DriveSpec,
                         tau_span, dt: float = 0.01, schedule: Optional[DetuningSchedule] = None,
                         overflow_tol: float = 1e-4) -> QuantumState:
    """Evolve the vacuum under the driven Hamiltonian and return the final state."""
    if schedule is None:
        schedule = DetuningSchedule.constant([-3 * device.g] * basis.n_sites, tau_span[0], tau_span[1])
    rec = evolve(vacuum(basis), schedule, device, tau_span, dt, sample_every=tau_span[1] - tau_span[0],
                 drive=drive, snapshots=False)
    state = rec.final_state
    cap = basis.site_cap
    probs = np.real(np.diagonal(state.data))
    top = probs[(basis.states == cap).any(axis=1)].sum()
    if top > overflow_tol:
        raise TruncationOverflow(f"population {top:.3g} at the per-site cap {cap}")
    return state


# --- quantum-jump trajectories ----------------------------------------------


class JumpStepTooLarge(ValueError):
    pass


def _trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


@dataclass
class _TrajectoryBatch:
    sums: dict
    sq_sums: dict
    eta: np.ndarray  # per-trajectory emitted per site
    jumps: list
    max_jump_prob: float


def _run_batch(args) -> _TrajectoryBatch:
    (psi0, basis, schedule, device, tau_span, dt, stride, indices, seed) = args
    t0, n_steps, _ = _sample_grid(tau_span, dt, dt)
    bonds = lattice_bonds(basis.n_sites, device.boundary)
    lows = [lowering(basis, i).matrix for i in range(basis.n_sites)]
    # hopping pattern on the full basis with per-entry bond labels
    hop_ops = [(lows[i].conj().T @ lows[j] + lows[j].conj().T @ lows[i]).tocoo() for i, j in bonds]
    if hop_ops:
        rows = np.concatenate([h.row for h in hop_ops])
        cols = np.concatenate([h.col for h in hop_ops])
        base = np.concatenate([h.data.real for h in hop_ops])
        bond_of = np.concatenate([np.full(h.nnz, b) for b, h in enumerate(hop_ops)])
        order = np.lexsort((cols, rows))
        rows, cols, base, bond_of = rows[order], cols[order], base[order], bond_of[order]
        indptr = np.concatenate([[0], np.cumsum(np.bincount(rows, minlength=basis.dim))])
        K = sparse.csr_matrix((base.astype(complex), cols, indptr), shape=(basis.dim, basis.dim))
    else:
        K = None
    occ = basis.states.astype(float)
    pairs = 0.5 * occ * (occ - 1)
    n_traj = len(indices)
    psi = np.repeat(psi0[:, None], n_traj, axis=1).astype(complex)
    rngs = [_trajectory_rng(seed, k) for k in indices]
    thresholds = np.array([r.random() for r in rngs])
    jumps = []
    max_p = 0.0

    table = _CoefficientTable(schedule, device, bonds, t0, dt, n_steps)

    def diag_rate(ci):
        eps, U, rates, _, _ = ci
        return (-1j / HBAR) * (occ @ eps + pairs @ U) - 0.5 * (occ @ rates)

    def hop(ci, Y):
        if K is None:
            return np.zeros_like(Y)
        K.data[:] = -ci[3][bond_of] * base
        return (-1j / HBAR) * (K @ Y)

    n_samples = n_steps // stride + 1
    keys = ("n", "nn")
    sums = {k: np.zeros((n_samples, basis.n_sites)) for k in keys}
    sq_sums = {k: np.zeros((n_samples, basis.n_sites)) for k in keys}
    emitted = np.zeros((n_traj, basis.n_sites))

    def expectations(Y):
        prob = np.abs(Y) ** 2
        norm = prob.sum(axis=0)
        prob /= norm
        return prob.T @ occ, prob.T @ (occ * (occ - 1))

    def record(slot, Y):
        n, nn = expectations(Y)
        for key, val in (("n", n), ("nn", nn)):
            sums[key][slot] += val.sum(axis=0)
            sq_sums[key][slot] += (val**2).sum(axis=0)
        return n

    A_now = lp_arrays(schedule.evaluate_all(t0), device)["A"]
    n_now = record(0, psi)
    for step in range(1, n_steps + 1):
        norm_before = np.sum(np.abs(psi) ** 2, axis=0)
        # integrating-factor RK4, as in the density-matrix engine
        c = [table(4 * (step - 1) + j) for j in range(5)]
        lam = [diag_rate(ci) for ci in c]
        u1 = np.exp(dt / 12.0 * (lam[0] + 4 * lam[1] + lam[2]))[:, None]
        u2 = np.exp(dt / 12.0 * (lam[2] + 4 * lam[3] + lam[4]))[:, None]
        uf = u1 * u2
        k1 = hop(c[0], psi)
        k2 = hop(c[2], u1 * (psi + 0.5 * dt * k1))
        k3 = hop(c[2], u1 * psi + 0.5 * dt * k2)
        k4 = hop(c[4], uf * psi + dt * (u2 * k3))
        psi = uf * (psi + dt / 6.0 * k1) + dt / 3.0 * (u2 * (k2 + k3)) + dt / 6.0 * k4
        rates = c[4][2]
        norm_after = np.sum(np.abs(psi) ** 2, axis=0)
        p_step = 1.0 - norm_after / norm_before
        max_p = max(max_p, float(p_step.max()))
        if max_p > 0.1:
            raise JumpStepTooLarge(f"single-step jump probability {max_p:.3f} exceeds 0.1; reduce dt")
        tau_new = t0 + step * dt
        for col in np.flatnonzero(norm_after < thresholds):
            v = psi[:, col]
            weights = rates * (np.abs(v) ** 2 @ occ)
            total = weights.sum()
            if total <= 0:
                continue
            rng = rngs[col]
            site = int(np.searchsorted(np.cumsum(weights) / total, rng.random(), side="right"))
            site = min(site, basis.n_sites - 1)
            v = lows[site] @ v
            psi[:, col] = v / np.linalg.norm(v)
            thresholds[col] = rng.random()
            jumps.append((indices[col], tau_new, site))
        flux_before = _photon_rates(A_now, device) * n_now
        A_now = table(4 * step)[4]
        n_new, _ = expectations(psi)
        emitted += 0.5 * dt * (flux_before + _photon_rates(A_now, device) * n_new)
        n_now = n_new
        if step % stride == 0:
            record(step // stride, psi)
    return _TrajectoryBatch(sums, sq_sums, emitted, jumps, max_p)


def mcwf_evolve(
    psi0: QuantumState,
    schedule: DetuningSchedule,
    device: DeviceParams,
    tau_span=(0.0, 300.0),
    dt: float = 0.01,
    n_traj: int = 100,
    seed: int = 0,
    sample_every: float = 1.0,
    batch_size: int = 500,
    workers: int = 1,
) -> EvolutionRecord:
    """Quantum-jump unraveling of the same master equation.

    Each trajectory draws from its own generator seeded by (seed, index); a jump
    happens when the squared norm of the non-Hermitian evolution drops below a
    uniform threshold, with the channel chosen in proportion to rate * <n_i>.
    Results are reduced in trajectory order and do not depend on batching.
    """
    if not psi0.is_pure:
        raise ValueError("MCWF needs a pure initial state")
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    basis = psi0.basis
    t0, n_steps, stride = _sample_grid(tau_span, dt, sample_every)
    indices = list(range(n_traj))
    chunks = [indices[i:i + batch_size] for i in range(0, n_traj, batch_size)]
    jobs = [(psi0.data, basis, schedule, device, tau_span, dt, stride, c, seed) for c in chunks]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(_run_batch, jobs))
    else:
        batches = [_run_batch(j) for j in jobs]

    n_samples = n_steps // stride + 1
    times = t0 + dt * stride * np.arange(n_samples)
    mean, se = {}, {}
    for key in ("n", "nn"):
        s = sum(b.sums[key] for b in batches)
        s2 = sum(b.sq_sums[key] for b in batches)
        m = s / n_traj
        var = np.maximum(s2 / n_traj - m**2, 0.0) * n_traj / max(n_traj - 1, 1)
        mean[key] = m
        se[key] = np.sqrt(var / n_traj)
    emitted = np.concatenate([b.eta for b in batches])  # (n_traj, sites)
    jumps = sorted(j for b in batches for j in b.jumps)

    # g2 as a ratio of means; standard error by the delta method using the
    # per-sample covariance is approximated with independent errors.
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = mean["nn"] / mean["n"] ** 2
        g2_se = np.abs(g2) * np.sqrt((se["nn"] / mean["nn"]) ** 2 + (2 * se["n"] / mean["n"]) ** 2)
    A = np.array([lp_arrays(schedule.evaluate_all(t), device)["A"] for t in times])
    rates = _photon_rates(A, device)
    n0 = mean["n"][0]
    final_emitted = emitted.mean(axis=0)
    record = EvolutionRecord(times, [], mean["n"], rates, np.zeros_like(mean["n"]), n0)
    record.emitted[-1] = final_emitted
    record.stderr = {"n_lp": se["n"], "nn": se["nn"], "g2": g2_se,
                     "emitted": emitted.std(axis=0, ddof=1) / math.sqrt(n_traj) if n_traj > 1 else np.zeros(basis.n_sites)}
    record.g2 = g2
    record.nn = mean["nn"]
    record.per_trajectory_emitted = emitted
    record.jumps = jumps
    record.diagnostics = {"steps": n_steps, "n_traj": n_traj, "max_jump_probability": max(b.max_jump_prob for b in batches)}
    return record
