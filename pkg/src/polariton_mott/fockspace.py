"""Truncated bosonic Fock bases and sparse second-quantized operators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from scipy import sparse

DEFAULT_DIM_LIMIT = 200_000


class BasisCapacityError(ValueError):
    """Raised when a requested basis would exceed the dimension limit."""


def count_states(n_sites: int, max_total: int, max_per_site: Optional[int] = None) -> int:
    """Number of occupation vectors with sum <= max_total and entries <= max_per_site."""
    cap = max_total if max_per_site is None else min(max_per_site, max_total)
    # ways[m] = number of vectors over the sites seen so far with sum exactly m
    ways = np.zeros(max_total + 1, dtype=object)
    ways[0] = 1
    for _ in range(n_sites):
        nxt = np.zeros_like(ways)
        for m in range(max_total + 1):
            if ways[m]:
                for k in range(0, min(cap, max_total - m) + 1):
                    nxt[m + k] += ways[m]
        ways = nxt
    return int(sum(ways))


def _enumerate(n_sites: int, remaining: int, cap: int) -> Iterator[tuple[int, ...]]:
    if n_sites == 0:
        yield ()
        return
    for k in range(0, min(cap, remaining) + 1):
        for rest in _enumerate(n_sites - 1, remaining - k, cap):
            yield (k,) + rest


@dataclass(frozen=True)
class FockBasis:
    """Occupation-number basis over ``n_sites`` bosonic modes.

    States are ordered lexicographically; ``index`` maps an occupation tuple
    back to its row.
    """

    n_sites: int
    max_total: int
    max_per_site: Optional[int] = None
    states: np.ndarray = field(repr=False, compare=False, default=None)
    index: dict = field(repr=False, compare=False, default=None)

    @property
    def dim(self) -> int:
        return len(self.states)

    @property
    def site_cap(self) -> int:
        if self.max_per_site is None:
            return self.max_total
        return min(self.max_per_site, self.max_total)

    @property
    def totals(self) -> np.ndarray:
        return self.states.sum(axis=1)

    def occupation(self, site: int) -> np.ndarray:
        self._check_site(site)
        return self.states[:, site]

    def state_index(self, occ: Sequence[int]) -> int:
        return self.index[tuple(int(n) for n in occ)]

    def _check_site(self, site: int) -> None:
        if not 0 <= site < self.n_sites:
            raise IndexError(f"site {site} out of range for {self.n_sites} sites")


def build_basis(
    n_sites: int,
    max_total: int,
    max_per_site: Optional[int] = None,
    limit: int = DEFAULT_DIM_LIMIT,
) -> FockBasis:
    """Enumerate all occupation vectors with total <= max_total (and per-site <= max_per_site)."""
    if n_sites < 1:
        raise ValueError("n_sites must be >= 1")
    if max_total < 0:
        raise ValueError("max_total must be >= 0")
    if max_per_site is not None and max_per_site < 0:
        raise ValueError("max_per_site must be >= 0")
    dim = count_states(n_sites, max_total, max_per_site)
    if dim > limit:
        raise BasisCapacityError(f"basis dimension {dim} exceeds limit {limit}")
    cap = max_total if max_per_site is None else min(max_per_site, max_total)
    states = np.array(list(_enumerate(n_sites, max_total, cap)), dtype=np.int64)
    states = states.reshape(dim, n_sites)
    index = {tuple(int(n) for n in row): k for k, row in enumerate(states)}
    return FockBasis(n_sites, max_total, max_per_site, states, index)


@dataclass(frozen=True)
class SparseOperator:
    """Sparse matrix over a Fock basis (CSR storage)."""

    matrix: sparse.csr_matrix
    hermitian: bool = False

    def __post_init__(self):
        m = sparse.csr_matrix(self.matrix, dtype=complex)
        m.sum_duplicates()
        m.eliminate_zeros()
        if m.shape[0] != m.shape[1]:
            raise ValueError(f"operator must be square, got {m.shape}")
        object.__setattr__(self, "matrix", m)
        if self.hermitian and not self.is_hermitian():
            raise ValueError("operator flagged Hermitian but H != H^dagger")

    @classmethod
    def from_entries(cls, dim: int, entries, hermitian: bool = False) -> "SparseOperator":
        entries = list(entries)
        if not entries:
            return cls(sparse.csr_matrix((dim, dim), dtype=complex), hermitian)
        rows, cols, vals = zip(*entries)
        if max(rows) >= dim or max(cols) >= dim or min(rows) < 0 or min(cols) < 0:
            raise IndexError("entry index out of range")
        m = sparse.coo_matrix((vals, (rows, cols)), shape=(dim, dim)).tocsr()
        return cls(m, hermitian)

    @classmethod
    def zeros(cls, dim: int) -> "SparseOperator":
        return cls(sparse.csr_matrix((dim, dim), dtype=complex), hermitian=True)

    @classmethod
    def identity(cls, dim: int) -> "SparseOperator":
        return cls(sparse.identity(dim, dtype=complex, format="csr"), hermitian=True)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def entries(self) -> list[tuple[int, int, complex]]:
        coo = self.matrix.tocoo()
        return sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist()))

    def element(self, row: int, col: int) -> complex:
        return complex(self.matrix[row, col])

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def adjoint(self) -> "SparseOperator":
        return SparseOperator(self.matrix.conj().T.tocsr(), self.hermitian)

    def is_hermitian(self, tol: float = 1e-12) -> bool:
        diff = self.matrix - self.matrix.conj().T
        return diff.nnz == 0 or float(abs(diff).max()) <= tol

    def _check(self, other: "SparseOperator") -> None:
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __matmul__(self, other):
        if isinstance(other, SparseOperator):
            self._check(other)
            return SparseOperator(self.matrix @ other.matrix)
        return self.matrix @ other

    def __add__(self, other: "SparseOperator") -> "SparseOperator":
        self._check(other)
        return SparseOperator(self.matrix + other.matrix, self.hermitian and other.hermitian)

    def __sub__(self, other: "SparseOperator") -> "SparseOperator":
        self._check(other)
        return SparseOperator(self.matrix - other.matrix, self.hermitian and other.hermitian)

    def __neg__(self) -> "SparseOperator":
        return SparseOperator(-self.matrix, self.hermitian)

    def __mul__(self, scalar) -> "SparseOperator":
        herm = self.hermitian and complex(scalar).imag == 0
        return SparseOperator(self.matrix * scalar, herm)

    __rmul__ = __mul__


def compose(*ops: SparseOperator) -> SparseOperator:
    """Matrix product ops[0] @ ops[1] @ ... ."""
    if not ops:
        raise ValueError("compose needs at least one operator")
    out = ops[0]
    for op in ops[1:]:
        out = out @ op
    return out


def add(*ops: SparseOperator) -> SparseOperator:
    out = ops[0]
    for op in ops[1:]:
        out = out + op
    return out


def scale(op: SparseOperator, scalar) -> SparseOperator:
    return op * scalar


def adjoint(op: SparseOperator) -> SparseOperator:
    return op.adjoint()


def commutator(a: SparseOperator, b: SparseOperator) -> SparseOperator:
    return a @ b - b @ a


def lowering(basis: FockBasis, site: int) -> SparseOperator:
    """Annihilation operator p_site; images outside the truncation set are dropped."""
    basis._check_site(site)
    rows, cols, vals = [], [], []
    for k, occ in enumerate(basis.states):
        n = int(occ[site])
        if n == 0:
            continue
        target = list(occ)
        target[site] -= 1
        j = basis.index.get(tuple(int(x) for x in target))
        if j is not None:
            rows.append(j)
            cols.append(k)
            vals.append(np.sqrt(n))
    m = sparse.csr_matrix((vals, (rows, cols)), shape=(basis.dim, basis.dim), dtype=complex)
    return SparseOperator(m)


def raising(basis: FockBasis, site: int) -> SparseOperator:
    return lowering(basis, site).adjoint()


def number(basis: FockBasis, site: int) -> SparseOperator:
    occ = basis.occupation(site).astype(float)
    return SparseOperator(sparse.diags(occ, format="csr", dtype=complex), hermitian=True)


def total_number(basis: FockBasis) -> SparseOperator:
    return SparseOperator(sparse.diags(basis.totals.astype(float), format="csr", dtype=complex),
                          hermitian=True)


def hopping(basis: FockBasis, i: int, j: int) -> SparseOperator:
    """p_i^dagger p_j."""
    return raising(basis, i) @ lowering(basis, j)


def pair_interaction(basis: FockBasis, site: int) -> SparseOperator:
    """p^dagger p^dagger p p = n(n-1), diagonal in the occupation basis."""
    n = basis.occupation(site).astype(float)
    return SparseOperator(sparse.diags(n * (n - 1), format="csr", dtype=complex), hermitian=True)
