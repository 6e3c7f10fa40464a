"""Operator algebra on truncated tensor-product Hilbert spaces.

Factor ordering used throughout the package is ``[atom_1, ..., atom_N, cavity]``.
Hamiltonians and collapse operators are stored as CSR sparse matrices; density
matrices are always dense.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

HERMITIAN_ATOL = 1e-10
TRACE_ATOL = 1e-10
PSD_FLOOR = -1e-8
THERMAL_TAIL_TOL = 1e-6


class TruncationWarning(UserWarning):
    """Photon cutoff drops more probability than the tail tolerance."""


@dataclass(frozen=True)
class HilbertDims:
    factors: tuple[int, ...]

    def __post_init__(self):
        factors = tuple(int(f) for f in self.factors)
        if not factors:
            raise ValueError("HilbertDims needs at least one factor")
        if any(f < 1 for f in factors):
            raise ValueError(f"every factor must be >= 1, got {factors}")
        object.__setattr__(self, "factors", factors)

    @property
    def total(self) -> int:
        return int(np.prod(self.factors))

    def __len__(self):
        return len(self.factors)

    def __add__(self, other: "HilbertDims") -> "HilbertDims":
        return HilbertDims(self.factors + other.factors)


def _as_dims(dims) -> HilbertDims:
    if isinstance(dims, HilbertDims):
        return dims
    if isinstance(dims, (int, np.integer)):
        return HilbertDims((int(dims),))
    return HilbertDims(tuple(dims))


@dataclass(frozen=True, eq=False)
class Operator:
    """Square complex matrix carrying its tensor-factor layout.

    ``data`` is either a ``numpy.ndarray`` or a CSR matrix. Arithmetic keeps
    sparse operands sparse.
    """

    dims: HilbertDims
    data: object

    def __post_init__(self):
        dims = _as_dims(self.dims)
        data = self.data
        if sp.issparse(data):
            data = sp.csr_matrix(data, dtype=complex)
        else:
            data = np.asarray(data, dtype=complex)
        if data.ndim != 2 or data.shape != (dims.total, dims.total):
            raise ValueError(
                f"operator shape {data.shape} does not match dims {dims.factors}"
            )
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)

    @property
    def sparsity(self) -> str:
        return "sparse-row-compressed" if sp.issparse(self.data) else "dense"

    @property
    def shape(self):
        return self.data.shape

    def to_dense(self) -> np.ndarray:
        return self.data.toarray() if sp.issparse(self.data) else np.array(self.data)

    def to_sparse(self) -> sp.csr_matrix:
        return sp.csr_matrix(self.data)

    def dag(self) -> "Operator":
        return Operator(self.dims, self.data.conj().T)

    def is_hermitian(self, atol: float = HERMITIAN_ATOL) -> bool:
        diff = self.data - self.data.conj().T
        if sp.issparse(diff):
            return diff.nnz == 0 or float(abs(diff).max()) <= atol
        return float(np.abs(diff).max(initial=0.0)) <= atol

    def _check(self, other: "Operator"):
        if self.dims != other.dims:
            raise ValueError(f"dims mismatch: {self.dims.factors} vs {other.dims.factors}")

    def __matmul__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.dims, self.data @ other.data)
        return NotImplemented

    def __add__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.dims, self.data + other.data)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, Operator):
            self._check(other)
            return Operator(self.dims, self.data - other.data)
        return NotImplemented

    def __mul__(self, scalar):
        if np.isscalar(scalar):
            return Operator(self.dims, self.data * scalar)
        return NotImplemented

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self * (1.0 / scalar)

    def __neg__(self):
        return Operator(self.dims, -self.data)

    def __repr__(self):
        return f"Operator(dims={self.dims.factors}, {self.sparsity})"


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    """Hermitian, unit-trace, positive semidefinite state.

    Construction validates all three invariants; ``info`` carries diagnostics
    such as the thermal truncation tail.
    """

    dims: HilbertDims
    data: np.ndarray
    info: Mapping = field(default_factory=dict)

    def __post_init__(self):
        dims = _as_dims(self.dims)
        data = np.array(self.data.toarray() if sp.issparse(self.data) else self.data,
                        dtype=complex)
        if data.shape != (dims.total, dims.total):
            raise ValueError(
                f"density matrix shape {data.shape} does not match dims {dims.factors}"
            )
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "info", dict(self.info))
        self._validate()

    def _validate(self):
        data = self.data
        scale = max(np.linalg.norm(data), 1.0)
        if np.linalg.norm(data - data.conj().T) > HERMITIAN_ATOL * scale:
            raise ValueError("density matrix is not Hermitian")
        tr = np.trace(data)
        if abs(tr - 1.0) > TRACE_ATOL:
            raise ValueError(f"density matrix trace {tr:.3e} != 1")
        if "min_eigenvalue" in self.info:
            min_eig = self.info["min_eigenvalue"]
        else:
            min_eig = float(np.linalg.eigvalsh(data)[0])
            self.info["min_eigenvalue"] = min_eig
        if min_eig < PSD_FLOOR:
            raise ValueError(f"density matrix has eigenvalue {min_eig:.3e} < {PSD_FLOOR}")

    @classmethod
    def from_array(cls, dims, data, *, hermitize=True, normalize=False, info=None):
        """Build from a raw array, optionally symmetrizing and renormalizing."""
        data = np.asarray(data, dtype=complex)
        if hermitize:
            data = 0.5 * (data + data.conj().T)
        if normalize:
            data = data / np.trace(data).real
        return cls(_as_dims(dims), data, info or {})

    @property
    def shape(self):
        return self.data.shape

    def as_operator(self) -> Operator:
        return Operator(self.dims, self.data)

    def diag(self) -> np.ndarray:
        return np.real(np.diagonal(self.data)).copy()

    def __repr__(self):
        return f"DensityMatrix(dims={self.dims.factors})"


def identity(n: int) -> Operator:
    return Operator(HilbertDims((n,)), sp.identity(n, dtype=complex, format="csr"))


def basis_projector(n: int, i: int, j: int | None = None) -> Operator:
    """``|i><j|`` on an ``n``-level space (``j`` defaults to ``i``)."""
    j = i if j is None else j
    if not (0 <= i < n and 0 <= j < n):
        raise ValueError(f"indices ({i}, {j}) out of range for dimension {n}")
    m = sp.csr_matrix(([1.0 + 0j], ([i], [j])), shape=(n, n))
    return Operator(HilbertDims((n,)), m)


def destroy(n_max: int) -> Operator:
    """Truncated annihilation operator on Fock states ``0..n_max``."""
    if int(n_max) != n_max or n_max < 1:
        raise ValueError(f"photon cutoff must be an integer >= 1, got {n_max}")
    n_max = int(n_max)
    data = sp.diags(np.sqrt(np.arange(1, n_max + 1)), 1, format="csr", dtype=complex)
    return Operator(HilbertDims((n_max + 1,)), data)


def number(n_max: int) -> Operator:
    """``a^dag a`` with exactly integer diagonal (the product itself is off by an ulp)."""
    a = destroy(n_max)
    return Operator(a.dims, sp.diags(np.arange(n_max + 1, dtype=complex), 0, format="csr"))


def fock(n_max: int, n: int) -> DensityMatrix:
    if int(n_max) != n_max or n_max < 0:
        raise ValueError(f"photon cutoff must be a non-negative integer, got {n_max}")
    if not 0 <= n <= n_max:
        raise ValueError(f"Fock index {n} outside 0..{n_max}")
    data = np.zeros((n_max + 1, n_max + 1), dtype=complex)
    data[n, n] = 1.0
    return DensityMatrix(HilbertDims((n_max + 1,)), data, {"min_eigenvalue": 0.0})


def thermal_probabilities(n_max: int, n_bar: float) -> tuple[np.ndarray, float]:
    """Renormalized truncated geometric distribution and the dropped tail weight."""
    if n_bar < 0:
        raise ValueError(f"mean photon number must be >= 0, got {n_bar}")
    n = np.arange(n_max + 1)
    if n_bar == 0:
        p = (n == 0).astype(float)
        return p, 0.0
    ratio = n_bar / (1.0 + n_bar)
    log_p = n * np.log(ratio)
    p = np.exp(log_p - log_p.max())
    p /= p.sum()
    tail = float(ratio ** (n_max + 1))
    return p, tail


def thermal_state(n_max: int, n_bar: float) -> DensityMatrix:
    """Thermal cavity state truncated at ``n_max`` photons.

    The geometric distribution is renormalized over the kept levels; the lost
    weight is stored as ``info["tail_weight"]`` and a :class:`TruncationWarning`
    is raised when it exceeds ``THERMAL_TAIL_TOL``.
    """
    if int(n_max) != n_max or n_max < 0:
        raise ValueError(f"photon cutoff must be a non-negative integer, got {n_max}")
    p, tail = thermal_probabilities(int(n_max), n_bar)
    if tail > THERMAL_TAIL_TOL:
        warnings.warn(
            f"thermal state with n_bar={n_bar:.4g} truncated at n_max={n_max} "
            f"drops tail weight {tail:.2e}",
            TruncationWarning,
            stacklevel=2,
        )
    return DensityMatrix(
        HilbertDims((int(n_max) + 1,)),
        np.diag(p).astype(complex),
        {"tail_weight": tail, "n_bar": float(n_bar), "min_eigenvalue": float(p.min())},
    )


def tensor(ops: Sequence) -> Operator | DensityMatrix:
    """Kronecker product in list order.

    A list made only of density matrices yields a density matrix; anything else
    yields an operator (sparse if every input is sparse).
    """
    ops = list(ops)
    if not ops:
        raise ValueError("tensor() needs at least one operand")
    dims = reduce(lambda a, b: a + b, (o.dims for o in ops))
    if all(isinstance(o, DensityMatrix) for o in ops):
        data = reduce(np.kron, (o.data for o in ops))
        min_eigs = [o.info.get("min_eigenvalue") for o in ops]
        info = {}
        if all(m is not None and m >= 0 for m in min_eigs):
            info["min_eigenvalue"] = float(np.prod(min_eigs))
        return DensityMatrix(dims, data, info)
    mats = [o.data for o in ops]
    if all(sp.issparse(m) for m in mats):
        data = reduce(lambda a, b: sp.kron(a, b, format="csr"), mats)
    else:
        dense = [m.toarray() if sp.issparse(m) else m for m in mats]
        data = reduce(np.kron, dense)
    return Operator(dims, data)


def embed(op: Operator, position: int, dims: HilbertDims) -> Operator:
    """Place a single-factor operator at ``position`` with identities elsewhere."""
    dims = _as_dims(dims)
    if len(op.dims) != 1 or op.dims.factors[0] != dims.factors[position]:
        raise ValueError("operator does not fit the requested factor")
    parts = [identity(d) for d in dims.factors]
    parts[position] = op
    return tensor(parts)


def partial_trace(rho: DensityMatrix, keep: Iterable[int]) -> DensityMatrix:
    """Reduced state over the factors in ``keep`` (kept in ascending order)."""
    factors = rho.dims.factors
    keep = sorted(set(int(k) for k in keep))
    if not keep:
        raise ValueError("partial_trace needs at least one factor to keep")
    if keep[0] < 0 or keep[-1] >= len(factors):
        raise ValueError(f"factor indices {keep} invalid for {len(factors)} factors")
    nf = len(factors)
    tensor_rho = rho.data.reshape(factors + factors)
    row = list(range(nf))
    col = [i + nf if i in keep else i for i in range(nf)]
    out_idx = keep + [k + nf for k in keep]
    reduced = np.einsum(tensor_rho, row + col, out_idx)
    kept = tuple(factors[k] for k in keep)
    size = int(np.prod(kept))
    return DensityMatrix.from_array(HilbertDims(kept), reduced.reshape(size, size))


def expect(op: Operator, rho: DensityMatrix):
    """``Tr(op rho)``; real for Hermitian ``op`` (imaginary residue checked)."""
    if op.dims.total != rho.dims.total:
        raise ValueError(
            f"dimension mismatch: operator {op.dims.factors}, state {rho.dims.factors}"
        )
    value = trace_product(op.data, rho.data)
    if op.is_hermitian():
        if abs(value.imag) > 1e-10 * max(1.0, abs(value.real)):
            raise ValueError(f"Hermitian expectation has imaginary part {value.imag:.3e}")
        return float(value.real)
    return complex(value)


def trace_product(a, rho: np.ndarray) -> complex:
    """``Tr(a @ rho)`` without forming the product."""
    if sp.issparse(a):
        a = a.tocoo()
        return complex(np.sum(a.data * rho[a.col, a.row]))
    return complex(np.einsum("ij,ji->", a, rho))
