"""Lindblad master equation: time evolution, steady states, cutoff control.

Propagation never materializes the full ``dim^2 x dim^2`` superoperator. When
the model carries integer excitation charges (conserved by the Hamiltonian and
shifted by a fixed amount by each collapse operator), states that start
block-diagonal in that charge stay block-diagonal, and the steady state is
block-diagonal too. The :class:`SectorBasis` packs those blocks into a vector
and :func:`liouvillian` builds the sparse generator restricted to them.
"""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.linalg import schur
from scipy.linalg.lapack import ztrsyl

from .errors import ConvergenceError, DimensionCapError, SingularSystemError
from .integrator import IntegratorStats, fixed_step, integrate
from .model import LindbladModel, SystemSpec, build, heuristic_n_max, H_OVER_KB, TWO_PI
from .operators import (
    PSD_FLOOR,
    DensityMatrix,
    HilbertDims,
    Operator,
    basis_projector,
    tensor,
    thermal_state,
    trace_product,
)

log = logging.getLogger(__name__)

RTOL = 1e-8
ATOL = 1e-10
TRACE_TOL = 1e-8
LINEAR_RESIDUAL_TOL = 1e-8
EVOLUTION_RESIDUAL_TOL = 1e-9
DIRECT_SOLVE_CAP = 30_000
# sparse LU fill becomes near-dense once a single charge block is this large
DIRECT_BLOCK_CAP = 1_024
NULL_SPACE_CAP = 4_000
EIG_MONITOR_CAP = 600


# ---------------------------------------------------------------------------
# right-hand side


class _Generator:
    """Precomputed pieces of ``drho/dt = -i(H_eff rho - rho H_eff^dag) + sum L rho L^dag``."""

    def __init__(self, model: LindbladModel):
        H = model.hamiltonian.to_sparse()
        Ls = [c.to_sparse() for c in model.collapse_ops]
        heff = H.astype(complex)
        for L in Ls:
            heff = heff - 0.5j * (L.conj().T @ L)
        self.dim = model.dims.total
        self.neg_i_heff = sp.csr_matrix(-1j * heff)
        self.Ls = [sp.csr_matrix(L) for L in Ls]

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        # rho N^dag = (N rho^dag)^dag and (L rho) L^dag = (L (L rho)^dag)^dag
        out = self.neg_i_heff @ rho + (self.neg_i_heff @ rho.conj().T).conj().T
        for L in self.Ls:
            lr = L @ rho
            out += (L @ lr.conj().T).conj().T
        return out


def rhs(model: LindbladModel, rho) -> np.ndarray:
    """Lindblad derivative ``L(rho)`` evaluated matrix-free."""
    data = rho.data if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)
    if data.shape != (model.dims.total, model.dims.total):
        raise ValueError(
            f"state shape {data.shape} does not match model dimension {model.dims.total}"
        )
    return _Generator(model)(data)


# ---------------------------------------------------------------------------
# charge sectors


def _charge_shift(op, charges) -> int | None:
    """Charge change of ``op`` (None if it is not a definite shift)."""
    coo = sp.coo_matrix(op)
    mask = coo.data != 0
    if not mask.any():
        return 0
    shifts = np.unique(charges[coo.row[mask]] - charges[coo.col[mask]])
    return int(shifts[0]) if shifts.size == 1 else None


@dataclass
class SectorBasis:
    """Vectorization of charge-block-diagonal matrices.

    Block ``k`` holds the basis indices ``members[k]`` (ascending); its entries
    are stored column-major starting at ``offsets[k]``.
    """

    dim: int
    members: list
    offsets: np.ndarray
    charge_values: np.ndarray
    size: int = field(init=False)

    def __post_init__(self):
        sizes = np.array([len(m) for m in self.members])
        self.size = int(np.sum(sizes**2))
        self._block_of = np.empty(self.dim, dtype=int)
        self._pos = np.empty(self.dim, dtype=int)
        for k, m in enumerate(self.members):
            self._block_of[m] = k
            self._pos[m] = np.arange(len(m))
        perm = np.empty(self.size, dtype=int)
        diag = []
        for k, m in enumerate(self.members):
            d = len(m)
            idx = np.arange(d * d).reshape(d, d, order="F") + self.offsets[k]
            perm[idx.ravel(order="F")] = idx.T.ravel(order="F")
            diag.append(self.offsets[k] + np.arange(d) * (d + 1))
        self._conj_perm = perm
        self.diag_index = np.concatenate(diag)
        self.diag_members = np.concatenate(self.members)

    @classmethod
    def from_model(cls, model: LindbladModel, use_charges: bool = True) -> "SectorBasis":
        dim = model.dims.total
        charges = model.charges if use_charges else None
        if charges is not None:
            ok = _charge_shift(model.hamiltonian.data, charges) == 0 and all(
                _charge_shift(c.data, charges) is not None for c in model.collapse_ops
            )
            if not ok:
                log.debug("model charges are not conserved; using a single sector")
                charges = None
        if charges is None:
            charges = np.zeros(dim, dtype=int)
        values = np.unique(charges)
        members = [np.flatnonzero(charges == v) for v in values]
        sizes = np.array([len(m) for m in members])
        offsets = np.concatenate([[0], np.cumsum(sizes**2)[:-1]]).astype(int)
        return cls(dim, members, offsets, values)

    @property
    def n_sectors(self) -> int:
        return len(self.members)

    def off_block_norm(self, rho: np.ndarray) -> float:
        mask = self._block_of[:, None] != self._block_of[None, :]
        return float(np.linalg.norm(rho[mask]))

    def pack(self, rho: np.ndarray) -> np.ndarray:
        out = np.empty(self.size, dtype=complex)
        for k, m in enumerate(self.members):
            block = rho[np.ix_(m, m)]
            out[self.offsets[k]:self.offsets[k] + block.size] = block.ravel(order="F")
        return out

    def blocks(self, x: np.ndarray):
        for k, m in enumerate(self.members):
            d = len(m)
            yield m, x[self.offsets[k]:self.offsets[k] + d * d].reshape(d, d, order="F")

    def unpack(self, x: np.ndarray) -> np.ndarray:
        rho = np.zeros((self.dim, self.dim), dtype=complex)
        for m, block in self.blocks(x):
            rho[np.ix_(m, m)] = block
        return rho

    def hermitize(self, x: np.ndarray) -> np.ndarray:
        return 0.5 * (x + x[self._conj_perm].conj())

    def trace_weights(self) -> np.ndarray:
        w = np.zeros(self.size, dtype=complex)
        w[self.diag_index] = 1.0
        return w

    def expect_weights(self, op) -> np.ndarray:
        """``w`` with ``Tr(op rho) = w @ x`` for packed ``x``."""
        coo = sp.coo_matrix(op)
        w = np.zeros(self.size, dtype=complex)
        # Tr(op rho) = sum_ij op[j, i] rho[i, j]
        i, j = coo.col, coo.row
        same = self._block_of[i] == self._block_of[j]
        i, j, vals = i[same], j[same], coo.data[same]
        blk = self._block_of[i]
        d = np.array([len(m) for m in self.members])[blk]
        idx = self.offsets[blk] + self._pos[i] + self._pos[j] * d
        np.add.at(w, idx, vals)
        return w

    def diagonal(self, x: np.ndarray) -> np.ndarray:
        out = np.empty(self.dim)
        out[self.diag_members] = x[self.diag_index].real
        return out

    def min_eigenvalue(self, x: np.ndarray) -> float:
        return min(float(np.linalg.eigvalsh(0.5 * (b + b.conj().T))[0]) for _, b in self.blocks(x))


def liouvillian(model: LindbladModel, basis: SectorBasis | None = None):
    """Sparse Liouvillian acting on packed vectors; returns ``(L, basis)``."""
    basis = basis or SectorBasis.from_model(model)
    gen = _Generator(model)
    dim = model.dims.total
    ident = sp.identity(dim, dtype=complex, format="csr")
    terms = [(gen.neg_i_heff, ident), (ident, sp.csr_matrix(gen.neg_i_heff.conj().T))]
    terms += [(L, sp.csr_matrix(L.conj().T)) for L in gen.Ls]

    charge_of = {}
    for k, m in enumerate(basis.members):
        charge_of[k] = basis.charge_values[k]
    index_of = {v: k for k, v in enumerate(basis.charge_values)}
    block_charges = np.empty(dim, dtype=int)
    for k, m in enumerate(basis.members):
        block_charges[m] = basis.charge_values[k]

    rows, cols, vals = [], [], []
    for A, B in terms:
        shift = _charge_shift(A, block_charges) if basis.n_sectors > 1 else 0
        A = sp.csr_matrix(A)
        B = sp.csr_matrix(B)
        for k, m in enumerate(basis.members):
            t = index_of.get(charge_of[k] + shift)
            if t is None:
                continue
            mt = basis.members[t]
            A_ts = A[mt][:, m]
            if A_ts.nnz == 0:
                continue
            B_st = B[m][:, mt]
            if B_st.nnz == 0:
                continue
            block = sp.kron(B_st.T, A_ts, format="coo")
            rows.append(block.row + basis.offsets[t])
            cols.append(block.col + basis.offsets[k])
            vals.append(block.data)
    n = basis.size
    L = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    L.sum_duplicates()
    return L, basis


# ---------------------------------------------------------------------------
# time evolution


@dataclass
class TimeSeries:
    times: np.ndarray
    values: dict
    final_state: DensityMatrix
    diagnostics: dict

    def __post_init__(self):
        for label, series in self.values.items():
            if len(series) != len(self.times):
                raise ValueError(f"series {label!r} does not match the time grid")

    def __getitem__(self, label) -> np.ndarray:
        return self.values[label]


class _Propagation:
    """State representation used during one integration (dense or packed)."""

    def __init__(self, model: LindbladModel, rho0: np.ndarray, mode: str = "auto"):
        self.model = model
        dim = model.dims.total
        if mode not in ("auto", "sector", "dense"):
            raise ValueError(f"unknown propagation mode {mode!r}")
        basis = None
        if mode in ("auto", "sector") and model.charges is not None:
            basis = SectorBasis.from_model(model)
            if basis.n_sectors == 1 or basis.off_block_norm(rho0) > 0.0:
                if mode == "sector":
                    raise ValueError("initial state is not block-diagonal in the model charges")
                basis = None
        elif mode == "sector":
            raise ValueError("sector propagation needs a model with charges")
        self.basis = basis
        if basis is not None:
            self.mode = "sector"
            L, _ = liouvillian(model, basis)
            self.L = L
            self.y0 = basis.pack(rho0)
            self.f = lambda t, y: L @ y
            self.project = basis.hermitize
            self._trace_w = basis.trace_weights()
        else:
            self.mode = "dense"
            gen = _Generator(model)
            self.gen = gen
            self.f = lambda t, y: gen(y)
            self.y0 = np.array(rho0, dtype=complex)
            self.project = lambda y: 0.5 * (y + y.conj().T)
        self.dim = dim

    def trace(self, y) -> complex:
        if self.mode == "sector":
            return complex(self._trace_w @ y)
        return complex(np.trace(y))

    def expect_fn(self, op: Operator) -> Callable:
        herm = op.is_hermitian()
        if self.mode == "sector":
            w = self.basis.expect_weights(op.data)
            fn = lambda y: complex(w @ y)
        else:
            data = op.data
            fn = lambda y: trace_product(data, y)
        return (lambda y: fn(y).real) if herm else fn

    def min_eigenvalue(self, y) -> float:
        if self.mode == "sector":
            return self.basis.min_eigenvalue(y)
        if self.dim > EIG_MONITOR_CAP:
            return math.nan
        return float(np.linalg.eigvalsh(0.5 * (y + y.conj().T))[0])

    def to_dense(self, y) -> np.ndarray:
        return self.basis.unpack(y) if self.mode == "sector" else y

    def residual(self, y) -> float:
        r = self.f(0.0, y)
        return float(np.linalg.norm(r) / max(np.linalg.norm(y), 1e-300))


def _as_array(rho0, dim) -> np.ndarray:
    data = rho0.data if isinstance(rho0, DensityMatrix) else np.asarray(rho0)
    data = np.array(data, dtype=complex)
    if data.shape != (dim, dim):
        raise ValueError(f"initial state shape {data.shape} does not match dimension {dim}")
    return data


def _final_state(model, prop, y, min_eig) -> DensityMatrix:
    rho = prop.to_dense(y)
    rho = 0.5 * (rho + rho.conj().T)
    info = {}
    if not math.isnan(min_eig):
        info["min_eigenvalue"] = min_eig
    return DensityMatrix(model.dims, rho / np.trace(rho).real, info)


def mesolve(model: LindbladModel, rho0, times, observables: Mapping[str, Operator] | None = None,
            *, rtol: float = RTOL, atol: float = ATOL, propagation: str = "auto",
            max_steps: int = 10_000_000) -> TimeSeries:
    """Evolve ``rho0`` and record observables at every entry of ``times``.

    Adaptive Dormand-Prince stepping; the state is re-Hermitized after each
    accepted step and the trace drift and smallest eigenvalue are monitored.
    """
    times = np.asarray(times, dtype=float)
    rho0 = _as_array(rho0, model.dims.total)
    observables = dict(model.observables if observables is None else observables)
    prop = _Propagation(model, rho0, propagation)
    fns = {label: prop.expect_fn(op) for label, op in observables.items()}
    values = {label: np.empty(times.size, dtype=float if observables[label].is_hermitian() else complex)
              for label in observables}
    monitor = {"max_trace_dev": abs(prop.trace(prop.y0) - 1.0), "min_eig": math.inf}

    def on_output(k, t, y):
        for label, fn in fns.items():
            values[label][k] = fn(y)
        m = prop.min_eigenvalue(y)
        if not math.isnan(m):
            monitor["min_eig"] = min(monitor["min_eig"], m)

    def on_step(t, y):
        monitor["max_trace_dev"] = max(monitor["max_trace_dev"], abs(prop.trace(y) - 1.0))

    stats = IntegratorStats()
    start = _time.perf_counter()
    try:
        y = integrate(prop.f, prop.y0, times, rtol=rtol, atol=atol, project=prop.project,
                      on_output=on_output, on_step=on_step, max_steps=max_steps, stats=stats)
    except ConvergenceError as exc:
        exc.diagnostics.update(monitor)
        raise
    min_eig = monitor["min_eig"] if np.isfinite(monitor["min_eig"]) else math.nan
    diagnostics = {
        **stats.as_dict(),
        "propagation": prop.mode,
        "max_trace_deviation": monitor["max_trace_dev"],
        "trace_ok": monitor["max_trace_dev"] <= TRACE_TOL,
        "min_eigenvalue": min_eig,
        "wall_time_s": _time.perf_counter() - start,
    }
    if not diagnostics["trace_ok"]:
        log.warning("trace drift %.2e exceeds %.0e", monitor["max_trace_dev"], TRACE_TOL)
    final = _final_state(model, prop, y, prop.min_eigenvalue(y))
    return TimeSeries(times, values, final, diagnostics)


# ---------------------------------------------------------------------------
# steady state


@dataclass
class SteadyStateResult:
    rho_ss: DensityMatrix
    n_mean: float
    p_vac: float
    photon_dist: np.ndarray
    residual: float
    method: str
    converged_cutoff: int
    diagnostics: dict = field(default_factory=dict)

    def t_eff(self, omega_c: float) -> float:
        from .experiments import t_eff

        return t_eff(self.p_vac, omega_c)


def cavity_distribution(rho_diag: np.ndarray, dims: HilbertDims) -> np.ndarray:
    """Photon-number distribution from the diagonal of a full state (cavity last)."""
    n_cav = dims.factors[-1]
    return rho_diag.reshape(-1, n_cav).sum(axis=0)


def default_initial_state(model: LindbladModel) -> np.ndarray:
    """Thermal cavity with every atom in ``|g>``."""
    spec = model.spec
    n_cav = model.dims.factors[-1]
    n_th = spec.n_th if spec is not None else 0.0
    cav = thermal_state(n_cav - 1, n_th)
    parts = [DensityMatrix(HilbertDims((d,)), basis_projector(d, 0).to_dense())
             for d in model.dims.factors[:-1]]
    return tensor(parts + [cav]).data if parts else cav.data


def steadystate(model: LindbladModel, method: str = "auto", *, rho0=None,
                direct_cap: int = DIRECT_SOLVE_CAP, tol: float | None = None,
                chunk: float = 1.0, max_time: float = 2_000.0,
                propagation: str = "auto") -> SteadyStateResult:
    """Solve ``L(rho) = 0`` with unit trace.

    ``method``: ``"linear-solve"`` (sparse LU on the charge-reduced
    Liouvillian with one row replaced by the trace condition),
    ``"time-evolution"`` (integrate until ``|L(rho)|_F < tol |rho|_F``),
    ``"null-space"`` (dense SVD, small systems only, reports degeneracy) or
    ``"auto"`` (currently always the linear solve). The linear solve is a
    direct factorization up to ``direct_cap`` unknowns (and charge blocks of
    at most ``DIRECT_BLOCK_CAP`` unknowns) and GMRES otherwise, preconditioned
    by the generator without its jump terms.
    """
    if not model.collapse_ops:
        raise SingularSystemError("model has no dissipation; steady state is not unique")
    start = _time.perf_counter()
    if method == "auto":
        method = "linear-solve"
    if method == "linear-solve":
        rho, min_eig, diag = _linear_solve(model, direct_cap)
        tol = LINEAR_RESIDUAL_TOL if tol is None else tol
    elif method == "null-space":
        rho, min_eig, diag = _null_space(model)
        tol = LINEAR_RESIDUAL_TOL if tol is None else tol
    elif method == "time-evolution":
        tol = EVOLUTION_RESIDUAL_TOL if tol is None else tol
        rho, min_eig, diag = _evolve_to_steady(model, rho0, tol, chunk, max_time, propagation)
    else:
        raise ValueError(f"unknown steady-state method {method!r}")

    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.trace(rho).real
    residual = float(np.linalg.norm(rhs(model, rho)) / np.linalg.norm(rho))
    if residual > tol:
        raise ConvergenceError(
            f"steady-state residual {residual:.2e} exceeds {tol:.0e} ({method})",
            {**diag, "residual": residual},
        )
    info = {"min_eigenvalue": min_eig} if min_eig is not None else {}
    state = DensityMatrix(model.dims, rho, info)
    dist = cavity_distribution(np.real(np.diagonal(rho)), model.dims)
    n_cav = model.dims.factors[-1]
    diag.update(wall_time_s=_time.perf_counter() - start, min_eigenvalue=state.info["min_eigenvalue"])
    return SteadyStateResult(
        rho_ss=state,
        n_mean=float(dist @ np.arange(n_cav)),
        p_vac=float(dist[0]),
        photon_dist=dist,
        residual=residual,
        method=method,
        converged_cutoff=n_cav - 1,
        diagnostics=diag,
    )


def _bordered(model):
    L, basis = liouvillian(model)
    L = L.tolil()
    L[0, :] = basis.trace_weights()
    b = np.zeros(basis.size, dtype=complex)
    b[0] = 1.0
    return L.tocsc(), b, basis


def _linear_solve(model, direct_cap=DIRECT_SOLVE_CAP):
    A, b, basis = _bordered(model)
    largest = max(len(m) for m in basis.members) ** 2
    diag = {"unknowns": basis.size, "sectors": basis.n_sectors, "largest_block": largest}
    if basis.size <= direct_cap and largest <= DIRECT_BLOCK_CAP:
        try:
            lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SingularSystemError(
                f"Liouvillian is singular after the trace constraint ({exc}); "
                "more than one steady state - use method='null-space' to count them"
            ) from exc
        x = lu.solve(b)
        diag.update(solver="splu", lu_fill=int(lu.L.nnz + lu.U.nnz))
    else:
        x = _iterative_solve(model, basis, A, b, diag)
    x = basis.hermitize(x)
    return basis.unpack(x), basis.min_eigenvalue(x), diag


# damping added to the jump-free generator so the preconditioner stays invertible
# when some state has no decay channel (zero temperature vacuum), relative to the largest rate
PRECONDITIONER_SHIFT = 1e-6
GMRES_RESTART = 300
GMRES_MAXITER = 10


def _jump_free_preconditioner(model, basis):
    """Exact inverse of ``X -> -i(H_eff X - X H_eff^dag)`` on every charge block.

    Each block is a small Lyapunov equation. The Schur form of ``-i H_eff`` on
    the block's members is computed once and every application is a
    triangular Sylvester solve.
    """
    a_full = _Generator(model).neg_i_heff
    scale = max(float(np.abs(a_full.diagonal()).max()), 1.0)
    blocks = []
    for off, mem in zip(basis.offsets, basis.members):
        a = a_full[mem][:, mem].toarray() - 0.5 * PRECONDITIONER_SHIFT * scale * np.eye(len(mem))
        T, U = schur(a, output="complex")
        blocks.append((int(off), len(mem), T, U))

    def solve(r):
        out = np.empty(r.shape, dtype=complex)
        for off, d, T, U in blocks:
            R = r[off:off + d * d].reshape(d, d, order="F")
            Y, s, _ = ztrsyl(T, T, U.conj().T @ R @ U, trana="N", tranb="C")
            out[off:off + d * d] = (U @ (Y / s) @ U.conj().T).reshape(-1, order="F")
        return out

    return spla.LinearOperator((basis.size, basis.size), solve, dtype=complex)


def _iterative_solve(model, basis, A, b, diag):
    """GMRES on the bordered system, preconditioned by the jump-free generator."""
    M = _jump_free_preconditioner(model, basis)
    count = [0]
    x, info = spla.gmres(A, b, M=M, rtol=1e-13, restart=GMRES_RESTART, maxiter=GMRES_MAXITER,
                         callback=lambda r: count.__setitem__(0, count[0] + 1),
                         callback_type="pr_norm")
    diag.update(solver="gmres", gmres_iterations=count[0])
    if info != 0:
        raise ConvergenceError("iterative steady-state solve did not converge", diag)
    return x


def _null_space(model, rel_tol: float = 1e-10):
    L, basis = liouvillian(model)
    if basis.size > NULL_SPACE_CAP:
        raise DimensionCapError(
            f"null-space method limited to {NULL_SPACE_CAP} unknowns, got {basis.size}",
            total=basis.size, cap=NULL_SPACE_CAP,
        )
    _, s, vh = np.linalg.svd(L.toarray())
    null_dim = int(np.sum(s <= rel_tol * s[0]))
    if null_dim != 1:
        raise SingularSystemError(
            f"Liouvillian null space has dimension {null_dim}", null_dim=null_dim,
            diagnostics={"smallest_singular_values": s[-3:].tolist()},
        )
    x = vh[-1].conj()
    x = x / (basis.trace_weights() @ x)
    x = basis.hermitize(x)
    return basis.unpack(x), basis.min_eigenvalue(x), {"unknowns": basis.size, "null_dim": 1}


def _rate_bound(prop) -> float:
    """Upper bound on the spectral radius of the generator."""
    if prop.mode == "sector":
        return float(abs(prop.L).sum(axis=1).max())
    gen = prop.gen
    norm = lambda m: float(abs(m).sum(axis=1).max())
    bound = 2.0 * norm(gen.neg_i_heff)
    for L in gen.Ls:
        bound += norm(L) * norm(L.conj().T)
    return bound


def _evolve_to_steady(model, rho0, tol, chunk, max_time, propagation):
    """Integrate until the residual drops below ``tol``.

    Adaptive steps follow the transient; once the residual stops improving
    (error control parks the step on the stability boundary, where stiff
    oscillatory modes are not damped) the run continues with fixed steps of
    size ``1 / |L|_inf``, inside the stability region. Fixed points of the
    step map are exact steady states, so this only changes the path taken.
    """
    start_state = default_initial_state(model) if rho0 is None else _as_array(rho0, model.dims.total)
    prop = _Propagation(model, start_state, propagation)
    y = prop.y0
    history = []
    t = 0.0
    stats = IntegratorStats()
    h = None
    phase = "adaptive"
    h_fixed = None
    while True:
        residual = prop.residual(y)
        history.append(residual)
        if residual < tol:
            break
        if t >= max_time:
            raise ConvergenceError(
                f"time evolution reached t={t:g} us without converging (residual {residual:.2e})",
                {"residual_history": history[-10:], **stats.as_dict()},
            )
        if phase == "adaptive" and len(history) > 2 and residual > 0.5 * history[-3]:
            phase = "fixed"
            h_fixed = 1.0 / _rate_bound(prop)
            mark = len(history)
        if phase == "fixed" and len(history) - mark > 8 and residual > 0.95 * history[-9]:
            raise ConvergenceError(
                f"steady-state time evolution stagnated at residual {residual:.2e}",
                {"residual_history": history[-10:], **stats.as_dict()},
            )
        if phase == "adaptive":
            y = integrate(prop.f, y, [0.0, chunk], rtol=RTOL, atol=ATOL, project=prop.project,
                          h_init=h, stats=stats)
            h = stats.last_step or None
            t += chunk
        else:
            n_steps = max(1, int(math.ceil(chunk / h_fixed)))
            for _ in range(n_steps):
                y = prop.project(fixed_step(prop.f, y, h_fixed))
            stats.n_steps += n_steps
            stats.n_rhs += 6 * n_steps
            t += n_steps * h_fixed
    diag = {"evolution_time": t, "propagation": prop.mode, "residual_history": history[-5:],
            "fixed_step": h_fixed, **stats.as_dict()}
    min_eig = prop.min_eigenvalue(y)
    return prop.to_dense(y), (None if math.isnan(min_eig) else min_eig), diag


# ---------------------------------------------------------------------------
# cutoff convergence


def steady_observables(spec: SystemSpec, dim_cap: int | None = None, method: str = "auto") -> dict:
    """Steady-state ``n_mean``, ``p_vac`` and ``t_eff`` for ``spec``."""
    model = build(spec) if dim_cap is None else build(spec, dim_cap)
    res = steadystate(model, method)
    p = res.p_vac
    t = (H_OVER_KB * spec.omega_c / TWO_PI * 1e6 / -math.log1p(-p)) if 0 < p < 1 else math.nan
    return {"n_mean": res.n_mean, "p_vac": p, "t_eff": t, "result": res}


def converge_cutoff(spec: SystemSpec, target_observables: Sequence[str] = ("n_mean",),
                    rel_tol: float = 1e-3, *, n_start: int | None = None, n_cap: int = 400,
                    evaluate: Callable[[SystemSpec], Mapping] | None = None,
                    history: list | None = None) -> SystemSpec:
    """Smallest photon cutoff whose observables match a doubled cutoff.

    Doubles ``n_max`` from ``n_start`` (default ``n + 5 sqrt(n(n+1)) + 5``)
    until every target observable changes by less than ``rel_tol``, then
    bisects between the last failing and first passing cutoff against the
    largest cutoff computed. Exceeding ``n_cap`` raises
    :class:`DimensionCapError`.
    """
    evaluate = evaluate or steady_observables
    cache: dict[int, Mapping] = {}

    def f(n):
        if n not in cache:
            cache[n] = evaluate(spec.with_(n_max=n))
            if history is not None:
                history.append((n, {k: cache[n][k] for k in target_observables}))
            log.debug("cutoff %d -> %s", n, {k: cache[n][k] for k in target_observables})
        return cache[n]

    def close(a, b):
        return all(abs(a[k] - b[k]) <= rel_tol * max(abs(b[k]), 1e-12) for k in target_observables)

    n = n_start if n_start is not None else heuristic_n_max(spec.n_th)
    n = max(1, int(n))
    lo = 0
    while True:
        m = 2 * n
        if m > n_cap:
            raise DimensionCapError(
                f"photon cutoff did not converge below cap {n_cap} (last tried {n})",
                total=m, cap=n_cap,
            )
        if close(f(n), f(m)):
            break
        lo, n = n, m
    ref = f(2 * n)
    hi = n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if close(f(mid), ref):
            hi = mid
        else:
            lo = mid
    return spec.with_(n_max=hi)
