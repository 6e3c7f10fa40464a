"""Rydberg atom / microwave cavity models and scalar parameter utilities.

Units: angular frequencies and rates in rad/us, temperature in K. Hamiltonians
are written in the frame co-rotating with the atomic s-p transition, so the
cavity term is ``delta_c * a^dag a`` with ``delta_c = omega_c - omega_a`` and
all atomic energies carry only laser detunings.

Atomic level indices: g=0, p=1, s=2, e=3 (e only in the cooling scheme).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Mapping

import numpy as np
import scipy.constants as const
import scipy.sparse as sp

from .errors import DimensionCapError
from .operators import (
    HilbertDims,
    Operator,
    basis_projector,
    destroy,
    embed,
    identity,
    number,
    tensor,
)

TWO_PI = 2.0 * math.pi
H_OVER_KB = const.h / const.k  # s K
HBAR = const.hbar
E_A0 = const.e * const.physical_constants["Bohr radius"][0]  # C m
DIM_CAP = 20_000

LEVELS = {"g": 0, "p": 1, "s": 2, "e": 3}
SCHEMES = ("lambda", "xi", "cool")

# Excitation-number weight of each atomic level, per scheme. The Hamiltonian
# conserves a^dag a + sum(weights) and every collapse operator shifts it by a
# fixed integer, which lets the solver work sector by sector.
CHARGE_WEIGHTS = {
    "lambda": (1, 0, 1),
    "xi": (0, 0, 1),
    "cool": (0, 0, 1, 1),
}


def mhz(nu: float) -> float:
    """Angular frequency (rad/us) of a frequency given in MHz."""
    return TWO_PI * nu


def to_mhz(omega: float) -> float:
    return omega / TWO_PI


def nbar_thermal(omega_c: float, temperature: float) -> float:
    """Planck occupation of a mode at angular frequency ``omega_c`` (rad/us)."""
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if omega_c <= 0:
        raise ValueError(f"cavity frequency must be > 0, got {omega_c}")
    if temperature == 0:
        return 0.0
    x = H_OVER_KB * (omega_c / TWO_PI) * 1e6 / temperature
    if x > 700.0:  # exp(-x) underflows; the occupation is zero to double precision
        return 0.0
    return float(1.0 / math.expm1(x))


def kappa_from_q(omega_c: float, q_factor: float) -> float:
    if q_factor <= 0:
        raise ValueError(f"quality factor must be > 0, got {q_factor}")
    return omega_c / q_factor


def coupling_g(field_v_per_m: float, dipole_cm: float) -> float:
    """Vacuum Rabi frequency ``E d / hbar`` in rad/us."""
    if field_v_per_m < 0 or dipole_cm < 0:
        raise ValueError("field and dipole must be non-negative")
    return field_v_per_m * dipole_cm / HBAR * 1e-6


@dataclass(frozen=True)
class SystemSpec:
    """Physical parameters of one atom-cavity configuration.

    Defaults are the 15 GHz / 4 K / Q=1e5 operating point with the cooling
    drives at 10 MHz. ``n_max=None`` means "pick by heuristic" (see
    :meth:`resolved_n_max`).
    """

    scheme: str = "cool"
    omega_c: float = TWO_PI * 15_000.0
    delta: float = 0.0
    delta_prime: float = 0.0
    delta_c: float = 0.0
    g: float = TWO_PI * 4.0
    omega_drive: float = TWO_PI * 10.0
    omega_dress: float = TWO_PI * 10.0
    gamma_s: float = 1.0 / 289.0
    gamma_p: float = 1.0 / 689.0
    gamma_e: float = TWO_PI * 5.2
    q_factor: float = 1e5
    temperature: float = 4.0
    n_max: int | None = None
    n_atoms: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"scheme must be one of {SCHEMES}, got {self.scheme!r}")
        for name in ("omega_c", "g", "omega_drive", "omega_dress",
                     "gamma_s", "gamma_p", "gamma_e", "temperature"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.omega_c <= 0:
            raise ValueError("omega_c must be positive")
        if not self.q_factor > 0:
            raise ValueError(f"q_factor must be positive, got {self.q_factor}")
        if self.n_max is not None and (int(self.n_max) != self.n_max or self.n_max < 1):
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 1:
            raise ValueError(f"n_atoms must be an integer >= 1, got {self.n_atoms}")

    @property
    def omega_a(self) -> float:
        return self.omega_c - self.delta_c

    @property
    def kappa(self) -> float:
        return kappa_from_q(self.omega_c, self.q_factor)

    @property
    def n_th(self) -> float:
        return nbar_thermal(self.omega_c, self.temperature)

    @property
    def n_levels(self) -> int:
        return 4 if self.scheme == "cool" else 3

    def resolved_n_max(self) -> int:
        if self.n_max is not None:
            return int(self.n_max)
        return heuristic_n_max(self.n_th)

    def with_(self, **changes) -> "SystemSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


def heuristic_n_max(n_bar: float) -> int:
    """Starting photon cutoff ``n + 5 sqrt(n(n+1)) + 5``."""
    return int(math.ceil(n_bar + 5.0 * math.sqrt(n_bar * (n_bar + 1.0)) + 5.0))


@dataclass(frozen=True, eq=False)
class LindbladModel:
    hamiltonian: Operator
    collapse_ops: tuple
    observables: Mapping[str, Operator]
    dims: HilbertDims
    charges: np.ndarray | None = None
    spec: SystemSpec | None = None
    labels: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "collapse_ops", tuple(self.collapse_ops))
        for op in (self.hamiltonian, *self.collapse_ops, *self.observables.values()):
            if op.dims != self.dims:
                raise ValueError("all model operators must share dims")
        if not self.hamiltonian.is_hermitian():
            raise ValueError("Hamiltonian is not Hermitian")
        if self.charges is not None:
            charges = np.asarray(self.charges, dtype=int)
            if charges.shape != (self.dims.total,):
                raise ValueError("charges must have one entry per basis state")
            object.__setattr__(self, "charges", charges)


def cooperativity(spec: SystemSpec, level: str = "s") -> float:
    gamma = {"s": spec.gamma_s, "p": spec.gamma_p}[level]
    if gamma <= 0 or spec.kappa <= 0:
        raise ValueError("cooperativity needs positive decay rates")
    return spec.g**2 / (spec.kappa * gamma)


def n_rabi(spec: SystemSpec, level: str = "s") -> float:
    gamma = {"s": spec.gamma_s, "p": spec.gamma_p}[level]
    return 2.0 * spec.g / (gamma + spec.kappa)


def _atom_terms(spec: SystemSpec, n: int):
    """Single-atom Hamiltonian piece and decay operators (``n`` levels)."""
    P = lambda i, j: basis_projector(n, LEVELS[i], LEVELS[j]).data
    h = sp.csr_matrix((n, n), dtype=complex)
    if spec.scheme == "lambda":
        h = h - spec.delta * (P("p", "p") + P("s", "s"))
        h = h + 0.5 * spec.omega_drive * (P("s", "g") + P("g", "s"))
    else:
        h = h - spec.delta * (P("p", "p") + P("s", "s"))
        h = h + 0.5 * spec.omega_drive * (P("p", "g") + P("g", "p"))
    decays = [
        math.sqrt(spec.gamma_s) * P("g", "s"),
        math.sqrt(spec.gamma_p) * P("g", "p"),
    ]
    if spec.scheme == "cool":
        h = h - (spec.delta - spec.delta_prime) * P("e", "e")
        h = h + 0.5 * spec.omega_dress * (P("e", "s") + P("s", "e"))
        decays.append(math.sqrt(spec.gamma_e) * P("g", "e"))
    dims = HilbertDims((n,))
    return Operator(dims, h), [Operator(dims, d) for d in decays]


def _assemble(spec: SystemSpec, n_atoms: int, n_max: int) -> LindbladModel:
    n = spec.n_levels
    dims = HilbertDims((n,) * n_atoms + (n_max + 1,))
    cav = n_atoms
    a = embed(destroy(n_max), cav, dims)
    ad = a.dag()
    num = embed(number(n_max), cav, dims)
    atom_h, atom_decays = _atom_terms(spec, n)
    sigma_sp = basis_projector(n, LEVELS["s"], LEVELS["p"])

    H = spec.delta_c * num
    collapse = []
    n_th = spec.n_th
    kappa = spec.kappa
    if kappa > 0:
        collapse.append(math.sqrt((1.0 + n_th) * kappa) * a)
        if n_th > 0:
            collapse.append(math.sqrt(n_th * kappa) * ad)
    for i in range(n_atoms):
        H = H + embed(atom_h, i, dims)
        jc = a @ embed(sigma_sp, i, dims)
        H = H + spec.g * (jc + jc.dag())
        for d in atom_decays:
            if d.data.nnz and abs(d.data).max() > 0:
                collapse.append(embed(d, i, dims))

    observables = {"n": num, "p_vac": embed(basis_projector(n_max + 1, 0), cav, dims)}
    names = ["g", "p", "s", "e"][:n]
    for name in names:
        proj = basis_projector(n, LEVELS[name])
        acc = sum((embed(proj, i, dims) for i in range(1, n_atoms)), embed(proj, 0, dims))
        observables[f"p_{name}"] = acc / n_atoms

    weights = np.asarray(CHARGE_WEIGHTS[spec.scheme])
    charges = np.zeros(1, dtype=int)
    for _ in range(n_atoms):
        charges = np.add.outer(charges, weights).ravel()
    charges = np.add.outer(charges, np.arange(n_max + 1)).ravel()

    return LindbladModel(
        hamiltonian=H,
        collapse_ops=collapse,
        observables=observables,
        dims=dims,
        charges=charges,
        spec=spec,
        labels=tuple(names),
    )


def build_model(spec: SystemSpec) -> LindbladModel:
    """Single-atom model for the lambda, xi or cooling scheme."""
    if spec.n_atoms != 1:
        raise ValueError(
            f"build_model handles one atom; use build_multiatom for n_atoms={spec.n_atoms}"
        )
    return _assemble(spec, 1, spec.resolved_n_max())


def build_multiatom(spec: SystemSpec, dim_cap: int = DIM_CAP) -> LindbladModel:
    """``n_atoms`` independent cooling atoms sharing one cavity mode."""
    if spec.scheme != "cool":
        raise ValueError("multi-atom models are defined for the cooling scheme only")
    n_max = spec.resolved_n_max()
    total = spec.n_levels ** spec.n_atoms * (n_max + 1)
    if total > dim_cap:
        raise DimensionCapError(
            f"{spec.n_atoms} atoms with n_max={n_max} give dimension {total} > cap "
            f"{dim_cap}; lower n_max or raise the cap (dense state needs "
            f"~{total**2 * 16 / 1e9:.1f} GB)",
            total=total,
            cap=dim_cap,
        )
    return _assemble(spec, spec.n_atoms, n_max)


def build(spec: SystemSpec, dim_cap: int = DIM_CAP) -> LindbladModel:
    """Dispatch to :func:`build_model` or :func:`build_multiatom`."""
    if spec.n_atoms == 1:
        return build_model(spec)
    return build_multiatom(spec, dim_cap)


def build_bare_cavity(spec: SystemSpec) -> LindbladModel:
    """Cavity mode alone with its thermal damping channels."""
    n_max = spec.resolved_n_max()
    a = destroy(n_max)
    num = number(n_max)
    collapse = [math.sqrt((1.0 + spec.n_th) * spec.kappa) * a]
    if spec.n_th > 0:
        collapse.append(math.sqrt(spec.n_th * spec.kappa) * a.dag())
    return LindbladModel(
        hamiltonian=spec.delta_c * num,
        collapse_ops=collapse,
        observables={"n": num, "p_vac": basis_projector(n_max + 1, 0)},
        dims=a.dims,
        charges=np.arange(n_max + 1),
        spec=spec,
    )


def lab_frame_hamiltonian(spec: SystemSpec) -> Operator:
    """Single-atom Hamiltonian with explicit carrier frequencies.

    Cavity energy ``omega_c (a^dag a + 1/2)``; atomic energies carry
    ``omega_a`` exactly as in the non-reduced form of the model. Used to
    check the reduced-frame builder, never for production runs.
    """
    n = spec.n_levels
    n_max = spec.resolved_n_max()
    dims = HilbertDims((n, n_max + 1))
    a = embed(destroy(n_max), 1, dims)
    num = embed(number(n_max), 1, dims)
    P = lambda i, j=None: embed(basis_projector(n, LEVELS[i], LEVELS[j or i]), 0, dims)
    wa = spec.omega_a
    H = spec.omega_c * (num + 0.5 * tensor([identity(n), identity(n_max + 1)]))
    if spec.scheme == "lambda":
        H = H - (spec.delta + wa) * P("p") - spec.delta * P("s")
        H = H + 0.5 * spec.omega_drive * (P("s", "g") + P("g", "s"))
    else:
        H = H - spec.delta * P("p") - (spec.delta - wa) * P("s")
        H = H + 0.5 * spec.omega_drive * (P("p", "g") + P("g", "p"))
    if spec.scheme == "cool":
        H = H - (spec.delta - spec.delta_prime - wa) * P("e")
        H = H + 0.5 * spec.omega_dress * (P("e", "s") + P("s", "e"))
    jc = a @ P("s", "p")
    return H + spec.g * (jc + jc.dag())
