"""Piecewise-constant fields and their discrete calculus.

Fields hold one value (or one d-vector) per mesh cell.  The face
operators use the mesh's global orientation: for a face with axis ``a``
owned by cell ``K``, the "out" value lives at the periodic +a neighbour,

    average  <v> = (v_in + v_out) / 2,
    jump    [[v]] = v_out - v_in,

and the discrete gradient/divergence read

    (grad_D r)_sigma = [[r]] / h * n,
    (div_h v)_K      = sum_faces |sigma|/|K| <v>.n_outward.

Norms follow the piecewise-constant quadrature  ||v||_p^p = sum |K| |v_K|^p;
vector magnitudes are Euclidean cellwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dfield
from typing import Callable

import numpy as np

from .mesh import Face, TorusMesh

RHO_FLOOR = 1e-12  # density below this is treated as a solver failure


class FieldError(ValueError):
    """Malformed field data (wrong shape, non-finite entries)."""


class DensityFloorError(ArithmeticError):
    """Velocity recovery hit a nonpositive (or floored) density."""


class EnergyError(ArithmeticError):
    """Total energy is infinite for the given state."""


@dataclass(frozen=True)
class Field:
    """Cellwise values on a mesh: shape ``mesh.shape`` or ``mesh.shape + (d,)``."""

    mesh: TorusMesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape not in (self.mesh.shape, self.mesh.shape + (self.mesh.d,)):
            raise FieldError(
                f"values shape {v.shape} does not match mesh shape {self.mesh.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise FieldError("field contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def is_vector(self) -> bool:
        return self.values.ndim == self.mesh.d + 1

    @property
    def ncomp(self) -> int:
        return self.mesh.d if self.is_vector else 1

    def flat(self) -> np.ndarray:
        """Values in lexicographic cell order, shape (cells,) or (cells, d)."""
        if self.is_vector:
            return self.values.reshape(self.mesh.cell_count, self.mesh.d)
        return self.values.reshape(self.mesh.cell_count)

    @classmethod
    def constant(cls, mesh: TorusMesh, value, vector: bool = False) -> "Field":
        if vector:
            arr = np.broadcast_to(np.asarray(value, dtype=float), mesh.shape + (mesh.d,)).copy()
        else:
            arr = np.full(mesh.shape, float(value))
        return cls(mesh, arr)


@dataclass(frozen=True)
class State:
    """Density and momentum at one time level; velocity is derived m/rho."""

    rho: Field
    mom: Field

    def __post_init__(self):
        if self.rho.mesh is not self.mom.mesh and self.rho.mesh != self.mom.mesh:
            raise FieldError("density and momentum live on different meshes")
        if self.rho.is_vector or not self.mom.is_vector:
            raise FieldError("state needs a scalar density and a vector momentum")

    @property
    def mesh(self) -> TorusMesh:
        return self.rho.mesh

    def velocity(self) -> Field:
        rho = self.rho.values
        if rho.min() <= RHO_FLOOR:
            raise DensityFloorError(
                f"density {rho.min():.3e} at or below floor {RHO_FLOOR:.0e}"
            )
        return Field(self.mesh, self.mom.values / rho[..., None])


@dataclass(frozen=True)
class StepDiagnostics:
    time: float
    dt: float
    newton_iters: int
    residual: float
    min_density: float
    energy: float
    dissipation: float
    dt_halvings: int = 0


@dataclass
class Trajectory:
    """Time-indexed states, piecewise constant in time.

    ``states[k]`` holds on the interval [times[k], times[k+1]); the value
    before the first step is states[0].
    """

    dt_nominal: float
    times: list[float] = dfield(default_factory=list)
    states: list[State] = dfield(default_factory=list)
    diagnostics: list[StepDiagnostics] = dfield(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.states) - 1

    @property
    def terminal(self) -> State:
        return self.states[-1]


# ---------------------------------------------------------------------------
# face operators


def _face_avg(values: np.ndarray, axis: int) -> np.ndarray:
    return 0.5 * (values + np.roll(values, -1, axis=axis))


def _face_jump(values: np.ndarray, axis: int) -> np.ndarray:
    return np.roll(values, -1, axis=axis) - values


def avg(v: Field, face: Face):
    """Average of v across one oriented face."""
    flat = v.flat()
    return 0.5 * (flat[face.in_cell] + flat[face.out_cell])


def jump(v: Field, face: Face):
    """Jump of v across one oriented face (out minus in)."""
    flat = v.flat()
    return flat[face.out_cell] - flat[face.in_cell]


def grad_D(r: Field) -> np.ndarray:
    """Face gradient magnitudes [[r]]/h, stacked per axis.

    Entry ``[a]`` indexes the +a face of each cell; the gradient vector on
    that face is the returned value times the face normal +e_a.
    """
    h = r.mesh.h
    return np.stack([_face_jump(r.values, a) / h for a in range(r.mesh.d)])


def div_h(v: Field) -> Field:
    """Cellwise discrete divergence of a vector field."""
    if not v.is_vector:
        raise FieldError("div_h needs a vector field")
    mesh = v.mesh
    acc = np.zeros(mesh.shape)
    for a in range(mesh.d):
        comp = v.values[..., a]
        acc += (np.roll(comp, -1, axis=a) - np.roll(comp, 1, axis=a)) / (2.0 * mesh.h)
    return Field(mesh, acc)


def block_average(v: Field, coarse: TorusMesh) -> Field:
    """Average a fine field onto a coarser mesh whose n divides the fine n.

    This is the cell-average transfer used when a fine-mesh solution
    serves as the reference state on a coarse mesh.
    """
    fine = v.mesh
    if fine.n % coarse.n != 0 or fine.d != coarse.d:
        raise FieldError(f"cannot average n={fine.n} onto n={coarse.n}")
    f = fine.n // coarse.n
    vals = v.values
    d = fine.d
    if d == 2:
        blocks = vals.reshape((coarse.n, f, coarse.n, f) + vals.shape[2:])
        avg_vals = blocks.mean(axis=(1, 3))
    else:
        blocks = vals.reshape((coarse.n, f) * 3 + vals.shape[3:])
        avg_vals = blocks.mean(axis=(1, 3, 5))
    return Field(coarse, avg_vals)


# ---------------------------------------------------------------------------
# norms


def _cell_magnitude(v: Field) -> np.ndarray:
    if v.is_vector:
        return np.sqrt(np.sum(v.values**2, axis=-1))
    return np.abs(v.values)


def lp_norm(v: Field, p: float) -> float:
    """L^p norm of a piecewise-constant field; vectors use Euclidean magnitude."""
    if p < 1:
        raise ValueError(f"exponent must be >= 1, got {p}")
    mag = _cell_magnitude(v)
    return float((v.mesh.cell_volume * np.sum(mag**p)) ** (1.0 / p))


def linf_norm(v: Field) -> float:
    return float(_cell_magnitude(v).max())


def w12_seminorm(v: Field) -> float:
    """Broken W^{1,2} seminorm: sum over faces of |sigma| h |[[v]]/h|^2, rooted."""
    mesh = v.mesh
    total = 0.0
    for a in range(mesh.d):
        j = _face_jump(v.values, a)
        total += np.sum(j * j)
    return math.sqrt(mesh.face_area / mesh.h * total)


def bochner_norm(traj: Trajectory, r: float, spatial_norm: Callable[[State], float]) -> float:
    """L^r-in-time norm of a piecewise-constant-in-time trajectory.

    The state at index k is held on [times[k], times[k+1]); the terminal
    state only marks the endpoint and carries no time weight.
    """
    if r < 1:
        raise ValueError(f"exponent must be >= 1, got {r}")
    if len(traj.states) < 2:
        raise ValueError("trajectory has no time intervals")
    total = 0.0
    for k in range(len(traj.states) - 1):
        dt_k = traj.times[k + 1] - traj.times[k]
        total += dt_k * spatial_norm(traj.states[k]) ** r
    return total ** (1.0 / r)


def neg_sobolev_norm(v: Field, k: int) -> float:
    """Negative Sobolev norm W^{-k,2} through the DFT of cell values.

    Modes e^{i pi xi.x} (period 2 per axis) are weighted by
    (1 + |pi xi|^2)^{-k}; the zero mode has weight one, so a constant c
    returns |c| * 2^{d/2}.
    """
    if k < 1:
        raise ValueError(f"order must be a positive integer, got {k}")
    mesh = v.mesh
    freqs = np.fft.fftfreq(mesh.n) * mesh.n  # integer mode numbers per axis
    xi2 = np.zeros(mesh.shape)
    for a in range(mesh.d):
        shape = [1] * mesh.d
        shape[a] = mesh.n
        xi2 = xi2 + (freqs.reshape(shape)) ** 2
    weight = (1.0 + np.pi**2 * xi2) ** (-k)
    # mode coefficients of the orthonormal basis e^{i pi xi.x} / 2^{d/2}
    scale = (mesh.cell_volume / 2.0 ** (mesh.d / 2.0)) ** 2

    comps = v.values[..., None] if not v.is_vector else v.values
    total = 0.0
    for c in range(comps.shape[-1]):
        spectrum = np.fft.fftn(comps[..., c])
        total += np.sum(weight * np.abs(spectrum) ** 2)
    return math.sqrt(scale * total)


# ---------------------------------------------------------------------------
# energy functionals


def pressure(rho: np.ndarray, a: float, gamma: float) -> np.ndarray:
    """Isentropic pressure p = a rho^gamma."""
    return a * rho**gamma


def pressure_potential(rho: np.ndarray, a: float, gamma: float) -> np.ndarray:
    """Pressure potential P with P'(r) r - P(r) = p(r), P(0) = 0."""
    return a / (gamma - 1.0) * rho**gamma


def total_energy(state: State, a: float, gamma: float) -> float:
    """Total energy sum |K| (|m|^2 / (2 rho) + P(rho)).

    Zero-density cells must carry zero momentum; negative densities or
    vacuum cells with momentum have infinite energy and are rejected.
    """
    rho = state.rho.values
    mom = state.mom.values
    if rho.min() < 0.0:
        raise EnergyError(f"negative density {rho.min():.3e}: infinite energy")
    m2 = np.sum(mom**2, axis=-1)
    zero = rho == 0.0
    if np.any(zero & (m2 > 0.0)):
        raise EnergyError("vacuum cell with nonzero momentum: infinite energy")
    kinetic = np.zeros_like(rho)
    np.divide(m2, 2.0 * rho, out=kinetic, where=~zero)
    cellwise = kinetic + pressure_potential(rho, a, gamma)
    return float(state.mesh.cell_volume * np.sum(cellwise))


def relative_energy(state: State, ref: State, a: float, gamma: float) -> float:
    """Relative energy of ``state`` against a reference on the same mesh.

    Bregman-type distance built from the kinetic energy and the pressure
    potential; strictly convex in (rho, m), zero only for equal states.
    """
    if state.mesh != ref.mesh:
        raise FieldError("states live on different meshes")
    rho_h = state.rho.values
    rho = ref.rho.values
    if rho.min() <= 0.0:
        raise FieldError("reference density must be strictly positive")
    u_h = state.velocity().values
    u = ref.velocity().values
    kinetic = 0.5 * rho_h * np.sum((u_h - u) ** 2, axis=-1)
    p_prime = a * gamma / (gamma - 1.0) * rho ** (gamma - 1.0)
    bregman = (
        pressure_potential(rho_h, a, gamma)
        - p_prime * (rho_h - rho)
        - pressure_potential(rho, a, gamma)
    )
    return float(state.mesh.cell_volume * np.sum(kinetic + bregman))
