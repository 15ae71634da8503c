"""Discrete weighted Dirichlet energy, corrector cell problem, effective diffusivity.

The operator is the periodic finite-volume form

    (K f)_x = sum_faces a_face * (f_x - f_neighbor) / h**2,

with ``a_face`` the harmonic mean of ``exp(-V)`` at the two adjacent cells.
Harmonic-mean faces reproduce the exact series-resistor (harmonic mean)
conductivity in one dimension for cell-aligned piecewise-constant data;
arithmetic-mean faces would systematically overestimate the diffusivity.
``K`` is symmetric positive-semidefinite with kernel the constants and
represents twice the quadratic energy in the midpoint inner product
``h**d * sum``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import AssemblyError, ConfigurationError, FieldRangeError, SolverConvergenceError
from .torus import PotentialSpec, ScalarField, TorusGrid, build_grid, sample_potential

__all__ = [
    "WeightedOperator",
    "CorrectorComponent",
    "CorrectorSolution",
    "DiffusivityMatrix",
    "RefinementStudy",
    "harmonic_face_weights",
    "dirichlet_energy",
    "assemble_operator",
    "solve_corrector",
    "solve_all_directions",
    "effective_diffusivity",
    "refinement_study",
]

_EXP_OVERFLOW = 709.0


def harmonic_face_weights(V: ScalarField) -> tuple[np.ndarray, ...]:
    """Per-axis face weights: harmonic mean of exp(-V) across each face.

    Entry ``[ax][x]`` is the weight of the face between cell ``x`` and its
    forward neighbor along ``ax``.  Computed as ``2 / (exp(V_x) + exp(V_nb))``
    so very negative potentials cannot overflow the intermediate.
    """
    if V.kind != "potential":
        raise ConfigurationError(f"expected a potential field, got kind={V.kind!r}")
    vals = V.values
    worst_hi = int(np.argmax(vals))
    if vals[worst_hi] > _EXP_OVERFLOW:
        raise FieldRangeError(
            f"exp(V) overflows at cell {worst_hi}", cell_index=worst_hi, value=float(vals[worst_hi])
        )
    worst_lo = int(np.argmin(vals))
    if -vals[worst_lo] > _EXP_OVERFLOW:
        raise FieldRangeError(
            f"exp(-V) overflows at cell {worst_lo}", cell_index=worst_lo, value=float(vals[worst_lo])
        )
    expV = np.exp(V.as_nd())
    return tuple(2.0 / (expV + np.roll(expV, -1, axis=ax)) for ax in range(V.grid.dim))


@dataclass(frozen=True)
class WeightedOperator:
    """Finite-volume operator with precomputed sparse action."""

    grid: TorusGrid
    face_weights: tuple[np.ndarray, ...]
    matrix: sp.csr_matrix

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix.dot(values)

    def energy(self, f: np.ndarray, g: np.ndarray | None = None) -> float:
        """Quadratic form (1/2) h^d sum_faces a * (Df)(Dg), D = face difference / h."""
        if g is None:
            g = f
        fn = np.asarray(f).reshape(self.grid.shape)
        gn = np.asarray(g).reshape(self.grid.shape)
        h = self.grid.spacing
        total = 0.0
        for ax, a in enumerate(self.face_weights):
            df = (np.roll(fn, -1, axis=ax) - fn) / h
            dg = (np.roll(gn, -1, axis=ax) - gn) / h
            total += float((a * df * dg).sum())
        return 0.5 * h**self.grid.dim * total


def dirichlet_energy(V: ScalarField, f: np.ndarray) -> float:
    """(1/2) * integral of |grad f|^2 exp(-V), discretized with harmonic faces."""
    faces = harmonic_face_weights(V)
    grid = V.grid
    fn = np.asarray(f, dtype=np.float64).reshape(grid.shape)
    h = grid.spacing
    total = 0.0
    for ax, a in enumerate(faces):
        df = (np.roll(fn, -1, axis=ax) - fn) / h
        total += float((a * df * df).sum())
    return 0.5 * h**grid.dim * total


def assemble_operator(V: ScalarField) -> WeightedOperator:
    """Assemble the periodic finite-volume operator for a potential field."""
    grid = V.grid
    faces = harmonic_face_weights(V)
    n, d, N = grid.cells_per_side, grid.dim, grid.total_cells
    h2 = grid.spacing**2
    idx = np.arange(N).reshape(grid.shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(grid.shape)
    for ax in range(d):
        a = faces[ax]
        nb = np.roll(idx, -1, axis=ax)
        coeff = a.ravel() / h2
        rows.append(idx.ravel())
        cols.append(nb.ravel())
        vals.append(-coeff)
        rows.append(nb.ravel())
        cols.append(idx.ravel())
        vals.append(-coeff)
        diag += a / h2
        diag += np.roll(a, 1, axis=ax) / h2
    rows.append(idx.ravel())
    cols.append(idx.ravel())
    vals.append(diag.ravel())
    mat = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)
    )
    mat.sum_duplicates()
    return WeightedOperator(grid, faces, mat)


@dataclass(frozen=True)
class CorrectorComponent:
    """One solved corrector direction with its diagnostics."""

    field: ScalarField
    source: ScalarField  # b_i, satisfying K v_i + b_i = 0 at the solution
    residual_norm: float
    iterations: int


@dataclass(frozen=True)
class CorrectorSolution:
    """All d corrector components with face gradients and solver diagnostics."""

    grid: TorusGrid
    components: tuple[ScalarField, ...]
    sources: tuple[ScalarField, ...]
    gradients: tuple[tuple[np.ndarray, ...], ...]  # [component][axis] face differences / h
    residual_norms: tuple[float, ...]
    iterations: tuple[int, ...]


def _projected_cg(
    matrix: sp.csr_matrix, b: np.ndarray, tol: float, maxiter: int
) -> tuple[np.ndarray, int, float]:
    """Jacobi-preconditioned CG on the mean-zero subspace.

    The constant mode (kernel of the operator) is projected out of the
    right-hand side and re-projected out of the residual every iteration to
    stop roundoff from reintroducing it.
    """
    invdiag = 1.0 / matrix.diagonal()
    b = b - b.mean()
    x = np.zeros_like(b)
    r = b.copy()
    b0 = float(np.linalg.norm(b))
    if b0 == 0.0:
        return x, 0, 0.0
    z = invdiag * r
    p = z.copy()
    rz = float(r @ z)
    res = b0
    it = 0
    while it < maxiter:
        Ap = matrix.dot(p)
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        r -= r.mean()
        res = float(np.linalg.norm(r))
        it += 1
        if res <= tol * b0:
            break
        z = invdiag * r
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    x -= x.mean()
    return x, it, res / b0


def solve_corrector(
    op: WeightedOperator,
    direction: int,
    tol: float = 1e-10,
    max_iterations: int | None = None,
) -> CorrectorComponent:
    """Solve the cell problem in one direction.

    The right-hand side is the discrete divergence of the direction-``i``
    face weights, so the solved field satisfies the discrete conservation law
    div(exp(-V) * (e_i + grad v_i)) = 0.  The solution is centered to mean
    zero; the constant offset never enters gradients or the diffusivity.
    """
    grid = op.grid
    if not 0 <= direction < grid.dim:
        raise ConfigurationError(f"direction must be in [0, {grid.dim}), got {direction}")
    if max_iterations is None:
        max_iterations = 50 * grid.cells_per_side
    h = grid.spacing
    a = op.face_weights[direction]
    rhs = ((a - np.roll(a, 1, axis=direction)) / h).ravel()
    scale = float(np.abs(rhs).sum())
    if abs(float(rhs.sum())) > 1e-10 * (scale + 1.0):
        raise AssemblyError(
            f"direction-{direction} source has nonzero mean {rhs.sum():.3e}; "
            "face weights were assembled inconsistently"
        )
    x, iters, relres = _projected_cg(op.matrix, rhs, tol, max_iterations)
    if relres > tol:
        raise SolverConvergenceError(
            f"corrector solve in direction {direction} stalled at relative residual "
            f"{relres:.3e} after {iters} iterations (tolerance {tol:.1e})",
            achieved_residual=relres,
            iterations=iters,
        )
    field = ScalarField(grid, x, kind="corrector")
    source = ScalarField(grid, -rhs, kind="generic")
    return CorrectorComponent(field, source, relres, iters)


def solve_all_directions(
    op: WeightedOperator, tol: float = 1e-10, max_iterations: int | None = None
) -> CorrectorSolution:
    comps = [solve_corrector(op, i, tol, max_iterations) for i in range(op.grid.dim)]
    h = op.grid.spacing
    grads = tuple(
        tuple(
            (np.roll(c.field.as_nd(), -1, axis=ax) - c.field.as_nd()) / h
            for ax in range(op.grid.dim)
        )
        for c in comps
    )
    return CorrectorSolution(
        grid=op.grid,
        components=tuple(c.field for c in comps),
        sources=tuple(c.source for c in comps),
        gradients=grads,
        residual_norms=tuple(c.residual_norm for c in comps),
        iterations=tuple(c.iterations for c in comps),
    )


@dataclass(frozen=True)
class DiffusivityMatrix:
    """Effective diffusivity with its normalization metadata."""

    sigma_bar: np.ndarray
    sigma_unnormalized: np.ndarray
    k_constant: float | None
    normalization: str
    residual_norms: tuple[float, ...]
    n: int
    dim: int
    preset: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "sigma_bar": [list(map(float, row)) for row in self.sigma_bar],
            "sigma_unnormalized": [list(map(float, row)) for row in self.sigma_unnormalized],
            "k_constant": self.k_constant,
            "normalization": self.normalization,
            "residuals": list(self.residual_norms),
            "n": self.n,
            "dim": self.dim,
            "preset": self.preset,
        }


def effective_diffusivity(
    sol: CorrectorSolution,
    V: ScalarField,
    w: ScalarField | None = None,
    preset: str | None = None,
) -> DiffusivityMatrix:
    """Assemble the effective diffusivity from the solved correctors.

    The unnormalized matrix is the face-wise energy
    ``h^d sum_faces a_face (e_i + Dv_i) . (e_j + Dv_j)`` with the unit vector
    added on faces normal to its own direction; this keeps the discrete
    energy identity exact.  ``sigma_bar`` divides by the integral of
    ``exp(-V)``, the unique normalization that reproduces the classical
    one-dimensional harmonic-mean diffusivity.  ``k_constant`` is the clock
    rate ``integral(w) / integral(exp(-V))`` when a weight is supplied.
    """
    grid = sol.grid
    if V.grid != grid:
        raise ConfigurationError("corrector solution and potential live on different grids")
    d = grid.dim
    faces = harmonic_face_weights(V)
    h = grid.spacing
    sigma_un = np.zeros((d, d))
    for ax in range(d):
        a = faces[ax]
        recon = []
        for i in range(d):
            g = sol.gradients[i][ax]
            recon.append(g + 1.0 if ax == i else g)
        for i in range(d):
            for j in range(i, d):
                val = float((a * recon[i] * recon[j]).sum()) * h**d
                sigma_un[i, j] += val
                if i != j:
                    sigma_un[j, i] += val
    int_exp_neg = float(h**d * np.exp(-V.values).sum())
    sigma_bar = sigma_un / int_exp_neg
    k = None
    if w is not None:
        if w.grid != grid:
            raise ConfigurationError("weight field lives on a different grid")
        k = float(h**d * w.values.sum()) / int_exp_neg
    return DiffusivityMatrix(
        sigma_bar=sigma_bar,
        sigma_unnormalized=sigma_un,
        k_constant=k,
        normalization="unnormalized_energy / integral(exp(-V))",
        residual_norms=sol.residual_norms,
        n=grid.cells_per_side,
        dim=d,
        preset=preset,
    )


@dataclass(frozen=True)
class RefinementStudy:
    """Diffusivity across a refinement ladder with observed convergence orders."""

    n_list: tuple[int, ...]
    matrices: tuple[DiffusivityMatrix, ...]
    differences: tuple[float, ...]  # Frobenius norms of consecutive sigma_bar changes
    observed_orders: tuple[float | None, ...]  # None when below the solver floor
    richardson_limit: np.ndarray
    solver_floor: float

    def converged_at_floor(self) -> bool:
        """True when every consecutive change sits below the solver floor."""
        return all(diff <= self.solver_floor for diff in self.differences)

    def to_json_dict(self) -> dict:
        return {
            "n_list": list(self.n_list),
            "sigma_bar": [m.to_json_dict()["sigma_bar"] for m in self.matrices],
            "differences": list(self.differences),
            "observed_orders": [o for o in self.observed_orders],
            "richardson_limit": [list(map(float, row)) for row in self.richardson_limit],
            "solver_floor": self.solver_floor,
        }


def refinement_study(
    spec: PotentialSpec,
    dim: int,
    n_list: tuple[int, ...],
    tol: float = 1e-10,
) -> RefinementStudy:
    """Solve the cell problem on a ladder of grids and estimate convergence.

    Consecutive differences below ``solver_floor`` (a small multiple of the
    CG tolerance) carry no order information: the scheme has already
    converged to solver precision there, and the order slot reports None.
    """
    if len(n_list) < 2 or any(b <= a for a, b in zip(n_list, n_list[1:])):
        raise ConfigurationError("n_list must be strictly increasing with at least two entries")
    mats = []
    for n in n_list:
        grid = build_grid(dim, n)
        V = sample_potential(spec, grid)
        op = assemble_operator(V)
        sol = solve_all_directions(op, tol=tol)
        mats.append(effective_diffusivity(sol, V, preset=spec.preset))
    diffs = [
        float(np.linalg.norm(a.sigma_bar - b.sigma_bar)) for a, b in zip(mats, mats[1:])
    ]
    scale = float(np.linalg.norm(mats[-1].sigma_bar))
    floor = 100.0 * tol * max(scale, 1.0)
    orders: list[float | None] = []
    for d1, d2 in zip(diffs, diffs[1:]):
        if d1 <= floor or d2 <= floor:
            orders.append(None)
        else:
            orders.append(math.log2(d1 / d2))
    valid = [o for o in orders if o is not None]
    p = float(np.median(valid)) if valid else 2.0
    if len(mats) >= 2 and diffs[-1] > floor:
        gain = 2.0**p - 1.0
        extrap = mats[-1].sigma_bar + (mats[-1].sigma_bar - mats[-2].sigma_bar) / gain
    else:
        extrap = mats[-1].sigma_bar.copy()
    return RefinementStudy(
        n_list=tuple(int(n) for n in n_list),
        matrices=tuple(mats),
        differences=tuple(diffs),
        observed_orders=tuple(orders),
        richardson_limit=extrap,
        solver_floor=floor,
    )
