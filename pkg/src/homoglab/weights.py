"""Maximal-average weights and the weighted inequality checks.

The weight is ``w = 1 / M(exp(V))`` where ``M`` is the cube maximal
function over grid-aligned periodic cubes.  Because the full torus is an
admissible cube, ``M(f) >= integral(f)`` everywhere and ``w`` is bounded by
``1 / integral(exp(V))``; with single-cell cubes included, ``M(f) >= f``
pointwise.  The cube family is discrete (whole-cell, grid-aligned), so every
estimated constant is a lower bound for its continuum counterpart.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .corrector import harmonic_face_weights
from .errors import ConfigurationError
from .torus import (
    PeriodicPrefixSums,
    PotentialSpec,
    ScalarField,
    TorusGrid,
    integrate_exp,
    sample_potential,
)

__all__ = [
    "MaximalConfig",
    "CubeSampling",
    "WeightReport",
    "InequalityReport",
    "TrigFamily",
    "ClassicalSobolevResult",
    "maximal_function",
    "weight_from_potential",
    "check_muckenhoupt",
    "check_aps",
    "verify_sobolev",
    "classical_sobolev_constant",
    "sobolev_exponent",
    "default_r_star",
]


def sobolev_exponent(dim: int) -> float:
    """Critical exponent s = 2d/(d-1); infinite in one dimension."""
    if dim <= 1:
        return math.inf
    return 2.0 * dim / (dim - 1.0)


def default_r_star(dim: int) -> float:
    """Midpoint of the admissible interval (2, s); a plain 3.0 when s is infinite."""
    s = sobolev_exponent(dim)
    return 3.0 if math.isinf(s) else 0.5 * (2.0 + s)


@dataclass(frozen=True)
class MaximalConfig:
    """Cube family for the maximal function.

    ``lengths`` lists cube side-lengths in cells (default: every k in 1..n).
    ``exhaustive`` switches from the sliding-window max-filter to brute-force
    enumeration of every (length, position) cube; both modes compute cube
    averages from the same box-sum primitive, so their outputs agree
    bit-for-bit.
    """

    lengths: tuple[int, ...] | None = None
    exhaustive: bool = False

    def resolved_lengths(self, n: int) -> tuple[int, ...]:
        if self.lengths is None:
            return tuple(range(1, n + 1))
        for k in self.lengths:
            if not 1 <= k <= n:
                raise ConfigurationError(f"maximal-function length {k} outside [1, {n}]")
        return tuple(int(k) for k in self.lengths)


def _backward_window_max(arr: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Max over the k window ending at each index (periodic)."""
    if k == 1:
        return arr
    filt = maximum_filter1d(arr, size=k, axis=axis, mode="wrap")
    return np.roll(filt, (k - 1) // 2, axis=axis)


def _forward_window_min(arr: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Min over the k window starting at each index (periodic)."""
    if k == 1:
        return arr
    filt = minimum_filter1d(arr, size=k, axis=axis, mode="wrap")
    return np.roll(filt, -(k // 2), axis=axis)


def maximal_function(f: ScalarField, cfg: MaximalConfig = MaximalConfig()) -> ScalarField:
    """Cube maximal function of a nonnegative field.

    At each cell the result is the maximum, over all configured side
    lengths and all grid-aligned periodic cubes containing the cell, of the
    cube average of ``f``.  The sliding-window mode computes per-length box
    averages via prefix sums and then a periodic max-filter per axis; the
    exhaustive mode enumerates every cube and scatters its average into the
    cells it covers.
    """
    if np.any(f.values < 0.0):
        bad = int(np.argmin(f.values))
        raise ConfigurationError(f"maximal_function requires nonnegative values (cell {bad})")
    grid = f.grid
    n, d = grid.cells_per_side, grid.dim
    lengths = cfg.resolved_lengths(n)
    sat = PeriodicPrefixSums(grid, f.values)
    out: np.ndarray | None = None
    if cfg.exhaustive:
        out = np.full(grid.shape, -np.inf)
        for k in lengths:
            avg = f.as_nd().copy() if k == 1 else sat.all_box_sums(k) / float(k**d)
            offsets = np.arange(k)
            for start in np.ndindex(*grid.shape):
                cover = tuple((start[a] + offsets) % n for a in range(d))
                block = out[np.ix_(*cover)]
                np.maximum(block, avg[start], out=block)
    else:
        for k in lengths:
            cand = f.as_nd().copy() if k == 1 else sat.all_box_sums(k) / float(k**d)
            for ax in range(d):
                cand = _backward_window_max(cand, k, ax)
            out = cand if out is None else np.maximum(out, cand)
    assert out is not None
    return ScalarField(grid, out.ravel(), kind="generic")


@dataclass(frozen=True)
class CubeSampling:
    """Cube-sampling policy for the constant estimators.

    The supremum over all cubes is intractable, so constants are estimated
    over all dyadic cubes plus a configured number of uniformly random cubes
    and reported as lower bounds on the true constants.
    """

    num_random: int = 10_000
    seed: int = 0
    include_dyadic: bool = True

    def cubes(self, n: int, d: int) -> dict[int, np.ndarray]:
        """Sampled cubes grouped by side length: {k: starts array (m, d)}."""
        by_k: dict[int, list[np.ndarray]] = {}
        if self.include_dyadic:
            side = n
            seen = set()
            while side >= 1:
                if side not in seen:
                    seen.add(side)
                    marks = np.arange(0, n, side)
                    mesh = np.meshgrid(*([marks] * d), indexing="ij")
                    starts = np.stack([m.ravel() for m in mesh], axis=-1)
                    by_k.setdefault(side, []).append(starts)
                if side == 1:
                    break
                side //= 2
        if self.num_random > 0:
            rng = np.random.default_rng(self.seed)
            ks = rng.integers(1, n + 1, size=self.num_random)
            ss = rng.integers(0, n, size=(self.num_random, d))
            for k in np.unique(ks):
                by_k.setdefault(int(k), []).append(ss[ks == k])
        return {k: np.unique(np.concatenate(v, axis=0), axis=0) for k, v in by_k.items()}


def _box_averages_at(values: np.ndarray, grid: TorusGrid, k: int, starts: np.ndarray) -> np.ndarray:
    sums = PeriodicPrefixSums(grid, values).all_box_sums(k)
    return sums[tuple(starts.T)] / float(k**grid.dim)


def check_muckenhoupt(
    w: ScalarField, p: float, sampling: CubeSampling = CubeSampling()
) -> float:
    """Estimated A_p constant of a positive weight over sampled cubes.

    For p > 1 the cube functional is ``avg(w) * avg(w^(-1/(p-1)))**(p-1)``;
    for p = 1 it is ``avg(w) / min(w over the cube)``.
    """
    if p < 1.0:
        raise ConfigurationError(f"A_p requires p >= 1, got {p}")
    if np.any(w.values <= 0.0):
        raise ConfigurationError("A_p constant needs a strictly positive weight")
    grid = w.grid
    n, d = grid.cells_per_side, grid.dim
    wn = w.as_nd()
    dual = None if p == 1.0 else np.power(w.values, -1.0 / (p - 1.0))
    best = 0.0
    for k, starts in sampling.cubes(n, d).items():
        avg_w = _box_averages_at(w.values, grid, k, starts)
        if p == 1.0:
            mins = wn
            for ax in range(d):
                mins = _forward_window_min(mins, k, ax)
            vals = avg_w / mins[tuple(starts.T)]
        else:
            avg_dual = _box_averages_at(dual, grid, k, starts)
            vals = avg_w * avg_dual ** (p - 1.0)
        best = max(best, float(vals.max()))
    return best


def check_aps(
    w: ScalarField,
    V: ScalarField,
    s: float | None = None,
    p: float = 2.0,
    sampling: CubeSampling = CubeSampling(),
) -> float:
    """Supremum over sampled cubes of the two-weight embedding functional.

    Evaluates ``(int_I w)^(1/s) * (int_I exp(V))^(1/2) / |I|^(1-1/d)``; by the
    pointwise cube bound on the weight this never exceeds
    ``integral(exp(V)) ** (1/2 - 1/s)`` when the maximal function's length
    list covers the sampled cube sizes.
    """
    grid = w.grid
    if grid.dim < 2:
        raise ConfigurationError(
            "the two-weight cube condition is defined for d >= 2 only "
            "(the exponent s = 2d/(d-1) degenerates at d = 1)"
        )
    if p != 2.0:
        raise ConfigurationError(f"only the quadratic case p = 2 is supported, got p={p}")
    s_expected = sobolev_exponent(grid.dim)
    if s is None:
        s = s_expected
    elif not math.isclose(s, s_expected, rel_tol=1e-12):
        raise ConfigurationError(f"s must equal 2d/(d-1) = {s_expected}, got {s}")
    n, d = grid.cells_per_side, grid.dim
    h = grid.spacing
    expV = np.exp(V.values)
    best = 0.0
    for k, starts in sampling.cubes(n, d).items():
        int_w = _box_averages_at(w.values, grid, k, starts) * (k * h) ** d
        int_e = _box_averages_at(expV, grid, k, starts) * (k * h) ** d
        measure = float((k * h) ** d)
        vals = int_w ** (1.0 / s) * np.sqrt(int_e) / measure ** (1.0 - 1.0 / d)
        best = max(best, float(vals.max()))
    return best


@dataclass(frozen=True)
class WeightReport:
    """The maximal-average weight together with its estimated constants."""

    weight: ScalarField
    upper_bound: float
    ap_constants: dict[float, float]
    aps_constant: float | None
    s: float
    r_star: float

    def to_json_dict(self) -> dict:
        return {
            "weight_upper_bound": self.upper_bound,
            "ap_constants": {str(p): c for p, c in sorted(self.ap_constants.items())},
            "aps_constant": self.aps_constant,
            "s": self.s if math.isfinite(self.s) else None,
            "r_star": self.r_star,
        }


def weight_from_potential(
    V: ScalarField,
    cfg: MaximalConfig = MaximalConfig(),
    ap_orders: tuple[float, ...] = (2.0, 3.0),
    sampling: CubeSampling = CubeSampling(),
) -> WeightReport:
    """Build w = 1 / M(exp(V)) and estimate its cube constants.

    Membership in some finite-order A_p certifies the A_infinity property;
    the epsilon-delta formulation is not tested directly since it quantifies
    over all measurable subsets.
    """
    if V.kind != "potential":
        raise ConfigurationError(f"expected a potential field, got kind={V.kind!r}")
    grid = V.grid
    expV = ScalarField(grid, np.exp(V.values), kind="exp_potential")
    M = maximal_function(ScalarField(grid, expV.values, kind="generic"), cfg)
    w = ScalarField(grid, 1.0 / M.values, kind="weight")
    upper = 1.0 / integrate_exp(V, +1)
    ap = {float(p): check_muckenhoupt(w, float(p), sampling) for p in ap_orders}
    aps = None
    if grid.dim >= 2:
        aps = check_aps(w, V, sampling=sampling)
    return WeightReport(
        weight=w,
        upper_bound=upper,
        ap_constants=ap,
        aps_constant=aps,
        s=sobolev_exponent(grid.dim),
        r_star=default_r_star(grid.dim),
    )


@dataclass(frozen=True)
class TrigFamily:
    """Random trigonometric test polynomials with unit-normal coefficients.

    Every integer mode with ``0 < max|k| <= max_frequency`` receives
    independent standard-normal cosine and sine coefficients.  Coefficients
    are drawn once from ``seed``, independent of the grid resolution, so the
    same family can be sampled on two grids for refinement-stability checks.
    Functions are exactly centered (no constant mode).
    """

    num_functions: int = 1000
    max_frequency: int = 16
    seed: int = 0

    def _modes(self, dim: int) -> np.ndarray:
        K = self.max_frequency
        rng = range(-K, K + 1)
        modes = []
        for k in np.stack(np.meshgrid(*([list(rng)] * dim), indexing="ij"), axis=-1).reshape(-1, dim):
            nz = k[k != 0]
            if nz.size and nz[0] > 0:  # one representative per +/- pair
                modes.append(k)
        return np.asarray(modes, dtype=np.int64)

    def coefficients(self, dim: int) -> tuple[np.ndarray, np.ndarray]:
        modes = self._modes(dim)
        rng = np.random.default_rng(self.seed)
        coeffs = rng.standard_normal((self.num_functions, modes.shape[0], 2))
        return modes, coeffs

    def sample(self, grid: TorusGrid, batch: slice | None = None) -> np.ndarray:
        """Sampled values at cell centers, shape (num, *grid.shape)."""
        n, d = grid.cells_per_side, grid.dim
        if 2 * self.max_frequency >= n:
            raise ConfigurationError(
                f"max_frequency {self.max_frequency} is not resolvable on an n={n} grid"
            )
        modes, coeffs = self.coefficients(d)
        if batch is not None:
            coeffs = coeffs[batch]
        num = coeffs.shape[0]
        spectrum = np.zeros((num,) + grid.shape, dtype=np.complex128)
        pos = tuple((modes[:, a]) % n for a in range(d))
        neg = tuple((-modes[:, a]) % n for a in range(d))
        c = 0.5 * (coeffs[:, :, 0] - 1j * coeffs[:, :, 1])
        spectrum[(slice(None),) + pos] = c
        spectrum[(slice(None),) + neg] = np.conj(c)
        # midpoint sampling: modes pick up the half-cell phase per axis
        freqs = np.fft.fftfreq(n, d=1.0 / n)
        for ax in range(d):
            shape = [1] * (d + 1)
            shape[ax + 1] = n
            spectrum *= np.exp(1j * np.pi * freqs / n).reshape(shape)
        vals = np.fft.ifftn(spectrum, axes=tuple(range(1, d + 1))).real * (n**d)
        return vals


@dataclass(frozen=True)
class InequalityReport:
    """Empirical constants for the weighted embedding and its quadratic form."""

    num_test_functions: int
    max_ratio: float
    poincare_max_ratio: float
    violating_function: str | None = None
    r_star: float = 3.0

    def to_json_dict(self) -> dict:
        return {
            "num_test_functions": self.num_test_functions,
            "max_ratio": self.max_ratio,
            "poincare_max_ratio": self.poincare_max_ratio,
            "violating_function": self.violating_function,
            "r_star": self.r_star,
        }


def verify_sobolev(
    V: ScalarField,
    w: ScalarField,
    r_star: float,
    family: TrigFamily,
    chunk: int = 64,
) -> InequalityReport:
    """Empirical constant of the weighted embedding over a test family.

    For each test function the ratio
    ``(int |f|^r* w)^(2/r*) / int |grad f|^2 exp(-V)`` is evaluated with
    midpoint sums and harmonic-mean face gradients; the report carries the
    maximum together with the analogous exponent-2 ratio.  Functions are
    centered by subtracting their discrete mean before evaluation, and the
    identically-zero function gets ratio 0 by convention.
    """
    grid = V.grid
    d, n = grid.dim, grid.cells_per_side
    s = sobolev_exponent(d)
    if not 2.0 < r_star < s:
        raise ConfigurationError(f"r_star must lie in (2, {s}), got {r_star}")
    if w.grid != grid:
        raise ConfigurationError("weight and potential live on different grids")
    h = grid.spacing
    faces = harmonic_face_weights(V)
    wn = w.as_nd()
    hd = h**d
    max_ratio = 0.0
    max_poin = 0.0
    arg = None
    total = 0
    for lo in range(0, family.num_functions, chunk):
        batch = slice(lo, min(lo + chunk, family.num_functions))
        F = family.sample(grid, batch=batch)
        F -= F.mean(axis=tuple(range(1, d + 1)), keepdims=True)
        den = np.zeros(F.shape[0])
        for ax in range(d):
            df = (np.roll(F, -1, axis=ax + 1) - F) / h
            den += (faces[ax] * df * df).sum(axis=tuple(range(1, d + 1)))
        den *= hd
        num = (np.abs(F) ** r_star * wn).sum(axis=tuple(range(1, d + 1))) * hd
        num = num ** (2.0 / r_star)
        poin = (F**2 * wn).sum(axis=tuple(range(1, d + 1))) * hd
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.where(den > 0.0, num / den, 0.0)
            poins = np.where(den > 0.0, poin / den, 0.0)
        total += F.shape[0]
        imax = int(np.argmax(ratios))
        if ratios[imax] > max_ratio:
            max_ratio = float(ratios[imax])
            arg = f"family(seed={family.seed}, max_frequency={family.max_frequency}), index {lo + imax}"
        max_poin = max(max_poin, float(poins.max()))
    return InequalityReport(
        num_test_functions=total,
        max_ratio=max_ratio,
        poincare_max_ratio=max_poin,
        violating_function=arg,
        r_star=r_star,
    )


@dataclass(frozen=True)
class ClassicalSobolevResult:
    """Explicit embedding-constant factor from the unweighted route.

    ``applicable`` is False when ``exp(r V)`` fails the refinement-stability
    integrability check; that is a value, not an error.
    """

    applicable: bool
    factor: float | None
    p: float | None
    r: float
    reason: str

    def to_json_dict(self) -> dict:
        return {
            "applicable": self.applicable,
            "factor": self.factor,
            "p": self.p,
            "r": self.r,
            "reason": self.reason,
        }


def classical_sobolev_constant(
    V: ScalarField,
    r: float,
    spec: PotentialSpec | None = None,
    stability_rtol: float = 0.05,
) -> ClassicalSobolevResult:
    """Explicit constant factor ``(int exp(rV))^((2-p)/(2p))`` with p = 2r/(1+r).

    Requires ``r > d/2`` (equivalently p above the critical 2d/(d+2)) and an
    integrability check on ``exp(rV)``: when the generating preset is known
    the integral is compared against a half-resolution resampling, otherwise
    against the coarse sub-lattice estimates of the same field.
    """
    grid = V.grid
    d, n = grid.dim, grid.cells_per_side
    if d < 2:
        raise ConfigurationError("the explicit-constant route needs d >= 2")
    if r <= d / 2.0:
        return ClassicalSobolevResult(
            False, None, None, r, f"requires r > d/2 = {d / 2.0}, got r={r}"
        )
    p = 2.0 * r / (1.0 + r)
    h = grid.spacing
    rv = r * V.values
    if rv.max() > 700.0:
        return ClassicalSobolevResult(False, None, p, r, "exp(rV) overflows on the grid")
    integral = float(h**d * np.exp(rv).sum())
    if spec is not None and n % 2 == 0:
        from .torus import build_grid  # local import to avoid cycle at module load

        coarse_grid = build_grid(d, n // 2)
        Vc = sample_potential(spec, coarse_grid)
        coarse = float(coarse_grid.spacing**d * np.exp(r * Vc.values).sum())
    else:
        # decimation surrogate: fine integral vs the 2^d coarse sub-lattices
        nd = np.exp(rv).reshape(grid.shape)
        subs = []
        for corner in np.ndindex(*((2,) * d)):
            sl = tuple(slice(c, None, 2) for c in corner)
            subs.append(float((2.0 * h) ** d * nd[sl].sum()))
        coarse = max(subs, key=lambda v: abs(v - integral))
    drift = abs(integral - coarse) / integral
    if drift > stability_rtol:
        return ClassicalSobolevResult(
            False,
            None,
            p,
            r,
            f"integral of exp(rV) unstable under refinement (relative drift {drift:.2g})",
        )
    factor = integral ** ((2.0 - p) / (2.0 * p))
    return ClassicalSobolevResult(True, factor, p, r, "stable")
