"""Path simulation, random time change, corrector martingale, and the
Monte Carlo checks of the diffusive limit.

The driving process solves ``dX = -(1/2) grad V(X) dt + dB`` by
Euler-Maruyama with the drift taken from centered differences of the
sampled potential and interpolated along the path.  The clock
``A_t = integral of w(X) exp(V(X))`` is accumulated by the trapezoid rule at
full step resolution while the paths are generated; the time-changed
process, its corrector martingale ``M = X_tc + v(X_tc)``, and the predicted
bracket ``integral of (exp(-V)/w) (e + grad v)(e + grad v)`` are evaluated
afterwards from the recorded states.

Simulation covers the smooth presets only (zero, cosine, separable cosine,
and mollified log-singular): pathwise discretization needs a drift, while
the solver-side quantities (weight, corrector, diffusivity) remain
available for singular presets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy import stats as sps

from . import _kernels
from .corrector import CorrectorSolution, DiffusivityMatrix, dirichlet_energy
from .errors import ConfigurationError
from .philox import STREAM_START, compose_block, split_seed, uniform_pairs_np
from .torus import PotentialSpec, ScalarField, TorusGrid

__all__ = [
    "SimConfig",
    "PathEnsemble",
    "McReport",
    "ExcursionCheck",
    "DensityCheck",
    "InvarianceConfig",
    "simulate_paths",
    "time_change",
    "corrector_martingale",
    "invariance_check",
    "excursion_bound_check",
    "density_bound_check",
    "stability_guard",
]

START_MODES = ("point", "reversible", "weight_law")


def stability_guard(grid: TorusGrid, V: ScalarField) -> float:
    """Heuristic step-size guard h^2/2 scaled by min(exp(V)); advisory only."""
    return 0.5 * grid.spacing**2 * float(np.exp(V.values.min()))


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one path ensemble.

    ``dt`` and ``horizon`` are in the intrinsic (unscaled) time of the
    process; the rescaled process at scale ``epsilon`` reaches macroscopic
    time 1 at ``horizon = epsilon**-2``.  ``record_stride`` of ``m`` stores
    every m-th state (0 stores none, endpoint only).  Lookups along paths
    are multilinear by default; ``nearest`` exists to cross-check
    interpolation bias.
    """

    dt: float
    horizon: float
    epsilon: float = 1.0
    num_paths: int = 1000
    seed: int = 0
    interpolation: str = "multilinear"
    start: str = "point"
    x0: tuple[float, ...] = dc_field(default=())
    record_stride: int = 0

    def validate(self) -> None:
        if self.dt <= 0.0:
            raise ConfigurationError(f"sim.dt must be positive, got {self.dt}")
        if self.horizon < 0.0:
            raise ConfigurationError(f"sim.horizon must be >= 0, got {self.horizon}")
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigurationError(f"sim.epsilon must lie in (0, 1], got {self.epsilon}")
        if self.num_paths < 1:
            raise ConfigurationError(f"sim.num_paths must be >= 1, got {self.num_paths}")
        if self.interpolation not in ("multilinear", "nearest"):
            raise ConfigurationError(
                f"sim.interpolation must be 'multilinear' or 'nearest', got {self.interpolation!r}"
            )
        if self.start not in START_MODES:
            raise ConfigurationError(f"sim.start must be one of {START_MODES}, got {self.start!r}")
        if self.record_stride < 0:
            raise ConfigurationError("sim.record_stride must be >= 0")


@dataclass
class PathEnsemble:
    """Simulated trajectories with optional clock / time-change data.

    ``final_positions`` are unwrapped endpoints in R^d; projection onto the
    torus is ``positions % 1``.  ``record_clock`` carries the clock at the
    recorded states; ``sup_stat`` is the running sup of the norm of the
    tracked field stack along each path.  Time-change augmentation fills
    ``clock_grid`` (uniform grid in the new clock), ``timechanged_positions``,
    and the martingale blocks.
    """

    grid: TorusGrid
    config: SimConfig
    final_positions: np.ndarray  # (P, d) unwrapped
    final_clock: np.ndarray  # (P,) clock value A at the endpoint
    steps_done: np.ndarray  # (P,) integer step counts
    guard: float
    guard_ok: bool
    sup_stat: np.ndarray | None = None  # (P,) sup of |field stack| along path
    record_times: np.ndarray | None = None  # (R,)
    record_positions: np.ndarray | None = None  # (P, R, d) unwrapped
    record_clock: np.ndarray | None = None  # (P, R)
    clock_grid: np.ndarray | None = None  # (Q,)
    timechanged_positions: np.ndarray | None = None  # (P, Q, d)
    martingale: np.ndarray | None = None  # (P, Q, d)
    bracket_pred: np.ndarray | None = None  # (P, Q, d, d) cumulative
    martingale_records: np.ndarray | None = None  # (P, R+1, d) on the record partition
    bracket_records_total: np.ndarray | None = None  # (P, d, d)
    start_positions: np.ndarray | None = None  # (P, d)

    @property
    def projected(self) -> np.ndarray:
        return self.final_positions % 1.0

    @property
    def final_times(self) -> np.ndarray:
        return self.steps_done * self.config.dt


def _centered_drift(V: ScalarField) -> np.ndarray:
    """Centered-difference gradient of V per axis, shape (d, n**d)."""
    grid = V.grid
    vn = V.as_nd()
    h = grid.spacing
    return np.stack(
        [((np.roll(vn, -1, axis=ax) - np.roll(vn, 1, axis=ax)) / (2.0 * h)).ravel() for ax in range(grid.dim)]
    )


def _start_positions(grid: TorusGrid, cfg: SimConfig, V: ScalarField, w: ScalarField | None) -> np.ndarray:
    """Initial unwrapped positions per the configured start law."""
    d = grid.dim
    P = cfg.num_paths
    if cfg.start == "point":
        x0 = np.asarray(cfg.x0 if cfg.x0 else (0.0,) * d, dtype=np.float64)
        if x0.shape != (d,):
            raise ConfigurationError(f"sim.x0 needs {d} coordinates, got {len(x0)}")
        return np.tile(x0, (P, 1))
    if cfg.start == "reversible":
        density = np.exp(-V.values)
    else:  # weight_law
        if w is None:
            raise ConfigurationError("start='weight_law' requires a weight field")
        density = w.values.copy()
    cum = np.cumsum(density)
    cum /= cum[-1]
    paths = np.arange(P, dtype=np.uint64)
    u_sel, u_j0 = uniform_pairs_np(cfg.seed, paths, np.full(P, compose_block(STREAM_START, 0)))
    jitter = [u_j0]
    if d > 1:
        u_j1, u_j2 = uniform_pairs_np(cfg.seed, paths, np.full(P, compose_block(STREAM_START, 1)))
        jitter += [u_j1, u_j2]
    cells = np.searchsorted(cum, u_sel, side="left")
    cells = np.minimum(cells, grid.total_cells - 1)
    multi = np.stack(np.unravel_index(cells, grid.shape), axis=-1).astype(np.float64)
    jit = np.stack(jitter[:d], axis=-1)
    return (multi + jit) * grid.spacing


def simulate_paths(
    V: ScalarField,
    cfg: SimConfig,
    spec: PotentialSpec | None = None,
    weight: ScalarField | None = None,
    sup_fields: tuple[ScalarField, ...] | None = None,
    clock_target: float = 0.0,
    clock_rate_hint: float | None = None,
) -> PathEnsemble:
    """Generate an ensemble of independent trajectories.

    When ``weight`` is given the clock integrand ``w * exp(V)`` is
    accumulated along every path at full step resolution.  ``sup_fields``
    tracks the running sup of the Euclidean norm of the interpolated field
    stack.  A positive ``clock_target`` stops each path once its clock
    crosses the target (recording the crossing state) instead of running to
    the fixed horizon; the sup statistic is then restricted to the portion
    of the path with clock below the target.

    Results are deterministic functions of (seed, path index): the noise is
    counter-addressed, so neither threading nor path batching changes any
    output bit.
    """
    cfg.validate()
    if V.kind != "potential":
        raise ConfigurationError(f"simulate_paths expects a potential field, got {V.kind!r}")
    if spec is not None:
        spec.validate(V.grid.dim)
        if not spec.is_smooth():
            raise ConfigurationError(
                f"preset {spec.preset!r} with smoothing={spec.smoothing} has no pointwise "
                "drift; simulation covers smooth presets only"
            )
    grid = V.grid
    d, n = grid.dim, grid.cells_per_side
    P = cfg.num_paths
    k0, k1 = split_seed(cfg.seed)
    drift = _centered_drift(V)
    guard = stability_guard(grid, V)
    nearest = cfg.interpolation == "nearest"

    if weight is not None:
        if weight.grid != grid:
            raise ConfigurationError("weight field lives on a different grid")
        gclock = (weight.values * np.exp(V.values)).copy()
    else:
        gclock = np.empty(0)
        if clock_target > 0.0:
            raise ConfigurationError("clock_target needs a weight field for the clock")
    if sup_fields:
        fsup = np.stack([f.values for f in sup_fields])
    else:
        fsup = np.empty((0, 0))

    x = _start_positions(grid, cfg, V, weight)
    start_x = x.copy()
    a_sc = np.zeros(P)
    supsq = np.zeros(P)
    gprev = np.zeros(P)
    if gclock.size:
        gprev[:] = _interp_many(gclock, grid, x, nearest)

    n_steps = int(round(cfg.horizon / cfg.dt))
    stride = cfg.record_stride
    if stride:
        if clock_target > 0.0:
            raise ConfigurationError("records and clock_target stopping cannot be combined")
        R = n_steps // stride
    else:
        R = 0
    a_target_sc = clock_target / cfg.dt if clock_target > 0.0 else 0.0
    steps_done = np.full(P, n_steps, dtype=np.int64)

    if d == 1:
        drift1 = np.ascontiguousarray(drift[0])
        rec_x = np.zeros((P, R))
        rec_a = np.zeros((P, R))
        x1 = np.ascontiguousarray(x[:, 0])
        if clock_target > 0.0:
            rate = clock_rate_hint if clock_rate_hint else float(np.mean(gclock))
            # bulk phase: advance most of the way with the blocked kernel,
            # then finish each path to its exact crossing with the scalar one
            bulk = int(0.85 * clock_target / (max(rate, 1e-12) * cfg.dt))
            bulk -= bulk % 2
            if bulk > 1024 and P >= _kernels.BLOCK:
                _kernels.em1d_blocked(
                    x1, a_sc, gprev, supsq, k0, k1, np.uint64(0), 0, bulk, cfg.dt, n,
                    drift1, gclock, fsup, a_target_sc, 0, rec_x, rec_a, nearest,
                )
            else:
                bulk = 0
            cap = int(max(4.0 * clock_target / (max(rate, 1e-12) * cfg.dt), 1000.0)) + bulk
            tail = np.zeros(P, dtype=np.int64)
            _kernels.em1d_scalar(
                x1, a_sc, gprev, supsq, tail, k0, k1, np.uint64(0), bulk, cap - bulk,
                cfg.dt, n, drift1, gclock, fsup, a_target_sc, 0, rec_x, rec_a, nearest,
            )
            steps_done = bulk + tail
            unfinished = int((a_sc < a_target_sc).sum())
            if unfinished:
                raise ConfigurationError(
                    f"{unfinished} paths did not reach the clock target within the step cap; "
                    "increase horizon headroom or check the clock integrand"
                )
        else:
            _kernels.em1d_blocked(
                x1, a_sc, gprev, supsq, k0, k1, np.uint64(0), 0, n_steps, cfg.dt, n,
                drift1, gclock, fsup, 0.0, stride, rec_x, rec_a, nearest,
            )
        x = x1[:, None]
        rec_pos = rec_x[:, :, None] if stride else None
    else:
        rec_x = np.zeros((P, R, d))
        rec_a = np.zeros((P, R))
        xc = np.ascontiguousarray(x)
        if clock_target > 0.0:
            rate = clock_rate_hint if clock_rate_hint else float(np.mean(gclock))
            cap = int(max(4.0 * clock_target / (max(rate, 1e-12) * cfg.dt), 1000.0))
        else:
            cap = n_steps
        done = np.zeros(P, dtype=np.int64)
        _kernels.emnd_scalar(
            xc, a_sc, gprev, supsq, done, k0, k1, np.uint64(0), 0, cap, cfg.dt, n, d,
            drift, gclock, fsup, a_target_sc, stride, rec_x, rec_a, nearest,
        )
        steps_done = done
        if clock_target > 0.0 and int((a_sc < a_target_sc).sum()):
            raise ConfigurationError("some paths did not reach the clock target within the cap")
        x = xc
        rec_pos = rec_x if stride else None

    record_times = (np.arange(1, R + 1) * (stride * cfg.dt)) if stride else None
    return PathEnsemble(
        grid=grid,
        config=cfg,
        final_positions=x,
        final_clock=a_sc * cfg.dt,
        steps_done=steps_done,
        guard=guard,
        guard_ok=cfg.dt <= guard,
        sup_stat=np.sqrt(supsq) if sup_fields else None,
        record_times=record_times,
        record_positions=rec_pos,
        record_clock=(rec_a * cfg.dt) if stride else None,
        start_positions=start_x,
    )


def _interp_many(flat_grid: np.ndarray, grid: TorusGrid, points: np.ndarray, nearest: bool = False) -> np.ndarray:
    """Vectorized periodic multilinear interpolation at (m, d) points.

    Mirrors the kernel lookup exactly (same ``left + frac * (right - left)``
    form), so constant grids interpolate to the constant bit-for-bit.
    """
    n, d = grid.cells_per_side, grid.dim
    nd = flat_grid.reshape(grid.shape)
    pts = np.atleast_2d(points)
    xm = pts - np.floor(pts)
    if nearest:
        idx = np.minimum((xm * n).astype(np.int64), n - 1)
        return nd[tuple(idx[:, a] for a in range(d))]
    u = xm * n - 0.5
    i0 = np.floor(u).astype(np.int64)
    frac = u - i0
    i0 %= n
    out = np.zeros(pts.shape[0])
    for corner in range(1 << d):
        widx = []
        wgt = np.ones(pts.shape[0])
        for a in range(d):
            if (corner >> a) & 1:
                widx.append((i0[:, a] + 1) % n)
                wgt = wgt * frac[:, a]
            else:
                widx.append(i0[:, a])
                wgt = wgt * (1.0 - frac[:, a])
        out += wgt * nd[tuple(widx)]
    return out


def _interp_delta(flat_grid: np.ndarray, grid: TorusGrid, points: np.ndarray) -> np.ndarray:
    """Interpolation in the ``left + frac*(right-left)`` form, d=1 fast path."""
    return _interp_many(flat_grid, grid, points)


def time_change(paths: PathEnsemble, w: ScalarField, V: ScalarField, clock_step: float | None = None) -> PathEnsemble:
    """Resample recorded trajectories on a uniform grid of the new clock.

    The clock comes from the full-resolution accumulator when the ensemble
    was simulated with the weight; otherwise it is rebuilt by the trapezoid
    rule on the recorded states (coarser, flagged by the caller's stride).
    The inverse clock is the monotone inversion of the per-path record
    clock, and positions are interpolated linearly between records.
    """
    if paths.record_positions is None:
        raise ConfigurationError("time_change needs recorded trajectories (record_stride > 0)")
    grid = paths.grid
    P, R, d = paths.record_positions.shape
    dt_rec = paths.record_times[0]
    if paths.record_clock is not None:
        A = paths.record_clock
    else:
        g = (w.values * np.exp(V.values)).copy()
        vals = np.empty((P, R))
        for r in range(R):
            vals[:, r] = _interp_many(g, grid, paths.record_positions[:, r, :] % 1.0)
        g0 = _interp_many(g, grid, (paths.start_positions % 1.0))
        steps = np.concatenate([g0[:, None], vals], axis=1)
        A = np.cumsum(0.5 * (steps[:, :-1] + steps[:, 1:]), axis=1) * dt_rec
    # prepend the start state so the inversion covers clock 0
    A_full = np.concatenate([np.zeros((P, 1)), A], axis=1)
    X_full = np.concatenate([paths.start_positions[:, None, :], paths.record_positions], axis=1)
    dtau = clock_step if clock_step is not None else float(dt_rec)
    tau_max = float(A_full[:, -1].min())
    Q = int(math.floor(tau_max / dtau)) + 1
    tau = np.arange(Q) * dtau
    Xt = np.empty((P, Q, d))
    for p in range(P):
        idx = np.searchsorted(A_full[p], tau, side="right")
        idx = np.clip(idx, 1, R)
        lo = idx - 1
        denom = A_full[p, idx] - A_full[p, lo]
        theta = np.where(denom > 0.0, (tau - A_full[p, lo]) / np.where(denom > 0, denom, 1.0), 0.0)
        Xt[p] = X_full[p, lo, :] + theta[:, None] * (X_full[p, idx, :] - X_full[p, lo, :])
    out = replace(paths)
    out.clock_grid = tau
    out.timechanged_positions = Xt
    return out


def corrector_martingale(
    paths: PathEnsemble, sol: CorrectorSolution, w: ScalarField, V: ScalarField
) -> PathEnsemble:
    """Attach the corrector martingale and its predicted bracket.

    On the uniform clock grid: ``M(tau) = X_tc(tau) + v(X_tc(tau))`` and the
    bracket prediction integrates ``(exp(-V)/w)(e + grad v)(e + grad v)``
    along the time-changed path by the trapezoid rule in the new clock.
    The same martingale and the bracket total are also evaluated on the raw
    record partition (positions known exactly there, no resampling error),
    which is what the realized-variance identity check consumes.
    """
    if paths.timechanged_positions is None:
        raise ConfigurationError("corrector_martingale needs time-changed paths; run time_change first")
    grid = paths.grid
    d = grid.dim
    if len(sol.components) != d:
        raise ConfigurationError("corrector solution is missing components for this grid")
    h = grid.spacing
    vflat = [c.values for c in sol.components]
    # cell-centered gradient reconstruction (average of adjacent face differences)
    grads = []
    for i in range(d):
        vn = sol.components[i].as_nd()
        grads.append(
            [((np.roll(vn, -1, axis=ax) - np.roll(vn, 1, axis=ax)) / (2.0 * h)).ravel() for ax in range(d)]
        )
    ratio = np.exp(-V.values) / w.values
    Gflat = np.empty((d, d, grid.total_cells))
    for i in range(d):
        for j in range(d):
            acc = np.zeros(grid.total_cells)
            for ax in range(d):
                gi = grads[i][ax] + (1.0 if ax == i else 0.0)
                gj = grads[j][ax] + (1.0 if ax == j else 0.0)
                acc += gi * gj
            Gflat[i, j] = ratio * acc

    P, Q, _ = paths.timechanged_positions.shape
    Xt = paths.timechanged_positions
    flatpts = (Xt % 1.0).reshape(P * Q, d)
    M = Xt.copy()
    for i in range(d):
        M[:, :, i] += _interp_many(vflat[i], grid, flatpts).reshape(P, Q)
    dtau = float(paths.clock_grid[1] - paths.clock_grid[0]) if Q > 1 else 0.0
    bracket = np.zeros((P, Q, d, d))
    Gvals = np.empty((P, Q, d, d))
    for i in range(d):
        for j in range(d):
            Gvals[:, :, i, j] = _interp_many(Gflat[i, j], grid, flatpts).reshape(P, Q)
    if Q > 1:
        increments = 0.5 * (Gvals[:, :-1] + Gvals[:, 1:])
        bracket[:, 1:] = np.cumsum(increments, axis=1) * dtau

    out = replace(paths)
    out.clock_grid = paths.clock_grid
    out.timechanged_positions = Xt
    out.martingale = M
    out.bracket_pred = bracket

    # record-partition variant for the realized-variance identity
    if paths.record_positions is not None and paths.record_clock is not None:
        Xr = np.concatenate([paths.start_positions[:, None, :], paths.record_positions], axis=1)
        Ar = np.concatenate([np.zeros((P, 1)), paths.record_clock], axis=1)
        Rp = Xr.shape[1]
        fl = (Xr % 1.0).reshape(P * Rp, d)
        Mr = Xr.copy()
        for i in range(d):
            Mr[:, :, i] += _interp_many(vflat[i], grid, fl).reshape(P, Rp)
        out.martingale_records = Mr
        Gtot = np.zeros((P, d, d))
        for i in range(d):
            for j in range(d):
                gv = _interp_many(Gflat[i, j], grid, fl).reshape(P, Rp)
                Gtot[:, i, j] = (0.5 * (gv[:, :-1] + gv[:, 1:]) * np.diff(Ar, axis=1)).sum(axis=1)
        out.bracket_records_total = Gtot
    return out


@dataclass(frozen=True)
class ExcursionCheck:
    """One threshold of the sup-excursion probability bound."""

    eta: float
    epsilon: float
    empirical: float
    standard_error: float
    bound: float
    violated: bool

    def to_json_dict(self) -> dict:
        return {
            "eta": self.eta,
            "epsilon": self.epsilon,
            "empirical": self.empirical,
            "se": self.standard_error,
            "bound": self.bound,
            "violated": self.violated,
        }


def excursion_bound_check(
    f: ScalarField,
    w: ScalarField,
    V: ScalarField,
    epsilon: float,
    eta: float,
    cfg: SimConfig,
    spec: PotentialSpec | None = None,
) -> ExcursionCheck:
    """Empirical sup-excursion probability against e * sqrt(energy) / eta.

    Simulates from the weight law, runs each path until its clock reaches
    ``epsilon**-2``, and compares ``P(sup |epsilon * f| > eta)`` with the
    energy bound; a violation beyond three binomial standard errors is
    flagged.
    """
    if eta <= 0.0:
        raise ConfigurationError(f"eta must be positive, got {eta}")
    fc = f.values - f.values.mean()
    energy = dirichlet_energy(V, fc)
    bound = math.e * math.sqrt(energy) / eta
    run_cfg = replace(cfg, start="weight_law", horizon=0.0, record_stride=0)
    ens = simulate_paths(
        V,
        run_cfg,
        spec=spec,
        weight=w,
        sup_fields=(ScalarField(f.grid, fc, "generic"),),
        clock_target=epsilon**-2,
    )
    sup = ens.sup_stat
    hits = float(np.mean(epsilon * sup > eta))
    se = math.sqrt(max(hits * (1.0 - hits), 1.0 / ens.config.num_paths) / ens.config.num_paths)
    return ExcursionCheck(
        eta=eta,
        epsilon=epsilon,
        empirical=hits,
        standard_error=se,
        bound=bound,
        violated=hits > bound + 3.0 * se,
    )


@dataclass(frozen=True)
class DensityCheck:
    """Histogram bound of the time-changed law relative to the weight measure."""

    t: float
    sup_density: float
    sup_density_coarse: float
    bin_cells: int
    num_paths: int
    standard_error: float

    def stable(self, rtol: float = 0.1) -> bool:
        return abs(self.sup_density - self.sup_density_coarse) <= rtol * self.sup_density

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "sup_density": self.sup_density,
            "sup_density_coarse": self.sup_density_coarse,
            "bin_cells": self.bin_cells,
            "num_paths": self.num_paths,
            "se": self.standard_error,
        }


def density_bound_check(
    V: ScalarField,
    w: ScalarField,
    t: float,
    cfg: SimConfig,
    bin_cells: int | None = None,
    spec: PotentialSpec | None = None,
) -> DensityCheck:
    """Sup over bins of the density of the time-changed state against w.

    Paths start from the reversible law of the driving process and are run
    until the clock reaches ``t``.  Bins are blocks of grid cells sized so
    every bin expects at least 100 samples; fewer is rejected.  The sup is
    recomputed at twice the bin width as a stability probe.
    """
    grid = V.grid
    n, d = grid.cells_per_side, grid.dim
    run_cfg = replace(cfg, start="reversible", horizon=0.0, record_stride=0)
    ens = simulate_paths(V, run_cfg, spec=spec, weight=w, clock_target=t)
    pts = ens.projected

    def sup_for(bin_cells: int) -> tuple[float, float]:
        nbins = n // bin_cells
        if nbins < 1:
            raise ConfigurationError("bin width exceeds the torus")
        expected = cfg.num_paths / nbins**d
        if expected < 100.0:
            raise ConfigurationError(
                f"fewer than 100 samples expected per bin ({expected:.1f}); "
                "increase num_paths or bin width"
            )
        edges_idx = (pts * nbins).astype(np.int64) % nbins
        flat = np.ravel_multi_index(tuple(edges_idx[:, a] for a in range(d)), (nbins,) * d)
        counts = np.bincount(flat, minlength=nbins**d).astype(np.float64)
        wmass = w.values.reshape(grid.shape)
        for ax in range(d):
            sh = wmass.shape
            wmass = wmass.reshape(sh[:ax] + (nbins, bin_cells) + sh[ax + 1 :]).sum(axis=ax + 1)
        wmass = wmass.ravel() * grid.spacing**d
        dens = counts / cfg.num_paths / wmass
        worst = int(np.argmax(dens))
        se = math.sqrt(counts[worst]) / cfg.num_paths / wmass[worst]
        return float(dens[worst]), se

    if bin_cells is None:
        bin_cells = 1
        while cfg.num_paths / (n // bin_cells) ** d < 100.0:
            bin_cells *= 2
    sup_fine, se = sup_for(bin_cells)
    sup_coarse, _ = sup_for(min(2 * bin_cells, n))
    return DensityCheck(
        t=t,
        sup_density=sup_fine,
        sup_density_coarse=sup_coarse,
        bin_cells=bin_cells,
        num_paths=cfg.num_paths,
        standard_error=se,
    )


@dataclass(frozen=True)
class InvarianceConfig:
    """Sizes and tolerances of the diffusive-limit Monte Carlo check."""

    dt: float = 1e-4
    macro_horizon: float = 1.0
    paths_variance: int = 10_000
    paths_variance_other: int = 2_000
    paths_sup: int = 512
    seed: int = 0
    interpolation: str = "multilinear"
    start: tuple[float, ...] = ()
    variance_rtol: float = 0.05
    gauss_alpha: float = 0.01
    sup_quantiles: tuple[float, ...] = (0.25, 0.5, 0.75, 0.9)


@dataclass
class McReport:
    """Aggregated Monte Carlo verdicts with their standard errors."""

    sigma_bar_reference: np.ndarray
    epsilons: tuple[float, ...]
    num_paths: dict[float, int]
    covariance: dict[float, np.ndarray]
    covariance_se: dict[float, np.ndarray]
    gaussianity: dict[float, list[tuple[float, float]]]  # per coordinate (stat, p)
    corrector_sup_quantiles: dict[float, dict[float, float]]
    k_estimate: tuple[float, float] | None = None
    bracket_relerr: float | None = None
    excursion_checks: list[ExcursionCheck] = dc_field(default_factory=list)
    density_sup: DensityCheck | None = None
    verdicts: dict[str, bool] = dc_field(default_factory=dict)
    notes: list[str] = dc_field(default_factory=list)

    def to_json_dict(self) -> dict:
        def mat(m):
            return [list(map(float, row)) for row in np.atleast_2d(m)]

        return {
            "sigma_bar_reference": mat(self.sigma_bar_reference),
            "epsilons": list(self.epsilons),
            "num_paths": {str(e): p for e, p in sorted(self.num_paths.items())},
            "covariance": {str(e): mat(c) for e, c in sorted(self.covariance.items())},
            "covariance_se": {str(e): mat(c) for e, c in sorted(self.covariance_se.items())},
            "gaussianity": {
                str(e): [{"statistic": s, "p_value": p} for s, p in v]
                for e, v in sorted(self.gaussianity.items())
            },
            "corrector_sup_quantiles": {
                str(e): {str(q): v for q, v in sorted(qs.items())}
                for e, qs in sorted(self.corrector_sup_quantiles.items())
            },
            "k_estimate": None
            if self.k_estimate is None
            else {"value": self.k_estimate[0], "se": self.k_estimate[1]},
            "bracket_relerr": self.bracket_relerr,
            "excursion_checks": [c.to_json_dict() for c in self.excursion_checks],
            "density_sup": None if self.density_sup is None else self.density_sup.to_json_dict(),
            "verdicts": dict(sorted(self.verdicts.items())),
            "notes": list(self.notes),
        }


def invariance_check(
    V: ScalarField,
    w: ScalarField,
    sol: CorrectorSolution,
    sigma: DiffusivityMatrix,
    epsilons: tuple[float, ...],
    icfg: InvarianceConfig = InvarianceConfig(),
    spec: PotentialSpec | None = None,
) -> McReport:
    """Monte Carlo check of the diffusive limit across a ladder of scales.

    For each scale the endpoint covariance of the rescaled process is
    compared against the solver diffusivity, each coordinate is tested for
    Gaussianity (Kolmogorov-Smirnov against the predicted normal law), and
    the sup of the rescaled corrector along time-changed paths is summarized
    by quantiles.  The full path budget goes to the smallest scale; larger
    scales reuse a reduced ensemble.
    """
    grid = V.grid
    d = grid.dim
    k_grid = float(w.values.mean()) / float(np.exp(-V.values).mean())
    eps_sorted = tuple(sorted(epsilons, reverse=True))
    covariance: dict[float, np.ndarray] = {}
    covariance_se: dict[float, np.ndarray] = {}
    gauss: dict[float, list[tuple[float, float]]] = {}
    supq: dict[float, dict[float, float]] = {}
    npaths: dict[float, int] = {}
    notes: list[str] = []
    k_est = None
    eps_min = min(eps_sorted)
    for eps in eps_sorted:
        P = icfg.paths_variance if eps == eps_min else icfg.paths_variance_other
        cfg = SimConfig(
            dt=icfg.dt,
            horizon=icfg.macro_horizon / eps**2,
            epsilon=eps,
            num_paths=P,
            seed=icfg.seed,
            interpolation=icfg.interpolation,
            start="point",
            x0=icfg.start,
        )
        ens = simulate_paths(V, cfg, spec=spec)
        end = eps * ens.final_positions
        mean = end.mean(axis=0)
        centered = end - mean
        cov = centered.T @ centered / (P - 1)
        se = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov**2) / (P - 1))
        covariance[eps] = cov
        covariance_se[eps] = se
        if P < 100:
            notes.append(f"ensemble at epsilon={eps} too small for the requested confidence")
        pergauss = []
        for a in range(d):
            sd = math.sqrt(icfg.macro_horizon * sigma.sigma_bar[a, a])
            stat, pval = sps.kstest(end[:, a] / sd, "norm")
            pergauss.append((float(stat), float(pval)))
        gauss[eps] = pergauss
        npaths[eps] = P

        sup_cfg = SimConfig(
            dt=icfg.dt,
            horizon=0.0,
            epsilon=eps,
            num_paths=icfg.paths_sup,
            seed=icfg.seed + 1,
            interpolation=icfg.interpolation,
            start="point",
            x0=icfg.start,
        )
        sup_ens = simulate_paths(
            V,
            sup_cfg,
            spec=spec,
            weight=w,
            sup_fields=sol.components,
            clock_target=icfg.macro_horizon / eps**2,
            clock_rate_hint=k_grid,
        )
        scaled = eps * sup_ens.sup_stat
        supq[eps] = {float(q): float(np.quantile(scaled, q)) for q in icfg.sup_quantiles}
        if eps == eps_min:
            ratios = sup_ens.final_clock / sup_ens.final_times
            k_est = (float(ratios.mean()), float(ratios.std(ddof=1) / math.sqrt(len(ratios))))

    verdicts: dict[str, bool] = {}
    for eps in eps_sorted:
        dev = np.abs(np.diag(covariance[eps]) - icfg.macro_horizon * np.diag(sigma.sigma_bar))
        verdicts[f"covariance_within_tolerance_eps_{eps}"] = bool(
            np.all(dev <= icfg.variance_rtol * icfg.macro_horizon * np.diag(sigma.sigma_bar))
        )
        verdicts[f"gaussianity_eps_{eps}"] = bool(
            all(p > icfg.gauss_alpha for _, p in gauss[eps])
        )
    medians = [supq[eps][0.5] for eps in eps_sorted]
    verdicts["corrector_sup_median_decreasing"] = bool(
        all(a > b for a, b in zip(medians, medians[1:]))
    )
    return McReport(
        sigma_bar_reference=sigma.sigma_bar,
        epsilons=eps_sorted,
        num_paths=npaths,
        covariance=covariance,
        covariance_se=covariance_se,
        gaussianity=gauss,
        corrector_sup_quantiles=supq,
        k_estimate=k_est,
        verdicts=verdicts,
        notes=notes,
    )
