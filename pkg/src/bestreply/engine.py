"""Particle best-reply solver with absorbing boundaries.

The engine simulates a weighted particle ensemble forward in time and runs
randomized sequential best-reply sweeps until no particle wants to change any
of its per-step controls. One sweep re-simulates the horizon; at every time
step the active particles are visited in a fresh random order, each visited
particle scans the control grid for the cheapest one-step cost against the
current mixed population (already-visited particles contribute their updated
state/control atoms, unvisited ones their previous-sweep atoms), adopts the
argmin, and advances through the noisy dynamics. Particles crossing the
domain boundary are absorbed: frozen in place, excluded from every later
empirical measure, and free of further cost.

Determinism contract: all randomness flows from counter-based streams keyed
by (seed, purpose, phase, index), so reruns and different worker counts
produce bit-identical trajectories.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .controls import ControlGrid
from .kernels import WeakStarMetricConfig, weak_star_distance_from_moments
from .models import ModelSpec

__all__ = [
    "Ensemble",
    "TrajectorySet",
    "IterationReport",
    "SweepOptions",
    "EquilibriumResult",
    "TwoPhaseResult",
    "make_noise",
    "initial_controls",
    "init_ensemble",
    "step_sde",
    "simulate_initial",
    "sweep_best_reply",
    "run_to_equilibrium",
    "verify_equilibrium",
    "prune_control_set",
    "value_function_trace",
    "max_greedy_gap",
    "graded_joint_moments",
    "time_averaged_moments",
    "mass_series",
    "population_series",
    "run_two_phase",
]

_PURPOSE_NOISE = 0
_PURPOSE_PERMUTATION = 1
_CDF_POINTS = 4097


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Ensemble:
    """Initial particle states: positions, controls, and the common weight."""

    x0: np.ndarray
    alpha0: np.ndarray
    weight: float


@dataclass
class TrajectorySet:
    """Complete simulated horizon for every particle.

    ``x`` has one more column than ``alpha`` (positions at step edges,
    controls on step intervals). ``exit_step[k] = m`` means particle k was
    absorbed at time index m: it is active (in measures, paying cost,
    advancing) for steps n < m and frozen at its boundary value afterwards;
    ``m = n_steps + 1`` marks a particle that never exits. ``alpha`` entries
    at and after the exit step are zero-filled.
    """

    x: np.ndarray
    alpha: np.ndarray
    exit_step: np.ndarray
    weight: float
    dt: float
    cached_moments: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=float)
        self.alpha = np.asarray(self.alpha, dtype=float)
        self.exit_step = np.asarray(self.exit_step, dtype=np.int64)
        if self.x.shape[1] != self.alpha.shape[1] + 1:
            raise ValueError("positions need exactly one more column than controls")
        if self.exit_step.shape != (self.x.shape[0],):
            raise ValueError("exit_step must have one entry per particle")

    @property
    def n_particles(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.alpha.shape[1]

    def active_mask(self, n: int) -> np.ndarray:
        return self.exit_step > n


@dataclass(frozen=True)
class IterationReport:
    """Outcome of one best-reply sweep."""

    sweep: int
    modifications: int
    distribution_change: float
    converged: bool


@dataclass(frozen=True)
class SweepOptions:
    """Knobs of the sweep algorithm (all deterministic given the seed).

    ``cost_eval`` places the one-step cost at the pre-step position
    ("pre_step", the default) or at the deterministic lookahead position
    x + drift*dt ("post_step"); the lookahead requires a drift without
    mean-control terms. ``sweep_mode`` visits every active particle at every
    step ("all_particles_per_step") or exactly one particle per step
    ("one_particle_per_step"). ``theta_self`` controls whether a deciding
    particle's own atom is included in the mean control it reacts to.
    """

    cost_eval: str = "pre_step"
    sweep_mode: str = "all_particles_per_step"
    theta_self: str = "exclude"
    workers: int = 1
    worker_chunk_min: int = 64
    convergence_threshold: float = 0.0
    metric: WeakStarMetricConfig = field(default_factory=WeakStarMetricConfig)

    def __post_init__(self) -> None:
        if self.cost_eval not in ("pre_step", "post_step"):
            raise ValueError("cost_eval must be 'pre_step' or 'post_step'")
        if self.sweep_mode not in ("all_particles_per_step", "one_particle_per_step"):
            raise ValueError(
                "sweep_mode must be 'all_particles_per_step' or 'one_particle_per_step'"
            )
        if self.theta_self not in ("exclude", "include"):
            raise ValueError("theta_self must be 'exclude' or 'include'")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.worker_chunk_min < 2:
            raise ValueError("worker_chunk_min must be at least 2")
        if self.convergence_threshold < 0.0:
            raise ValueError("convergence_threshold must be non-negative")


@dataclass(frozen=True)
class EquilibriumResult:
    trajectories: TrajectorySet
    reports: list[IterationReport]
    converged: bool


@dataclass(frozen=True)
class TwoPhaseResult:
    phase1: Optional[EquilibriumResult]
    phase2: EquilibriumResult
    grid_full: ControlGrid
    grid_pruned: ControlGrid

    @property
    def converged(self) -> bool:
        phase1_ok = self.phase1 is None or self.phase1.converged
        return phase1_ok and self.phase2.converged


class _LiveStats:
    """Mutable view of per-step measure summaries handed to model hooks."""

    __slots__ = ("mass", "first_moment", "x", "w")

    def __init__(self, mass: float, first_moment: float, x: np.ndarray, w: np.ndarray):
        self.mass = mass
        self.first_moment = first_moment
        self.x = x
        self.w = w


_EMPTY = np.empty(0)


# --------------------------------------------------------------------------
# randomness
# --------------------------------------------------------------------------


def _philox_key(seed: int, purpose: int, phase: int, index: int) -> np.ndarray:
    tag = (purpose << 48) | (phase << 32) | index
    return np.array([seed, tag], dtype=np.uint64)


def make_noise(seed: int, phase: int, n_particles: int, n_steps: int) -> np.ndarray:
    """Standard-normal increments, one independent stream per particle.

    Row k is the full horizon of particle k's driving noise, identical across
    sweeps (common random numbers), so a sweep that changes no control
    reproduces the previous trajectories exactly.
    """
    out = np.empty((n_particles, n_steps))
    for k in range(n_particles):
        gen = np.random.Generator(
            np.random.Philox(key=_philox_key(seed, _PURPOSE_NOISE, phase, k))
        )
        out[k] = gen.standard_normal(n_steps)
    return out


def _permutation_stream(seed: int, phase: int, sweep_index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.Philox(key=_philox_key(seed, _PURPOSE_PERMUTATION, phase, sweep_index))
    )


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------


def initial_controls(
    positions: np.ndarray, domain: tuple[float, float], grid: ControlGrid
) -> np.ndarray:
    """Largest-magnitude grid control pointing at the nearest boundary.

    Equidistant positions break the tie toward the lower boundary.
    """
    positions = np.asarray(positions, dtype=float)
    lo, hi = domain
    toward_lower = (positions - lo) <= (hi - positions)
    return np.where(toward_lower, grid.points[0], grid.points[-1])


def init_ensemble(
    n_particles: int,
    initial_density: Callable[[np.ndarray], np.ndarray],
    domain: tuple[float, float],
    grid: ControlGrid,
) -> Ensemble:
    """Equal-weight particles placed by stratified inverse-CDF sampling.

    The density is integrated on a fine fixed grid; particle k sits at the
    quantile (k + 1/2) / N, which is deterministic, spreads particles evenly
    through the mass, and keeps the empirical mean within O(1/N) of the true
    one. Initial controls follow the nearest-boundary rule.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    lo, hi = domain
    xs = np.linspace(lo, hi, _CDF_POINTS)
    f = np.asarray(initial_density(xs), dtype=float)
    if f.shape != xs.shape or not np.all(np.isfinite(f)):
        raise ValueError("initial density must be finite on the domain")
    if np.any(f < 0.0):
        raise ValueError("initial density must be non-negative")
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(xs))])
    total = cdf[-1]
    if not total > 0.0:
        raise ValueError("initial density must have positive total mass")
    cdf /= total
    quantiles = (np.arange(n_particles) + 0.5) / n_particles
    x0 = np.interp(quantiles, cdf, xs)
    alpha0 = initial_controls(x0, domain, grid)
    return Ensemble(x0=x0, alpha0=alpha0, weight=1.0 / n_particles)


# --------------------------------------------------------------------------
# dynamics
# --------------------------------------------------------------------------


def step_sde(
    x: float,
    drift_value: float,
    sigma: float,
    dt: float,
    noise: float,
    domain: tuple[float, float],
) -> tuple[float, bool]:
    """One Euler step x' = x + drift*dt + 2*sqrt(sigma)*sqrt(dt)*noise.

    Crossing (or landing on) a boundary absorbs the particle: the position is
    clamped to the crossed boundary point and the exited flag is returned.
    """
    lo, hi = domain
    x_new = x + drift_value * dt + 2.0 * math.sqrt(sigma) * math.sqrt(dt) * noise
    if x_new <= lo:
        return lo, True
    if x_new >= hi:
        return hi, True
    return x_new, False


def simulate_controls(
    x0: np.ndarray,
    weight: float,
    controls: np.ndarray,
    model: ModelSpec,
    xi: np.ndarray,
    dt: float,
) -> TrajectorySet:
    """Forward simulation with a frozen per-particle, per-step control matrix.

    Drifts that depend on the mean control use the step-start value over the
    currently active particles. Stored controls are zero from a particle's
    exit step onward, matching what the sweeps maintain.
    """
    n, n_steps = controls.shape
    w = weight
    lo, hi = model.domain
    noise_scale = 2.0 * math.sqrt(model.diffusion) * math.sqrt(dt)
    x_hist = np.empty((n, n_steps + 1))
    a_hist = np.zeros((n, n_steps))
    exit_step = np.full(n, n_steps + 1, dtype=np.int64)
    cur = np.asarray(x0, dtype=float).copy()
    active = np.ones(n, dtype=bool)
    x_hist[:, 0] = cur
    for step in range(n_steps):
        t_n = step * dt
        idx = np.nonzero(active)[0]
        if idx.size:
            a_act = controls[idx, step]
            a_hist[idx, step] = a_act
            if model.drift_base_is_zero:
                base = 0.0
            else:
                stats = _LiveStats(w * idx.size, w * float(cur[idx].sum()),
                                   cur[idx], np.full(idx.size, w))
                base = model.drift_base(t_n, cur[idx], stats)
            if model.state_gain_is_zero:
                gain = 0.0
            else:
                gain = model.state_gain(w * float(a_act.sum()))
            drift = base + gain * cur[idx] + a_act
            x_new = cur[idx] + drift * dt + noise_scale * xi[idx, step]
            out_lo = x_new <= lo
            out_hi = x_new >= hi
            x_new = np.where(out_lo, lo, np.where(out_hi, hi, x_new))
            exited = out_lo | out_hi
            exit_step[idx[exited]] = step + 1
            active[idx[exited]] = False
            cur[idx] = x_new
        x_hist[:, step + 1] = cur
    return TrajectorySet(x=x_hist, alpha=a_hist, exit_step=exit_step, weight=w, dt=dt)


def simulate_initial(
    ensemble: Ensemble,
    model: ModelSpec,
    xi: np.ndarray,
    dt: float,
    n_steps: int,
) -> TrajectorySet:
    """Forward simulation with the initial controls frozen (sweep zero)."""
    controls = np.broadcast_to(
        ensemble.alpha0[:, None], (ensemble.x0.size, n_steps)
    )
    return simulate_controls(ensemble.x0, ensemble.weight, controls, model, xi, dt)


# --------------------------------------------------------------------------
# moment bookkeeping for the convergence metric
# --------------------------------------------------------------------------


def graded_joint_moments(
    x: np.ndarray, alpha: np.ndarray, weights: np.ndarray, n_terms: int
) -> np.ndarray:
    """First ``n_terms`` graded monomial moments of an atomic (x, alpha) measure.

    Matches the basis ordering of kernels.monomial_exponents for two
    variables: degree blocks, x-exponent descending within each block.
    """
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    weights = np.asarray(weights, dtype=float)
    moments = np.zeros(n_terms)
    if x.size == 0:
        return moments
    max_deg = 0
    count = 1
    while count < n_terms:
        max_deg += 1
        count += max_deg + 1
    xp = np.empty((max_deg + 1, x.size))
    ap = np.empty((max_deg + 1, x.size))
    xp[0] = 1.0
    ap[0] = 1.0
    for e in range(1, max_deg + 1):
        xp[e] = xp[e - 1] * x
        ap[e] = ap[e - 1] * alpha
    k = 0
    for degree in range(max_deg + 1):
        for j in range(degree + 1):
            if k == n_terms:
                return moments
            moments[k] = float(np.dot(weights, xp[degree - j] * ap[j]))
            k += 1
    return moments


def time_averaged_moments(traj: TrajectorySet, n_terms: int) -> np.ndarray:
    """Moments of the trajectory's time-averaged joint measure.

    Averages the per-step empirical measures over the decision steps
    0..n_steps-1; absorbed particles drop out of every step at and after
    their exit.
    """
    n_steps = traj.n_steps
    if n_steps == 0:
        return np.zeros(n_terms)
    active = traj.exit_step[:, None] > np.arange(n_steps)[None, :]
    xs = traj.x[:, :n_steps][active]
    alphas = traj.alpha[active]
    weights = np.full(xs.size, traj.weight / n_steps)
    return graded_joint_moments(xs, alphas, weights, n_terms)


def mass_series(traj: TrajectorySet) -> np.ndarray:
    """Active mass at each time index; exact count / N arithmetic."""
    counts = (traj.exit_step[:, None] > np.arange(traj.n_steps + 1)[None, :]).sum(axis=0)
    return counts / traj.n_particles


def population_series(traj: TrajectorySet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mass, first moment, center of mass) at each time index.

    The center of mass is NaN wherever the remaining mass is zero.
    """
    active = traj.exit_step[:, None] > np.arange(traj.n_steps + 1)[None, :]
    mass = active.sum(axis=0) / traj.n_particles
    first_moment = traj.weight * (traj.x * active).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        com = np.where(mass > 0.0, first_moment / mass, np.nan)
    return mass, first_moment, com


# --------------------------------------------------------------------------
# best-reply sweeps
# --------------------------------------------------------------------------


def sweep_best_reply(
    prev: TrajectorySet,
    model: ModelSpec,
    grid: ControlGrid,
    *,
    seed: int,
    phase: int,
    sweep_index: int,
    xi: np.ndarray,
    options: SweepOptions,
    prev_moments: Optional[np.ndarray] = None,
) -> tuple[TrajectorySet, IterationReport]:
    """One randomized sequential best-reply pass over the whole horizon.

    Re-simulates forward in time. At each step the visited particle sees the
    population as: already-visited particles at their current re-simulated
    state and freshly adopted control, everyone else at their previous-sweep
    atom (particles absorbed in the current re-simulation are excluded
    outright). The adopted control is the grid argmin of the one-step cost,
    ties resolving to the smallest grid index; the particle then advances
    immediately through the dynamics.
    """
    n, n_steps = prev.n_particles, prev.n_steps
    w, dt = prev.weight, prev.dt
    g = grid.points
    n_grid = g.size
    lo, hi = model.domain
    post = options.cost_eval == "post_step"
    include_self = options.theta_self == "include"
    one_per_step = options.sweep_mode == "one_particle_per_step"
    if post and not (model.state_gain_is_zero and model.drift_base_is_zero):
        raise ValueError(
            "post_step cost evaluation needs a drift free of population terms; "
            "this model's drift depends on the mean control or a kernel"
        )
    quad = dt * model.quad_weight * g * g
    coef_dt = dt * model.coupling_coef
    noise_scale = 2.0 * math.sqrt(model.diffusion) * math.sqrt(dt)
    g_dt = g * dt
    gain_zero = model.state_gain_is_zero
    base_zero = model.drift_base_is_zero
    state_cost = model.state_cost
    state_gain = model.state_gain

    use_pool = post and options.workers > 1 and n_grid >= options.worker_chunk_min
    pool = ThreadPoolExecutor(max_workers=options.workers) if use_pool else None
    if use_pool:
        bounds = np.linspace(0, n_grid, options.workers + 1).astype(int)
        chunks = [slice(bounds[i], bounds[i + 1]) for i in range(options.workers)
                  if bounds[i] < bounds[i + 1]]

    new_x = np.empty((n, n_steps + 1))
    new_x[:, 0] = prev.x[:, 0]
    new_alpha = np.zeros((n, n_steps))
    new_exit = np.full(n, n_steps + 1, dtype=np.int64)
    cur_x = prev.x[:, 0].copy()
    cur_active = np.ones(n, dtype=bool)
    perm_rng = _permutation_stream(seed, phase, sweep_index)
    stats = _LiveStats(0.0, 0.0, _EMPTY, _EMPTY)
    modifications = 0

    try:
        for step in range(n_steps):
            t_n = step * dt
            prev_alpha_n = prev.alpha[:, step]
            prev_x_n = prev.x[:, step]
            prev_act = prev.exit_step > step
            present = prev_act & cur_active
            atom_x = np.where(prev_act, prev_x_n, 0.0)
            own_alpha = np.where(prev_act, prev_alpha_n, 0.0)
            s_mass = w * np.count_nonzero(present)
            s_x = w * float(atom_x[present].sum())
            s_alpha = w * float(own_alpha[present].sum())

            order = perm_rng.permutation(n)
            if one_per_step:
                candidate = order[step % n]
                visits = np.array([candidate]) if cur_active[candidate] else np.empty(0, dtype=int)
            else:
                visits = order[cur_active[order]]
            if post:
                lookahead = cur_x[:, None] + g_dt[None, :]
            visited = np.zeros(n, dtype=bool) if one_per_step else None

            for k in visits:
                xk = cur_x[k]
                if present[k]:
                    s_x += w * (xk - atom_x[k])
                else:
                    present[k] = True
                    s_mass += w
                    s_x += w * xk
                    s_alpha += w * own_alpha[k]
                atom_x[k] = xk
                fresh = not prev_act[k]
                theta = s_alpha if include_self else s_alpha - w * own_alpha[k]
                s_lin = coef_dt * theta
                if post:
                    stats.mass = s_mass
                    stats.first_moment = s_x
                    row = lookahead[k]
                    if use_pool:
                        parts = pool.map(
                            lambda sl: dt * state_cost(t_n, row[sl], stats)
                            + quad[sl] + s_lin * g[sl],
                            chunks,
                        )
                        cost = np.concatenate(list(parts))
                    else:
                        cost = dt * state_cost(t_n, row, stats) + quad + s_lin * g
                else:
                    cost = quad + s_lin * g
                j = int(np.argmin(cost))
                a_new = g[j]
                # a decision at a step the particle previously did not reach
                # counts as a strategy change even if the value matches the
                # zero fill of the stored array
                if fresh or a_new != prev_alpha_n[k]:
                    modifications += 1
                new_alpha[k, step] = a_new
                s_alpha += w * (a_new - own_alpha[k])
                own_alpha[k] = a_new
                if base_zero:
                    base = 0.0
                else:
                    live = _LiveStats(s_mass, s_x, atom_x[present],
                                      np.full(int(round(s_mass / w)), w))
                    base = float(model.drift_base(t_n, np.asarray([xk]), live)[0])
                gain = 0.0 if gain_zero else state_gain(s_alpha)
                drift = base + gain * xk + a_new
                x_next = xk + drift * dt + noise_scale * xi[k, step]
                if x_next <= lo:
                    x_next = lo
                    new_exit[k] = step + 1
                    cur_active[k] = False
                elif x_next >= hi:
                    x_next = hi
                    new_exit[k] = step + 1
                    cur_active[k] = False
                cur_x[k] = x_next
                if visited is not None:
                    visited[k] = True

            if one_per_step:
                # everyone else keeps their carried control and advances
                for k in np.nonzero(cur_active & ~visited)[0]:
                    a_k = own_alpha[k]
                    new_alpha[k, step] = a_k
                    if not prev_act[k] or a_k != prev_alpha_n[k]:
                        modifications += 1
                    xk = cur_x[k]
                    if base_zero:
                        base = 0.0
                    else:
                        live = _LiveStats(s_mass, s_x, atom_x[present],
                                          np.full(int(round(s_mass / w)), w))
                        base = float(model.drift_base(t_n, np.asarray([xk]), live)[0])
                    gain = 0.0 if gain_zero else state_gain(s_alpha)
                    drift = base + gain * xk + a_k
                    x_next = xk + drift * dt + noise_scale * xi[k, step]
                    if x_next <= lo:
                        x_next = lo
                        new_exit[k] = step + 1
                        cur_active[k] = False
                    elif x_next >= hi:
                        x_next = hi
                        new_exit[k] = step + 1
                        cur_active[k] = False
                    cur_x[k] = x_next

            new_x[:, step + 1] = cur_x
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    new_traj = TrajectorySet(
        x=new_x, alpha=new_alpha, exit_step=new_exit, weight=w, dt=dt
    )
    n_terms = options.metric.max_terms
    if prev_moments is None:
        prev_moments = (
            prev.cached_moments
            if prev.cached_moments is not None
            else time_averaged_moments(prev, n_terms)
        )
    new_moments = time_averaged_moments(new_traj, n_terms)
    new_traj.cached_moments = new_moments
    change = weak_star_distance_from_moments(prev_moments, new_moments, options.metric)
    converged = modifications == 0 or change <= options.convergence_threshold
    report = IterationReport(
        sweep=sweep_index,
        modifications=modifications,
        distribution_change=change,
        converged=converged,
    )
    return new_traj, report


def run_to_equilibrium(
    model: ModelSpec,
    grid: ControlGrid,
    ensemble: Ensemble,
    *,
    dt: float,
    n_steps: int,
    seed: int,
    phase: int = 0,
    max_sweeps: int,
    options: SweepOptions,
    start_controls: Optional[np.ndarray] = None,
) -> EquilibriumResult:
    """Sweep until no particle modifies any control (or the distribution
    stops moving), up to ``max_sweeps`` sweeps.

    The starting trajectory plays the nearest-boundary initial controls, or
    ``start_controls`` (a per-particle, per-step matrix on the grid) when
    given. ``max_sweeps = 0`` returns that frozen-control starting run,
    flagged as non-converged. Non-convergence is an outcome, not an error.
    """
    xi = make_noise(seed, phase, ensemble.x0.size, n_steps)
    if start_controls is None:
        traj = simulate_initial(ensemble, model, xi, dt, n_steps)
    else:
        traj = simulate_controls(
            ensemble.x0, ensemble.weight, start_controls, model, xi, dt
        )
    reports: list[IterationReport] = []
    converged = False
    for sweep_index in range(1, max_sweeps + 1):
        traj, report = sweep_best_reply(
            traj, model, grid,
            seed=seed, phase=phase, sweep_index=sweep_index, xi=xi, options=options,
        )
        reports.append(report)
        if report.converged:
            converged = True
            break
    return EquilibriumResult(trajectories=traj, reports=reports, converged=converged)


def verify_equilibrium(
    traj: TrajectorySet,
    model: ModelSpec,
    grid: ControlGrid,
    *,
    seed: int,
    phase: int,
    options: SweepOptions,
    sweep_index: int,
    xi: Optional[np.ndarray] = None,
) -> tuple[int, float]:
    """Run one extra sweep against the given trajectories.

    Returns (modifications, residual) where the residual is the largest
    control change over all live (particle, step) pairs; both are zero at a
    true equilibrium.
    """
    if xi is None:
        xi = make_noise(seed, phase, traj.n_particles, traj.n_steps)
    new_traj, report = sweep_best_reply(
        traj, model, grid,
        seed=seed, phase=phase, sweep_index=sweep_index, xi=xi, options=options,
    )
    active = new_traj.exit_step[:, None] > np.arange(traj.n_steps)[None, :]
    if active.any():
        residual = float(np.max(np.abs(new_traj.alpha[active] - traj.alpha[active])))
    else:
        residual = 0.0
    return report.modifications, residual


def max_greedy_gap(
    traj: TrajectorySet,
    model: ModelSpec,
    grid: ControlGrid,
    *,
    options: SweepOptions,
    sample_fraction: float = 0.01,
    seed: int = 0,
) -> float:
    """Largest one-step regret over a random sample of (particle, step) pairs.

    Freezes the final empirical measures and re-prices every grid control for
    the sampled pairs; at an equilibrium the adopted control never loses, so
    the gap is ~0 (up to summation-order rounding).
    """
    rng = np.random.default_rng(seed)
    g = grid.points
    dt, w = traj.dt, traj.weight
    quad = dt * model.quad_weight * g * g
    coef_dt = dt * model.coupling_coef
    include_self = options.theta_self == "include"
    post = options.cost_eval == "post_step"
    stats = _LiveStats(0.0, 0.0, _EMPTY, _EMPTY)
    worst = 0.0
    for step in range(traj.n_steps):
        active = np.nonzero(traj.exit_step > step)[0]
        if active.size == 0:
            continue
        take = active[rng.random(active.size) < sample_fraction]
        if take.size == 0:
            continue
        t_n = step * dt
        xs = traj.x[active, step]
        alphas = traj.alpha[active, step]
        s_mass = w * active.size
        s_x = w * float(xs.sum())
        s_alpha = w * float(alphas.sum())
        stats.mass = s_mass
        stats.first_moment = s_x
        stats.x = xs
        stats.w = np.full(active.size, w)
        for k in take:
            a_k = traj.alpha[k, step]
            theta = s_alpha if include_self else s_alpha - w * a_k
            s_lin = coef_dt * theta
            if post:
                row = traj.x[k, step] + g * dt
                cost = dt * model.state_cost(t_n, row, stats) + quad + s_lin * g
            else:
                cost = quad + s_lin * g
            adopted = int(np.searchsorted(g, a_k))
            if adopted >= g.size or g[adopted] != a_k:
                raise ValueError("trajectory control is not on the supplied grid")
            gap = float(cost[adopted] - cost.min())
            if gap > worst:
                worst = gap
    return worst


# --------------------------------------------------------------------------
# pruning and value reconstruction
# --------------------------------------------------------------------------


def prune_control_set(
    traj: TrajectorySet, grid: ControlGrid, keep_fraction: float
) -> ControlGrid:
    """Sub-grid of controls whose usage frequency reaches ``keep_fraction``.

    Frequencies count live (particle, step) pairs only. At least two controls
    always survive: if the threshold would leave fewer, the two most used
    (ties to the smaller grid index) are kept.
    """
    if keep_fraction < 0.0:
        raise ValueError("keep_fraction must be non-negative")
    active = traj.exit_step[:, None] > np.arange(traj.n_steps)[None, :]
    used = traj.alpha[active]
    if used.size == 0:
        return grid
    idx = np.searchsorted(grid.points, used)
    idx = np.minimum(idx, grid.n_points - 1)
    if not np.all(grid.points[idx] == used):
        raise ValueError("trajectory controls are not on the supplied grid")
    freq = np.bincount(idx, minlength=grid.n_points) / used.size
    keep = freq >= keep_fraction
    if np.count_nonzero(keep) < 2:
        top_two = np.sort(np.argsort(-freq, kind="stable")[:2])
        keep[:] = False
        keep[top_two] = True
    return grid.subset(np.nonzero(keep)[0])


def warm_start_controls(
    traj: TrajectorySet, n_particles: int, grid: ControlGrid
) -> np.ndarray:
    """Control paths for a fresh ensemble, cloned from a completed run.

    Particle k of the new ensemble copies the full control path of the
    completed-run particle at the nearest initial-mass quantile (both
    ensembles are stratified samples of the same density, so quantile rank
    identifies the donor), snapped to the nearest point of ``grid``. This
    turns a cheap exploratory solution into a starting point for a larger
    run instead of restarting the iteration from scratch.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    donors = (np.arange(n_particles) + 0.5) * (traj.n_particles / n_particles)
    donors = np.minimum(donors.astype(np.int64), traj.n_particles - 1)
    return grid.nearest(traj.alpha[donors])


def value_function_trace(
    traj: TrajectorySet, model: ModelSpec, options: SweepOptions
) -> np.ndarray:
    """Per-particle cost-to-go along the final trajectories.

    Backward accumulation of the one-step running costs against the realized
    empirical measures, plus the terminal cost for particles alive at the
    horizon; identically zero from a particle's exit time onward. The mean
    control keeps the sweep's self-inclusion convention so the traces price
    exactly what the particles optimized.
    """
    n, n_steps = traj.n_particles, traj.n_steps
    w, dt = traj.weight, traj.dt
    include_self = options.theta_self == "include"
    u = np.zeros((n, n_steps + 1))
    alive_at_horizon = np.nonzero(traj.exit_step > n_steps)[0]
    final_mass = w * alive_at_horizon.size
    for k in alive_at_horizon:
        u[k, n_steps] = model.terminal_cost(float(traj.x[k, n_steps]), final_mass)
    stats = _LiveStats(0.0, 0.0, _EMPTY, _EMPTY)
    for step in range(n_steps - 1, -1, -1):
        active = traj.exit_step > step
        if not active.any():
            continue
        xs = traj.x[active, step]
        alphas = traj.alpha[active, step]
        stats.mass = w * xs.size
        stats.first_moment = w * float(xs.sum())
        stats.x = xs
        stats.w = np.full(xs.size, w)
        s_alpha = w * float(alphas.sum())
        theta = s_alpha if include_self else s_alpha - w * alphas
        running = (
            model.state_cost(step * dt, xs, stats)
            + model.coupling_coef * alphas * theta
            + model.quad_weight * alphas * alphas
        )
        u[active, step] = u[active, step + 1] + dt * running
    return u


# --------------------------------------------------------------------------
# two-phase orchestration
# --------------------------------------------------------------------------


def run_two_phase(
    model: ModelSpec,
    grid: ControlGrid,
    *,
    n_particles: int,
    dt: float,
    n_steps: int,
    seed: int,
    max_sweeps: int,
    options: SweepOptions,
    phase1_enabled: bool,
    phase1_particles: int,
    keep_fraction: float,
) -> TwoPhaseResult:
    """Optional cheap exploratory run that prunes the control grid and seeds
    the full run, which then iterates on the surviving controls.

    When phase 1 runs, its solution both selects the pruned grid and provides
    the full run's starting control paths (via warm_start_controls), so the
    expensive phase refines an already-equilibrated profile rather than
    restarting from the rush-to-the-boundary guess. The two phases draw from
    disjoint noise streams; phase 2 uses the same streams as a single-phase
    run, so disabling phase 1 never changes the main run's randomness.
    """
    phase1_result: Optional[EquilibriumResult] = None
    pruned = grid
    start = None
    if phase1_enabled:
        ens1 = init_ensemble(phase1_particles, model.initial_density, model.domain, grid)
        phase1_result = run_to_equilibrium(
            model, grid, ens1,
            dt=dt, n_steps=n_steps, seed=seed, phase=1,
            max_sweeps=max_sweeps, options=options,
        )
        pruned = prune_control_set(phase1_result.trajectories, grid, keep_fraction)
        start = warm_start_controls(phase1_result.trajectories, n_particles, pruned)
    ens2 = init_ensemble(n_particles, model.initial_density, model.domain, pruned)
    phase2_result = run_to_equilibrium(
        model, pruned, ens2,
        dt=dt, n_steps=n_steps, seed=seed, phase=0,
        max_sweeps=max_sweeps, options=options, start_controls=start,
    )
    return TwoPhaseResult(
        phase1=phase1_result,
        phase2=phase2_result,
        grid_full=grid,
        grid_pruned=pruned,
    )
