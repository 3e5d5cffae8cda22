"""Concrete model definitions: evacuation and refinancing.

Both shipped models share one structural family, which is also the family the
engine's fast path exploits:

    drift(t, x, a; mu)      = drift_base(t, x; m) + state_gain(theta(mu)) * x + a
    lagrangian(t, x, a; mu) = state_cost(t, x; m) + coupling_coef * a * theta(mu)
                              + quad_weight * a^2

where m is the state marginal of the joint measure mu and theta is its mean
control. ``ModelSpec`` carries the structured pieces (vectorized over
positions) together with the scalar ``drift``/``lagrangian`` closures that
evaluate them against an explicit measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .measures import EmpiricalJointMeasure, theta, total_mass

__all__ = [
    "StepStats",
    "ModelSpec",
    "EvacuationParams",
    "RefinancingParams",
    "evacuation_lagrangian",
    "evacuation_drift",
    "refinancing_lagrangian",
    "refinancing_drift",
    "evacuation_model",
    "refinancing_model",
]


@dataclass(frozen=True)
class StepStats:
    """State-marginal summaries a model needs at one time step.

    ``mass`` and ``first_moment`` are the raw (un-normalized) moments of the
    active atoms; ``x`` and ``w`` expose the atoms themselves for convolution
    terms. The mean control is deliberately absent: it changes within a sweep
    step and is threaded separately.
    """

    mass: float
    first_moment: float
    x: np.ndarray
    w: np.ndarray

    @classmethod
    def from_measure(cls, nu: EmpiricalJointMeasure) -> "StepStats":
        return cls(
            mass=total_mass(nu),
            first_moment=float(np.dot(nu.w, nu.x)),
            x=nu.x,
            w=nu.w,
        )

    @classmethod
    def from_atoms(cls, x: np.ndarray, w: np.ndarray) -> "StepStats":
        x = np.asarray(x, dtype=float)
        w = np.asarray(w, dtype=float)
        return cls(mass=float(w.sum()), first_moment=float(np.dot(w, x)), x=x, w=w)


def _zero_terminal(x: float, mass: float) -> float:
    return 0.0


@dataclass(frozen=True)
class ModelSpec:
    """Everything the engine needs to simulate and cost one model.

    ``state_cost`` and ``drift_base`` are vectorized over query positions and
    receive the per-step :class:`StepStats`; ``state_gain`` maps the mean
    control to the multiplier on x in the drift (identically zero for models
    whose drift ignores the mean control, signalled by ``state_gain_is_zero``
    so lookahead cost tables can be precomputed).
    """

    name: str
    diffusion: float
    domain: tuple[float, float]
    control_bounds: tuple[float, float]
    quad_weight: float
    coupling_coef: float
    state_cost: Callable[[float, np.ndarray, StepStats], np.ndarray]
    drift_base: Callable[[float, np.ndarray, StepStats], np.ndarray]
    state_gain: Callable[[float], float]
    state_gain_is_zero: bool
    drift_base_is_zero: bool
    terminal_cost: Callable[[float, float], float]
    summaries: tuple[str, ...]
    initial_density: Callable[[np.ndarray], np.ndarray]
    params: object

    def __post_init__(self) -> None:
        if not (math.isfinite(self.diffusion) and self.diffusion >= 0.0):
            raise ValueError("diffusion must be finite and non-negative")
        if not self.domain[0] < self.domain[1]:
            raise ValueError("domain must be an open interval (lo, hi) with lo < hi")
        if not self.control_bounds[0] < self.control_bounds[1]:
            raise ValueError("control bounds must satisfy lo < hi")
        if self.quad_weight < 0.0:
            raise ValueError("quadratic control weight must be non-negative")

    # -- measure-facing closures (the generic contract) ---------------------

    def stats_from_measure(self, mu: EmpiricalJointMeasure) -> StepStats:
        return StepStats.from_measure(mu)

    def drift(self, t: float, x: float, alpha: float, mu: EmpiricalJointMeasure) -> float:
        stats = StepStats.from_measure(mu)
        base = float(self.drift_base(t, np.asarray([x], dtype=float), stats)[0])
        return base + self.state_gain(theta(mu)) * x + alpha

    def lagrangian(
        self, t: float, x: float, alpha: float, mu: EmpiricalJointMeasure
    ) -> float:
        stats = StepStats.from_measure(mu)
        state = float(self.state_cost(t, np.asarray([x], dtype=float), stats)[0])
        return state + self.interaction(t, x, alpha, mu) + self.quad_weight * alpha * alpha

    def interaction(
        self, t: float, x: float, alpha: float, mu: EmpiricalJointMeasure
    ) -> float:
        """The measure-coupled cost term alone (the monotone part)."""
        return self.coupling_coef * alpha * theta(mu)


# --------------------------------------------------------------------------
# evacuation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvacuationParams:
    """Congestion-and-alignment cost with optional interaction kernel.

    The running cost is eta / (|first_moment - x| + softening)
    + beta * a * theta + eps * a^2; the drift is (kernel * m)(x) + a, with a
    zero kernel by default.
    """

    eta: float = 4.0
    beta: float = 1.0
    eps: float = 0.5
    softening: float = 0.2
    kernel: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.eta < 0.0 or self.beta < 0.0 or self.eps < 0.0:
            raise ValueError("eta, beta, and eps must be non-negative")
        if not self.softening > 0.0:
            raise ValueError("softening must be positive")


def _evac_state_cost(params: EvacuationParams, xq: np.ndarray, first_moment: float) -> np.ndarray:
    return params.eta / (np.abs(first_moment - xq) + params.softening)


def _kernel_convolution(
    kernel: Optional[Callable[[np.ndarray], np.ndarray]],
    xq: np.ndarray,
    stats: StepStats,
) -> np.ndarray:
    if kernel is None or stats.x.size == 0:
        return np.zeros_like(xq)
    diffs = xq[:, None] - stats.x[None, :]
    return np.asarray(kernel(diffs), dtype=float) @ stats.w


def evacuation_lagrangian(
    t: float, x: float, alpha: float, mu: EmpiricalJointMeasure, params: EvacuationParams
) -> float:
    """Congestion around the population's first moment plus alignment and
    quadratic control costs."""
    fm = float(np.dot(mu.w, mu.x))
    congestion = float(_evac_state_cost(params, np.asarray([x], dtype=float), fm)[0])
    return congestion + params.beta * alpha * theta(mu) + params.eps * alpha * alpha


def evacuation_drift(
    t: float, x: float, alpha: float, mu: EmpiricalJointMeasure, params: EvacuationParams
) -> float:
    """Kernel-smoothed population pull plus the agent's own control."""
    stats = StepStats.from_measure(mu)
    conv = float(_kernel_convolution(params.kernel, np.asarray([x], dtype=float), stats)[0])
    return conv + alpha


def _evacuation_initial_density(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where((x > 0.5) & (x < 1.0), 2.0, 0.0)


def evacuation_model(
    params: EvacuationParams | None = None,
    *,
    domain: tuple[float, float] = (0.0, 1.0),
    control_bounds: tuple[float, float] = (-0.2, 0.2),
    sigma: float = 2.5e-9,
) -> ModelSpec:
    """Bind evacuation parameters into the engine-facing model interface."""
    p = params if params is not None else EvacuationParams()
    summaries = ("total_mass", "first_moment", "theta")
    if p.kernel is not None:
        summaries = summaries + ("convolution",)
    return ModelSpec(
        name="evacuation",
        diffusion=sigma,
        domain=domain,
        control_bounds=control_bounds,
        quad_weight=p.eps,
        coupling_coef=p.beta,
        state_cost=lambda t, xq, stats: _evac_state_cost(p, xq, stats.first_moment),
        drift_base=lambda t, xq, stats: _kernel_convolution(p.kernel, xq, stats),
        state_gain=lambda th: 0.0,
        state_gain_is_zero=True,
        drift_base_is_zero=p.kernel is None,
        terminal_cost=_zero_terminal,
        summaries=summaries,
        initial_density=_evacuation_initial_density,
        params=p,
    )


# --------------------------------------------------------------------------
# refinancing
# --------------------------------------------------------------------------


def _default_rate(z: float) -> float:
    return 0.05 + 1.0 * z


def _default_state_cost(t: float, x) -> np.ndarray:
    return 1.0 * (1.0 + np.asarray(x, dtype=float)) / 2.0


@dataclass(frozen=True)
class RefinancingParams:
    """Debt-refinancing cost with a mean-control-dependent rate of return.

    The running cost is ell(t, x) + M1 * a * theta + eps * a^2; the drift is
    (1 + rho(theta)) * x + a. ``rho`` defaults to the affine rate
    z -> 0.05 + z and ``ell`` to the increasing state cost (1 + x) / 2.
    """

    M1: float = 0.1
    eps: float = 0.5
    rho: Optional[Callable[[float], float]] = None
    ell: Optional[Callable[[float, np.ndarray], np.ndarray]] = None

    def __post_init__(self) -> None:
        if self.M1 < 0.0:
            raise ValueError("M1 must be non-negative")
        if not self.eps > 0.0:
            raise ValueError("eps must be positive")
        if self.rho is None:
            object.__setattr__(self, "rho", _default_rate)
        if self.ell is None:
            object.__setattr__(self, "ell", _default_state_cost)


def refinancing_lagrangian(
    t: float, x: float, alpha: float, mu: EmpiricalJointMeasure, params: RefinancingParams
) -> float:
    """State cost plus mean-control alignment and quadratic control costs."""
    state = float(np.asarray(params.ell(t, np.asarray([x], dtype=float)), dtype=float).reshape(-1)[0])
    return state + params.M1 * alpha * theta(mu) + params.eps * alpha * alpha


def refinancing_drift(
    t: float, x: float, alpha: float, mu: EmpiricalJointMeasure, params: RefinancingParams
) -> float:
    """Debt compounding at the mean-control-dependent rate plus the control."""
    return (1.0 + params.rho(theta(mu))) * x + alpha


def _refinancing_initial_density(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.where((x > -0.5) & (x < 0.5), 1.0, 0.0)


def refinancing_model(
    params: RefinancingParams | None = None,
    *,
    domain: tuple[float, float] = (-1.0, 1.0),
    control_bounds: tuple[float, float] = (-0.05, 0.05),
    sigma: float = 2.5e-9,
) -> ModelSpec:
    """Bind refinancing parameters into the engine-facing model interface."""
    p = params if params is not None else RefinancingParams()
    return ModelSpec(
        name="refinancing",
        diffusion=sigma,
        domain=domain,
        control_bounds=control_bounds,
        quad_weight=p.eps,
        coupling_coef=p.M1,
        state_cost=lambda t, xq, stats: np.asarray(p.ell(t, xq), dtype=float) * np.ones_like(xq),
        drift_base=lambda t, xq, stats: np.zeros_like(xq),
        state_gain=lambda th: 1.0 + p.rho(th),
        state_gain_is_zero=False,
        drift_base_is_zero=True,
        terminal_cost=_zero_terminal,
        summaries=("total_mass", "theta"),
        initial_density=_refinancing_initial_density,
        params=p,
    )
