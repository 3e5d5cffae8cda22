"""Numerical primitives shared by the rest of the package.

Three independent tools live here: the principal branch of the Lambert W
function (used by the closed-form exponential-cost control), compactly
supported shape kernels for reconstructing densities from particle atoms,
and a truncated weak-star metric over joint state-control measures that
serves as the convergence diagnostic of the sweep loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

_NEG_INV_E = -math.exp(-1.0)
_BRANCH_GRACE = 5e-16


def lambert_w0(x: float) -> float:
    """Principal branch of the Lambert W function.

    Solves w*exp(w) = x for x >= -1/e, returning the branch with w >= -1.
    The initial guess is a regime-split series (square-root expansion near
    the branch point, log asymptotics for large x), refined by Halley
    iteration until the residual is below 1e-13 * max(1, |x|).

    Raises ValueError for x < -1/e, where no real value exists on this
    branch.
    """
    x = float(x)
    if math.isnan(x) or x < _NEG_INV_E - _BRANCH_GRACE:
        raise ValueError(f"lambert_w0 is real only for x >= -1/e, got {x!r}")
    if x == 0.0:
        return 0.0

    if x < -0.25:
        # branch-point expansion in p = sqrt(2*(e*x + 1))
        arg = 2.0 * (math.e * x + 1.0)
        p = math.sqrt(arg) if arg > 0.0 else 0.0
        w = -1.0 + p * (1.0 - p * (1.0 / 3.0 - (11.0 / 72.0) * p))
    elif x < 2.0:
        w = x / (1.0 + x)
    else:
        l1 = math.log(x)
        l2 = math.log(l1)
        w = l1 - l2 + l2 / l1

    for _ in range(50):
        e = math.exp(w)
        f = w * e - x
        wp1 = w + 1.0
        if f == 0.0 or wp1 <= 0.0:
            break
        # Halley update; the wp1 correction term is the second-order piece
        denom = e * wp1 - (w + 2.0) * f / (2.0 * wp1)
        step = f / denom
        w -= step
        if abs(step) <= 1e-16 * max(1.0, abs(w)):
            break
    w = max(w, -1.0)
    if abs(w * math.exp(w) - x) > 1e-12 * max(1.0, abs(x)):
        raise ArithmeticError(f"lambert_w0 failed to converge for x={x!r}")
    return w


# --------------------------------------------------------------------------
# shape kernels
# --------------------------------------------------------------------------

_KERNEL_FAMILIES = ("cubic_bspline", "biweight")


def _profile_cubic_bspline(u: np.ndarray) -> np.ndarray:
    # cubic B-spline rescaled from its native [-2, 2] support onto [-1, 1]
    v = np.abs(2.0 * u)
    inner = (2.0 - v) ** 3 - 4.0 * (1.0 - v) ** 3
    outer = (2.0 - v) ** 3
    out = np.where(v < 1.0, inner, np.where(v < 2.0, outer, 0.0))
    return out / 3.0  # (1/6) from the B-spline times the factor 2 rescale


def _profile_biweight(u: np.ndarray) -> np.ndarray:
    t = 1.0 - u * u
    return np.where(t > 0.0, (15.0 / 16.0) * t * t, 0.0)


_PROFILES = {
    "cubic_bspline": _profile_cubic_bspline,
    "biweight": _profile_biweight,
}


@lru_cache(maxsize=None)
def _radial_norm_constant(family: str, dimension: int) -> float:
    """Normalization making the radial kernel integrate to 1 over R^d."""
    if dimension == 1:
        return 1.0  # the 1-d profiles already have unit integral
    r = np.linspace(0.0, 1.0, 200001)
    vals = _PROFILES[family](r) * r ** (dimension - 1)
    radial = float(np.trapezoid(vals, r))
    surface = 2.0 * math.pi ** (dimension / 2.0) / math.gamma(dimension / 2.0)
    return 1.0 / (surface * radial)


@dataclass(frozen=True)
class ShapeKernel:
    """Compactly supported, unit-integral kernel phi with its bandwidth.

    The scaled kernel is phi_eps(x) = phi(x/eps) / eps^d; support of phi is
    the closed unit ball. In one dimension phi is the named profile itself;
    in higher dimensions it is the radial extension of that profile,
    renormalized to unit integral.
    """

    family: str = "cubic_bspline"
    bandwidth: float = 0.02
    dimension: int = 1

    def __post_init__(self) -> None:
        if self.family not in _KERNEL_FAMILIES:
            raise ValueError(
                f"unknown kernel family {self.family!r}; choose from {_KERNEL_FAMILIES}"
            )
        if not self.bandwidth > 0.0:
            raise ValueError("kernel bandwidth must be positive")
        if self.dimension < 1:
            raise ValueError("kernel dimension must be a positive integer")

    def profile(self, u):
        """Unscaled kernel phi evaluated at u (scalar or array).

        For dimension > 1, u is interpreted as the radius |x|.
        """
        vals = _PROFILES[self.family](np.asarray(u, dtype=float))
        if self.dimension > 1:
            vals = vals * _radial_norm_constant(self.family, self.dimension)
        if np.ndim(u) == 0:
            return float(vals)
        return vals

    def scaled(self, x):
        """phi_eps(x) = phi(x/eps) / eps^d at displacement x (scalar or radius)."""
        eps = self.bandwidth
        return self.profile(np.asarray(x, dtype=float) / eps) / eps**self.dimension

    def density(self, positions: np.ndarray, weights: np.ndarray, queries: np.ndarray) -> np.ndarray:
        """Vectorized 1-d density reconstruction at an array of query points."""
        positions = np.asarray(positions, dtype=float)
        weights = np.asarray(weights, dtype=float)
        queries = np.asarray(queries, dtype=float)
        if positions.size == 0:
            return np.zeros_like(queries)
        diffs = queries[:, None] - positions[None, :]
        return self.scaled(diffs) @ weights


def kernel_density(atoms, kernel: ShapeKernel, query) -> float:
    """Density sum_k w_k * phi_eps(query - x_k) from weighted atoms.

    atoms is an iterable of (position, weight) pairs; an empty iterable
    gives 0. Weights must be non-negative for the result to be a density.
    """
    total = 0.0
    for x, w in atoms:
        if kernel.dimension == 1:
            total += w * float(kernel.scaled(query - x))
        else:
            r = float(np.linalg.norm(np.asarray(query, dtype=float) - np.asarray(x, dtype=float)))
            total += w * float(kernel.scaled(r))
    return total


# --------------------------------------------------------------------------
# truncated weak-star metric
# --------------------------------------------------------------------------

def domain_radius(box) -> float:
    """sup{|z| : z in box} for a box given as ((lo, hi), ...) per coordinate."""
    sq = 0.0
    for lo, hi in box:
        sq += max(lo * lo, hi * hi)
    return math.sqrt(sq)


@dataclass(frozen=True)
class WeakStarMetricConfig:
    """Parameters of the truncated metric d_a over joint measures.

    The basis functions are raw monomials in the joint (state, control)
    variables, ordered by total degree with the constant function first;
    within a degree the leading variable's exponent descends. The metric
    value depends on this (documented) choice of basis.
    """

    a: float = 2.0
    max_terms: int = 20
    domain_box: tuple = ()

    def __post_init__(self) -> None:
        if not self.a > 1.0:
            raise ValueError("weak-star weight base a must exceed 1")
        if self.max_terms < 1:
            raise ValueError("weak-star truncation needs at least one term")


def monomial_exponents(n_vars: int, n_terms: int) -> np.ndarray:
    """First n_terms exponent tuples of the graded monomial basis."""
    rows: list[tuple[int, ...]] = []
    degree = 0
    while len(rows) < n_terms:
        rows.extend(_compositions(degree, n_vars))
        degree += 1
    return np.array(rows[:n_terms], dtype=np.int64)


def _compositions(total: int, parts: int):
    if parts == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for tail in _compositions(total - head, parts - 1):
            yield (head,) + tail


def monomial_moments(points: np.ndarray, weights: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """integral of each basis monomial against the atomic measure."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    weights = np.asarray(weights, dtype=float)
    out = np.empty(len(exponents))
    for i, expo in enumerate(exponents):
        vals = weights.copy()
        for j, e in enumerate(expo):
            if e:
                vals *= points[:, j] ** int(e)
        out[i] = vals.sum()
    return out


def _atoms_of(nu):
    """Accept either an object with joint_points()/w or a (points, weights) pair."""
    if hasattr(nu, "joint_points"):
        return np.atleast_2d(nu.joint_points()), np.asarray(nu.w, dtype=float)
    points, weights = nu
    return np.atleast_2d(np.asarray(points, dtype=float)), np.asarray(weights, dtype=float)


def weak_star_distance_from_moments(
    m1: np.ndarray, m2: np.ndarray, cfg: WeakStarMetricConfig
) -> float:
    """Distance computed from two already-evaluated monomial moment vectors.

    Callers that track moment vectors incrementally (the engine's
    sweep-to-sweep comparison) use this to avoid re-walking atom sets; the
    vectors must come from the same graded basis as monomial_exponents.
    """
    m1 = np.asarray(m1, dtype=float)
    m2 = np.asarray(m2, dtype=float)
    if m1.shape != m2.shape or m1.ndim != 1 or m1.size > cfg.max_terms:
        raise ValueError("moment vectors must share one shape within max_terms")
    diff = np.abs(m1 - m2)
    weights = cfg.a ** (-np.arange(1, diff.size + 1, dtype=float))
    return float(np.sum(weights * diff / (1.0 + diff)))


def weak_star_distance(nu1, nu2, cfg: WeakStarMetricConfig) -> float:
    """Truncated weak-star distance sum_k a^-k |I_k| / (1 + |I_k|).

    I_k is the difference of the k-th monomial moments of the two measures.
    The sum runs over the first cfg.max_terms basis monomials; the dropped
    tail is bounded by a^(1 - max_terms) / (a - 1).
    """
    p1, w1 = _atoms_of(nu1)
    p2, w2 = _atoms_of(nu2)
    n_vars = p1.shape[1] if p1.size else p2.shape[1]
    exponents = monomial_exponents(n_vars, cfg.max_terms)
    m1 = monomial_moments(p1, w1, exponents) if w1.size else np.zeros(cfg.max_terms)
    m2 = monomial_moments(p2, w2, exponents) if w2.size else np.zeros(cfg.max_terms)
    return weak_star_distance_from_moments(m1, m2, cfg)
