"""Sublinear expectation of payoffs via a fully nonlinear heat equation.

The expectation of phi(B_T) under variance-rate ambiguity is the value
u(T, 0) of the initial-value problem

    u_t = g(u_xx),   u(0, x) = phi(x),
    g(a) = (sigma_bar_sq * max(a, 0) - sigma_low_sq * max(-a, 0)) / 2,

solved here with an explicit monotone finite-difference scheme.  Under the
step restriction dt * sigma_bar_sq / dx^2 <= 1/2 the discrete update is
monotone, preserves constants exactly, and is subadditive and positively
homogeneous, so the defining properties of the continuous operator hold at
the discrete level as well (up to rounding).  Boundary nodes use a zero
second difference, i.e. the solution continues linearly past the domain.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import BudgetExceededError, CFLError, DomainTooSmallWarning
from .problem import AmbiguityBounds

CFL_LIMIT = 0.5


def g_scalar(a, bounds: AmbiguityBounds):
    """g(a) = (bar * a+ - low * a-) / 2; positively homogeneous, monotone."""
    a = np.asarray(a, dtype=float)
    out = 0.5 * (bounds.sigma_bar_sq * np.maximum(a, 0.0) - bounds.sigma_low_sq * np.maximum(-a, 0.0))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class GHeatGrid:
    """Uniform space-time grid; dx is derived, dt follows from the horizon."""

    x_min: float
    x_max: float
    n_space: int
    n_time: int

    def __post_init__(self):
        if not (self.x_min < 0.0 < self.x_max):
            raise ValueError("grid must straddle the origin: x_min < 0 < x_max")
        if self.n_space < 3 or self.n_time < 1:
            raise ValueError("need n_space >= 3 and n_time >= 1")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_space - 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_space)

    def dt(self, horizon: float) -> float:
        return horizon / self.n_time

    def cfl_number(self, horizon: float, bounds: AmbiguityBounds) -> float:
        return self.dt(horizon) * bounds.sigma_bar_sq / self.dx ** 2


def default_grid(
    bounds: AmbiguityBounds,
    horizon: float,
    n_space: int = 801,
    width_sds: float = 6.0,
    cfl_target: float = 0.45,
) -> GHeatGrid:
    """Grid spanning +- width_sds standard deviations at the upper rate.

    Mass beyond six standard deviations is negligible against the default
    value tolerance of 1e-3, so boundary effects stay below it.
    """
    half = width_sds * math.sqrt(bounds.sigma_bar_sq * horizon)
    dx = 2.0 * half / (n_space - 1)
    n_time = max(1, math.ceil(horizon * bounds.sigma_bar_sq / (cfl_target * dx ** 2)))
    return GHeatGrid(-half, half, n_space, n_time)


def _march(u0: np.ndarray, n_time: int, dt: float, dx: float,
           bounds: AmbiguityBounds, record_every: int | None = None):
    """Step the explicit scheme; works on any (..., n_space) stack of layers.

    Returns (final_layer, recorded_layers_or_None).  Interior update adds
    dt * g(second difference); the two boundary nodes are held fixed (zero
    second difference).
    """
    u = np.array(u0, dtype=float)
    recorded = [u.copy()] if record_every else None
    inv_dx2 = 1.0 / dx ** 2
    hi = 0.5 * dt * bounds.sigma_bar_sq * inv_dx2
    lo = 0.5 * dt * bounds.sigma_low_sq * inv_dx2
    for k in range(n_time):
        d2 = u[..., 2:] - 2.0 * u[..., 1:-1] + u[..., :-2]
        u[..., 1:-1] += hi * np.maximum(d2, 0.0) - lo * np.maximum(-d2, 0.0)
        if record_every and ((k + 1) % record_every == 0 or k == n_time - 1):
            recorded.append(u.copy())
    return u, recorded


@dataclass(frozen=True, eq=False)
class GHeatSolution:
    """Recorded layers of one solve; layer 0 is the sampled payoff."""

    grid: GHeatGrid
    horizon: float
    u: np.ndarray             # (n_layers, n_space); first layer = payoff
    layer_times: np.ndarray   # (n_layers,), ascending from 0 to horizon
    payoff_label: str = ""

    def value_at(self, x: float) -> float:
        """Final-layer value, linearly interpolated."""
        return float(np.interp(x, self.grid.xs, self.u[-1]))

    @property
    def expectation(self) -> float:
        return self.value_at(0.0)


def _check_cfl(grid: GHeatGrid, horizon: float, bounds: AmbiguityBounds) -> None:
    cfl = grid.cfl_number(horizon, bounds)
    if cfl > CFL_LIMIT + 1e-12:
        raise CFLError(
            f"dt*sigma_bar_sq/dx^2 = {cfl:.4f} exceeds {CFL_LIMIT}; "
            f"refine time (n_time >= {math.ceil(horizon * bounds.sigma_bar_sq / (CFL_LIMIT * grid.dx ** 2))})"
        )


def _warn_if_domain_small(u: np.ndarray, u0: np.ndarray, grid: GHeatGrid,
                          horizon: float, bounds: AmbiguityBounds, tol: float = 1e-3) -> None:
    # Next-to-boundary drift, discounted by the Gaussian mass actually
    # reaching the boundary from the origin, estimates contamination at x=0.
    growth = max(abs(u[1] - u0[1]), abs(u[-2] - u0[-2]))
    sd = math.sqrt(bounds.sigma_bar_sq * horizon)
    dist = min(-grid.x_min, grid.x_max)
    tail = math.erfc(dist / (sd * math.sqrt(2.0)))
    if growth * tail > tol:
        warnings.warn(
            f"domain [{grid.x_min:g}, {grid.x_max:g}] may be too small: boundary-layer "
            f"growth {growth:.3g} with tail mass {tail:.2e}",
            DomainTooSmallWarning,
            stacklevel=3,
        )


def solve_g_heat(
    phi,
    horizon: float,
    bounds: AmbiguityBounds,
    grid: GHeatGrid | None = None,
    max_layers: int = 33,
    payoff_label: str = "",
) -> GHeatSolution:
    """Solve u_t = g(u_xx), u(0, .) = phi, up to ``horizon``.

    ``phi`` must accept a numpy array of grid nodes.  Raises ``CFLError``
    before any stepping if the grid violates the monotonicity restriction;
    warns if the boundary layers move enough to contaminate the origin.
    """
    if grid is None:
        grid = default_grid(bounds, horizon)
    _check_cfl(grid, horizon, bounds)
    u0 = np.asarray(phi(grid.xs), dtype=float)
    if u0.shape != (grid.n_space,):
        u0 = np.broadcast_to(u0, (grid.n_space,)).astype(float)
    record_every = max(1, grid.n_time // max(1, max_layers - 1))
    final, layers = _march(u0, grid.n_time, grid.dt(horizon), grid.dx, bounds, record_every)
    _warn_if_domain_small(final, u0, grid, horizon, bounds)
    times = [0.0]
    times += [min(horizon, k * record_every * grid.dt(horizon))
              for k in range(1, len(layers) - 1)]
    times.append(horizon)
    return GHeatSolution(grid, horizon, np.stack(layers), np.asarray(times), payoff_label)


def g_expectation(
    phi,
    horizon: float,
    bounds: AmbiguityBounds,
    grid: GHeatGrid | None = None,
) -> float:
    """Worst-case expectation of phi(B_horizon) = u(horizon, 0)."""
    if horizon == 0.0:
        return float(np.asarray(phi(np.zeros(1))).reshape(-1)[0])
    if grid is None:
        grid = default_grid(bounds, horizon)
    _check_cfl(grid, horizon, bounds)
    u0 = np.asarray(phi(grid.xs), dtype=float)
    if u0.shape != (grid.n_space,):
        u0 = np.broadcast_to(u0, (grid.n_space,)).astype(float)
    final, _ = _march(u0, grid.n_time, grid.dt(horizon), grid.dx, bounds)
    _warn_if_domain_small(final, u0, grid, horizon, bounds)
    return float(np.interp(0.0, grid.xs, final))


def compose_conditional(
    phi2,
    t1: float,
    t2: float,
    bounds: AmbiguityBounds,
    grid: GHeatGrid | None = None,
    node_budget: float = 5e8,
) -> float:
    """Two-step expectation of phi2(B_t1, B_t2 - B_t1).

    First solves, for every grid value x1 of the first argument, the inner
    problem in the second argument over horizon t2 - t1 (all rows stepped
    simultaneously); the resulting function of x1 then seeds the outer solve
    over horizon t1.
    """
    if not (0.0 < t1 < t2):
        raise ValueError("need 0 < t1 < t2")
    if grid is None:
        grid = default_grid(bounds, t2)
    xs = grid.xs
    inner_h = t2 - t1
    n_inner = max(1, round(grid.n_time * inner_h / t2))
    n_outer = max(1, grid.n_time - n_inner)
    work = grid.n_space ** 2 * n_inner
    if work > node_budget:
        raise BudgetExceededError(
            f"inner sweep needs {work:.3g} node updates, budget is {node_budget:.3g}"
        )
    inner_grid = GHeatGrid(grid.x_min, grid.x_max, grid.n_space, n_inner)
    outer_grid = GHeatGrid(grid.x_min, grid.x_max, grid.n_space, n_outer)
    _check_cfl(inner_grid, inner_h, bounds)
    _check_cfl(outer_grid, t1, bounds)

    payoff = np.asarray(phi2(xs[:, None], xs[None, :]), dtype=float)
    payoff = np.broadcast_to(payoff, (grid.n_space, grid.n_space)).astype(float)
    inner_final, _ = _march(payoff, n_inner, inner_grid.dt(inner_h), grid.dx, bounds)
    # increment starts at 0: read each row at x2 = 0
    if xs[0] == -xs[-1] and grid.n_space % 2 == 1:
        phi1 = inner_final[:, grid.n_space // 2].copy()
    else:
        phi1 = np.array([np.interp(0.0, xs, row) for row in inner_final])

    outer_final, _ = _march(phi1, n_outer, outer_grid.dt(t1), grid.dx, bounds)
    return float(np.interp(0.0, xs, outer_final))


def write_layers_csv(sol: GHeatSolution, path) -> None:
    """Dump recorded layers as (time, x, value) rows for plotting."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "u"])
        for t, layer in zip(sol.layer_times, sol.u):
            for x, v in zip(sol.grid.xs, layer):
                w.writerow([repr(float(t)), repr(float(x)), repr(float(v))])
