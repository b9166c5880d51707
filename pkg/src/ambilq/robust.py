"""Worst-case cost over families of volatility scenarios.

The ambiguity set is surrogate-represented by piecewise-constant variance
paths on a uniform interval grid.  ``robust_cost`` maximizes the Monte Carlo
cost over a family with common random numbers across members, turning the
sup into a deterministic comparison for a fixed seed; small families are
enumerated exhaustively in one batched simulation, larger ones fall back to
coordinate ascent with restarts.  Argmax ties break toward the
lexicographically smallest value vector, and members are enumerated in that
order, so results are reproducible regardless of worker count.

``example_objective``/``example_worst_case`` cover the uncontrolled test
functional 0.5 * int (a t - <B>(t)) gamma(t) dt whose worst case is a single
down-up switch; the quadrature is exact per interval so the search needs no
simulation at all.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BudgetExceededError, ScenarioShapeError
from .problem import AmbiguityBounds, FeedbackControl, LQProblem, VolatilityScenario
from .simulate import SimConfig, _accumulate, _stderr, brownian_increments

MAX_ENUMERATION = 1 << 16
_CHUNK = 256  # scenario rows per batched simulation; keeps state in cache


@dataclass(frozen=True)
class ScenarioFamily:
    """Finite family of piecewise-constant scenarios on a uniform grid.

    ``levels`` are the admissible variance rates per interval (two-point
    bang-bang or a finer ladder).  ``restriction="single-switch"`` keeps only
    the members that start at the lowest level and switch once to the
    highest.
    """

    horizon: float
    n_intervals: int
    levels: tuple[float, ...]
    restriction: str = "full"

    def __post_init__(self):
        if self.horizon <= 0 or self.n_intervals < 1:
            raise ValueError("need positive horizon and at least one interval")
        if len(self.levels) < 1 or any(l <= 0 for l in self.levels):
            raise ValueError("levels must be positive")
        if tuple(sorted(self.levels)) != self.levels:
            raise ValueError("levels must be ascending")
        if self.restriction not in ("full", "single-switch"):
            raise ValueError(f"unknown restriction {self.restriction!r}")

    @classmethod
    def bang_bang(cls, bounds: AmbiguityBounds, horizon: float, n_intervals: int,
                  restriction: str = "full") -> "ScenarioFamily":
        if bounds.sigma_low_sq == bounds.sigma_bar_sq:
            levels = (bounds.sigma_low_sq,)
        else:
            levels = (bounds.sigma_low_sq, bounds.sigma_bar_sq)
        return cls(horizon, n_intervals, levels, restriction)

    @property
    def breakpoints(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_intervals + 1)

    @property
    def member_count(self) -> int:
        if self.restriction == "single-switch":
            return self.n_intervals + 1 if len(self.levels) > 1 else 1
        return len(self.levels) ** self.n_intervals

    def gamma_matrix(self) -> np.ndarray:
        """(member_count, n_intervals) value vectors in lexicographic order."""
        n, levels = self.n_intervals, np.asarray(self.levels)
        if self.restriction == "single-switch":
            if levels.size == 1:
                return np.full((1, n), levels[0])
            lo, hi = levels[0], levels[-1]
            rows = [np.where(np.arange(n) < s, lo, hi) for s in range(n, -1, -1)]
            return np.asarray(rows, dtype=float)
        count = self.member_count
        digits = np.empty((count, n), dtype=int)
        idx = np.arange(count)
        base = len(self.levels)
        for j in range(n - 1, -1, -1):
            digits[:, j] = idx % base
            idx //= base
        return levels[digits]

    def member(self, values: np.ndarray) -> VolatilityScenario:
        return VolatilityScenario(self.breakpoints, np.asarray(values, dtype=float))


@dataclass(frozen=True, eq=False)
class RobustResult:
    """Outcome of a worst-case search over a scenario family."""

    value: float
    argmax_scenario: VolatilityScenario
    argmax_stderr: float
    argmax_cost_samples: np.ndarray      # per-path costs at the argmax (CRN pairing)
    table: list                          # rows (values tuple, mean, stderr, hash)
    method: str


def _argmax_first(means: np.ndarray) -> int:
    """First index attaining the max = lexicographically smallest tie."""
    return int(np.argmax(means))


def _evaluate_members(p, ctrl, gammas, breakpoints, cfg, xi, workers):
    """Means/stderrs per member, chunked; fixed order regardless of workers."""
    chunks = [slice(s, min(s + _CHUNK, gammas.shape[0])) for s in range(0, gammas.shape[0], _CHUNK)]

    def one(sl):
        costs = _accumulate(p, ctrl, gammas[sl], breakpoints, cfg, xi=xi)
        return costs.mean(axis=1), _stderr(costs, axis=1)

    if workers and workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, chunks))
    else:
        parts = [one(sl) for sl in chunks]
    means = np.concatenate([m for m, _ in parts])
    errs = np.concatenate([e for _, e in parts])
    return means, errs


def robust_cost(
    p: LQProblem,
    ctrl: FeedbackControl,
    family: ScenarioFamily,
    cfg: SimConfig,
    method: str = "auto",
    workers: int | None = None,
    restarts: int = 2,
    max_enumeration: int = MAX_ENUMERATION,
) -> RobustResult:
    """Worst-case Monte Carlo cost of ``ctrl`` over ``family``.

    Enumerates exhaustively when the family has at most ``max_enumeration``
    members (always, for bang-bang families with N <= 16); otherwise runs
    coordinate ascent over intervals from the all-high and all-low starts
    plus ``restarts`` seeded random starts.  All members see the same
    Brownian draws.
    """
    count = family.member_count
    if method not in ("auto", "exhaustive", "coordinate"):
        raise ValueError(f"unknown method {method!r}")
    if method == "exhaustive" and count > max_enumeration:
        raise BudgetExceededError(
            f"enumeration of {count} scenarios exceeds the budget of {max_enumeration}"
        )
    if method == "auto":
        method = "exhaustive" if count <= max_enumeration else "coordinate"

    bp = family.breakpoints
    n_steps = int(round(family.horizon / cfg.dt_sim))
    xi = brownian_increments(cfg.seed, cfg.n_paths, n_steps, cfg.antithetic)

    if method == "exhaustive":
        gammas = family.gamma_matrix()
        means, errs = _evaluate_members(p, ctrl, gammas, bp, cfg, xi, workers)
        best = _argmax_first(means)
        table = [(tuple(map(float, gammas[i])), float(means[i]), float(errs[i]))
                 for i in range(count)]
        argmax = family.member(gammas[best])
    else:
        levels = np.asarray(family.levels)
        rng_starts = [np.full(family.n_intervals, levels[-1]),
                      np.full(family.n_intervals, levels[0])]
        for r in range(restarts):
            rng = np.random.default_rng(cfg.seed + 1_000_003 * (r + 1))
            rng_starts.append(levels[rng.integers(0, levels.size, family.n_intervals)])
        table_map: dict[tuple, tuple[float, float]] = {}

        def evaluate(rows: np.ndarray) -> np.ndarray:
            means, errs = _evaluate_members(p, ctrl, rows, bp, cfg, xi, workers)
            for row, mu, se in zip(rows, means, errs):
                table_map[tuple(map(float, row))] = (float(mu), float(se))
            return means

        best_vec, best_val = None, -np.inf
        for start in rng_starts:
            current = np.asarray(start, dtype=float).copy()
            cur_val = float(evaluate(current[None, :])[0])
            for _ in range(20):  # sweeps until stable
                improved = False
                for j in range(family.n_intervals):
                    cand = np.tile(current, (levels.size, 1))
                    cand[:, j] = levels
                    vals = evaluate(cand)
                    pick = _argmax_first(vals)
                    if vals[pick] > cur_val + 1e-15 or (
                        vals[pick] >= cur_val and levels[pick] < current[j]
                    ):
                        if current[j] != levels[pick]:
                            improved = True
                        current[j] = levels[pick]
                        cur_val = float(vals[pick])
                if not improved:
                    break
            if cur_val > best_val or (
                cur_val == best_val and best_vec is not None
                and tuple(current) < tuple(best_vec)
            ):
                best_vec, best_val = current.copy(), cur_val
        argmax = family.member(best_vec)
        table = [(vals, mu, se) for vals, (mu, se) in sorted(table_map.items())]
        means = np.array([best_val])
        best = 0

    # re-run the argmax member alone to expose its per-path samples
    samples = _accumulate(p, ctrl, argmax.values[None, :], bp, cfg, xi=xi)[0]
    stderr = float(_stderr(samples))
    table = [row + (VolatilityScenario(bp, np.asarray(row[0])).content_hash(),)
             for row in table]
    return RobustResult(
        value=float(means[best]),
        argmax_scenario=argmax,
        argmax_stderr=stderr,
        argmax_cost_samples=samples,
        table=table,
        method=method,
    )


# --------------------------------------------------------------------------
# Uncontrolled worst-case example with exact quadrature
# --------------------------------------------------------------------------

def example_objective(a: float, bounds: AmbiguityBounds, scenario: VolatilityScenario) -> float:
    """0.5 * int_0^T (a t - <B>(t)) gamma(t) dt for piecewise-constant gamma.

    With zero control the functional is deterministic; each interval
    contributes g * (a (t1^2 - t0^2)/2 - <B>(t0) dt - g dt^2 / 2) in closed
    form.  Requires a > sigma_bar_sq.
    """
    if a <= bounds.sigma_bar_sq:
        raise ValueError("need a > sigma_bar_sq")
    scenario.assert_within(bounds)
    bp, g = scenario.breakpoints, scenario.values
    return float(_objective_rows(a, g[None, :], bp)[0])


def _objective_rows(a: float, gammas: np.ndarray, bp: np.ndarray) -> np.ndarray:
    widths = np.diff(bp)
    qv_left = np.concatenate(
        [np.zeros((gammas.shape[0], 1)), np.cumsum(gammas * widths, axis=1)[:, :-1]], axis=1
    )
    per = gammas * (
        0.5 * a * (bp[1:] ** 2 - bp[:-1] ** 2)
        - qv_left * widths
        - 0.5 * gammas * widths ** 2
    )
    return 0.5 * per.sum(axis=1)


@dataclass(frozen=True, eq=False)
class ExampleWorstCase:
    t_star_numeric: float
    value: float
    argmax_scenario: VolatilityScenario
    switch_values: np.ndarray = field(default=None)   # objective per switch (single-switch only)


def example_worst_case(
    a: float,
    bounds: AmbiguityBounds,
    horizon: float,
    family: ScenarioFamily,
    enumeration_budget: int = 1 << 21,
) -> ExampleWorstCase:
    """Maximize ``example_objective`` over the family; return the switch time.

    Asserts the argmax is a single down-up switch (lowest rate first, then
    highest) and reports its location; degenerate all-low / all-high argmaxes
    map to t* = T and t* = 0.
    """
    if a <= bounds.sigma_bar_sq:
        raise ValueError("need a > sigma_bar_sq")
    if abs(family.horizon - horizon) > 1e-12 * max(1.0, horizon):
        raise ValueError("family horizon mismatch")
    count = family.member_count
    if count > enumeration_budget:
        raise BudgetExceededError(
            f"enumeration of {count} scenarios exceeds the budget of {enumeration_budget}"
        )
    bp = family.breakpoints
    best_val, best_row = -np.inf, None
    all_vals = []
    for start in range(0, count, _CHUNK):
        if family.restriction == "single-switch" or count <= _CHUNK:
            rows = family.gamma_matrix()[start:start + _CHUNK]
        else:
            rows = _gamma_rows_range(family, start, min(start + _CHUNK, count))
        vals = _objective_rows(a, rows, bp)
        all_vals.append(vals)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val, best_row = float(vals[i]), rows[i].copy()

    lo, hi = family.levels[0], family.levels[-1]
    row = best_row
    is_lo = np.isclose(row, lo)
    is_hi = np.isclose(row, hi)
    if not np.all(is_lo | is_hi):
        raise ScenarioShapeError("argmax uses interior levels; expected a bang-bang path")
    switched = np.flatnonzero(is_hi & ~is_lo)
    if switched.size:
        contiguous = bool(np.all(np.diff(switched) == 1))
        ends_at_last = switched[-1] == family.n_intervals - 1
        if not (contiguous and ends_at_last):
            raise ScenarioShapeError(
                "argmax is not a single down-up switch; refine the family"
            )
    s = switched[0] if switched.size else family.n_intervals
    t_star = float(bp[s])
    switch_vals = np.concatenate(all_vals) if family.restriction == "single-switch" else None
    return ExampleWorstCase(t_star, best_val, family.member(row), switch_vals)


def _gamma_rows_range(family: ScenarioFamily, start: int, stop: int) -> np.ndarray:
    levels = np.asarray(family.levels)
    base, n = levels.size, family.n_intervals
    idx = np.arange(start, stop)
    digits = np.empty((idx.size, n), dtype=int)
    for j in range(n - 1, -1, -1):
        digits[:, j] = idx % base
        idx = idx // base
    return levels[digits]
