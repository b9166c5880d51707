"""Numerical checks of first-order optimality for the robust LQ problem.

The reference distribution for all LQ checks is the constant scenario at
the upper variance rate; under it the costate pair has the closed form
p = P x + phi, q = P (C x + D u + sigma), with P and phi from the backward
solver, so no backward SDE is ever solved.  Checks:

  * ``hamiltonian_stationarity``     - the control gradient
        H_u = B~'p + D'q gamma + S x + R u
    vanishes along optimal trajectories; the returned max |H_u| is the
    measured residual (interpolation plus roundoff).
  * ``variational_inequality_check`` - the first-order cost expansion
        Theta(v) = <L x(T), xhat(T)> + int (f_x xhat + f_u (v - u)) dt
    is nonnegative in expectation at the optimum for every direction v,
    where xhat solves the sensitivity equation driven by the same noise.
  * ``gateaux_check``                - finite-difference quotients of the
    worst-case cost along a direction converge, decrease as the step
    shrinks (convexity), and extrapolate to the direct Theta estimate.
  * ``sufficient_condition_check``   - joint convexity of the running cost
    in (state, control) and of the terminal cost, via eigenvalue tests.

The cost integrand here has no sensitivity to the running value, so the
exponential weight on Theta is identically one; ``multiplier_path`` keeps
the general weight available for synthetic sensitivity paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import (
    DELTA_PD,
    FeedbackControl,
    LQProblem,
    VolatilityScenario,
    min_eig,
)
from .riccati import RiccatiSolution, optimal_feedback
from .robust import ScenarioFamily, robust_cost
from .simulate import PathBundle, SimConfig, _node_tables, _stderr, simulate


@dataclass(frozen=True, eq=False)
class HamiltonianEval:
    """H, H_x, H_u sampled along one trajectory under a named scenario."""

    times: np.ndarray
    H: np.ndarray        # (k,)
    H_x: np.ndarray      # (k, n)
    H_u: np.ndarray      # (k, m)
    scenario_label: str


@dataclass(frozen=True, eq=False)
class DirectionEstimate:
    label: str
    mean: float
    stderr: float


@dataclass(frozen=True, eq=False)
class VariationalResult:
    estimates: list[DirectionEstimate]

    @property
    def min_estimate(self) -> float:
        return min(e.mean for e in self.estimates)

    @property
    def min_stderr(self) -> float:
        worst = min(self.estimates, key=lambda e: e.mean)
        return worst.stderr


@dataclass(frozen=True, eq=False)
class VariationalReport:
    """Finite-difference probe of the worst-case cost along one direction."""

    direction_label: str
    rhos: np.ndarray
    quotients: np.ndarray
    quotient_stderrs: np.ndarray
    limit_estimate: float
    theta_estimate: float
    theta_stderr: float
    multiplier_note: str = "weight m == 1 (cost integrand has no running-value sensitivity)"


def _adjoint_on_bundle(p: LQProblem, ric: RiccatiSolution, bundle: PathBundle):
    """p and q arrays (paths, nodes, n) reconstructed from the closed form."""
    times = bundle.times
    Ps = ric.P_at(times)
    phis = ric.phi_at(times)
    tab = _node_tables(p, optimal_feedback(p, ric), times)
    x, u = bundle.x, bundle.u
    k = times.size
    v = np.empty_like(x)
    for j in range(k):
        v[:, j] = x[:, j] @ tab["C"][j].T + u[:, j] @ tab["D"][j].T + tab["sigma"][j]
    p_adj = np.einsum("jnk,pjk->pjn", Ps, x) + phis[None, :, :]
    q_adj = np.einsum("jnk,pjk->pjn", Ps, v)
    return p_adj, q_adj


def hamiltonian_stationarity(
    p: LQProblem,
    ric: RiccatiSolution,
    cfg: SimConfig,
    ctrl: FeedbackControl | None = None,
) -> float:
    """max |H_u| over nodes, paths and components under the upper-rate scenario.

    ``ctrl`` defaults to the synthesized feedback, for which the residual is
    pure discretization noise; a perturbed control gives a residual bounded
    away from zero.
    """
    scenario = VolatilityScenario.constant(p.bounds.sigma_bar_sq, p.horizon)
    if ctrl is None:
        ctrl = optimal_feedback(p, ric)
    bundle = simulate(p, ctrl, scenario, cfg)
    hu = _control_gradient(p, ric, bundle)
    return float(np.max(np.abs(hu)))


def _control_gradient(p: LQProblem, ric: RiccatiSolution, bundle: PathBundle) -> np.ndarray:
    """H_u = B~'p + D'q gamma + S x + R u, shape (paths, nodes, m)."""
    times = bundle.times
    gamma_nodes = bundle.scenario.value_at(times)
    Ps = ric.P_at(times)
    phis = ric.phi_at(times)
    tab = {name: getattr(p, name).at_many(times)
           for name in ("B_tilde", "C", "D", "sigma", "S", "R")}
    x, u = bundle.x, bundle.u
    k = times.size
    hu = np.empty_like(u)
    for j in range(k):
        v = x[:, j] @ tab["C"][j].T + u[:, j] @ tab["D"][j].T + tab["sigma"][j]
        p_adj = x[:, j] @ Ps[j].T + phis[j]
        q_adj = v @ Ps[j].T
        hu[:, j] = (p_adj @ tab["B_tilde"][j]
                    + gamma_nodes[j] * (q_adj @ tab["D"][j])
                    + x[:, j] @ tab["S"][j].T
                    + u[:, j] @ tab["R"][j].T)
    return hu


def hamiltonian_along(
    p: LQProblem,
    ric: RiccatiSolution,
    bundle: PathBundle,
    path: int = 0,
) -> HamiltonianEval:
    """Full Hamiltonian data along one simulated path."""
    times = bundle.times
    gamma_nodes = bundle.scenario.value_at(times)
    Ps = ric.P_at(times)
    phis = ric.phi_at(times)
    tab = {name: getattr(p, name).at_many(times)
           for name in ("A", "B_tilde", "C", "D", "b", "sigma", "Q", "S", "R")}
    x, u = bundle.x[path], bundle.u[path]
    k = times.size
    H = np.empty(k)
    Hx = np.empty((k, p.n))
    Hu = np.empty((k, p.m))
    for j in range(k):
        v = tab["C"][j] @ x[j] + tab["D"][j] @ u[j] + tab["sigma"][j]
        drift = tab["A"][j] @ x[j] + tab["B_tilde"][j] @ u[j] + tab["b"][j]
        p_adj = Ps[j] @ x[j] + phis[j]
        q_adj = Ps[j] @ v
        run = 0.5 * (x[j] @ tab["Q"][j] @ x[j]
                     + 2.0 * (u[j] @ tab["S"][j] @ x[j])
                     + u[j] @ tab["R"][j] @ u[j])
        H[j] = p_adj @ drift + gamma_nodes[j] * (q_adj @ v) + run
        Hx[j] = (tab["A"][j].T @ p_adj + gamma_nodes[j] * (tab["C"][j].T @ q_adj)
                 + tab["Q"][j] @ x[j] + tab["S"][j].T @ u[j])
        Hu[j] = (tab["B_tilde"][j].T @ p_adj + gamma_nodes[j] * (tab["D"][j].T @ q_adj)
                 + tab["S"][j] @ x[j] + tab["R"][j] @ u[j])
    label = f"constant gamma={gamma_nodes[0]:g}" if np.all(gamma_nodes == gamma_nodes[0]) \
        else f"scenario {bundle.scenario.content_hash()}"
    return HamiltonianEval(times, H, Hx, Hu, label)


def _direction_paths(v, times: np.ndarray, m: int, bundle: PathBundle) -> np.ndarray:
    """Sample a direction onto (paths, nodes, m).

    Accepts a scalar, an (m,) vector, a (k, m) array, a callable t -> (m,),
    or a FeedbackControl whose realized value along the bundle's own paths
    is used (so v = the current control gives a zero perturbation)."""
    k = times.size
    n_paths = bundle.x.shape[0]
    if isinstance(v, FeedbackControl):
        gains, offs = v.sampled_on(times)
        out = np.empty((n_paths, k, m))
        for j in range(k):
            out[:, j] = -bundle.x[:, j] @ gains[j].T - offs[j]
        return out
    if callable(v):
        arr = np.stack([np.broadcast_to(np.asarray(v(float(t)), dtype=float), (m,)) for t in times])
    else:
        arr = np.asarray(v, dtype=float)
        if arr.ndim == 0:
            arr = np.full((k, m), float(arr))
        elif arr.shape == (m,):
            arr = np.tile(arr, (k, 1))
        elif arr.shape != (k, m):
            raise ValueError(f"direction must broadcast to {(k, m)}, got {arr.shape}")
    return np.broadcast_to(arr, (n_paths, k, m))


def _theta_samples(
    p: LQProblem,
    bundle: PathBundle,
    w: np.ndarray,
) -> np.ndarray:
    """Per-path first-order cost expansion along direction paths ``w``.

    ``w`` has shape (paths, nodes, m) and is the control displacement whose
    effect is expanded to first order.  The sensitivity xhat is integrated
    with the exact same increments as the bundle's state, so the pairing is
    pathwise."""
    times = bundle.times
    k = times.size
    dt = float(times[1] - times[0])
    tab = {name: getattr(p, name).at_many(times)
           for name in ("A", "B_tilde", "C", "D", "Q", "S", "R")}
    x, u = bundle.x, bundle.u
    n_paths = x.shape[0]
    xhat = np.zeros((n_paths, p.n))
    integrand_prev = _theta_integrand(tab, x, u, w, xhat, 0)
    total = np.zeros(n_paths)
    for j in range(k - 1):
        drift = xhat @ tab["A"][j].T + w[:, j] @ tab["B_tilde"][j].T
        diff = xhat @ tab["C"][j].T + w[:, j] @ tab["D"][j].T
        xhat = xhat + drift * dt + diff * bundle.d_b[:, j, None]
        integrand_new = _theta_integrand(tab, x, u, w, xhat, j + 1)
        total += 0.5 * (integrand_prev + integrand_new) * dt
        integrand_prev = integrand_new
    total += np.einsum("pi,ij,pj->p", x[:, -1], p.L, xhat)
    return total


def _theta_integrand(tab, x, u, w, xhat, j):
    fx = x[:, j] @ tab["Q"][j].T + u[:, j] @ tab["S"][j]       # f_x row vector
    fu = x[:, j] @ tab["S"][j].T + u[:, j] @ tab["R"][j].T     # f_u row vector
    return np.einsum("pn,pn->p", fx, xhat) + np.einsum("pm,pm->p", fu, w[:, j])


def variational_inequality_check(
    p: LQProblem,
    ric: RiccatiSolution,
    directions: list,
    cfg: SimConfig,
    ctrl: FeedbackControl | None = None,
    scenario: VolatilityScenario | None = None,
) -> VariationalResult:
    """Estimate E[Theta(v)] for each direction under the reference scenario.

    At the synthesized optimum every estimate should clear -3 stderr; a
    perturbed control with a direction pointing back toward the optimum
    produces a significantly negative estimate."""
    if scenario is None:
        scenario = VolatilityScenario.constant(p.bounds.sigma_bar_sq, p.horizon)
    if ctrl is None:
        ctrl = optimal_feedback(p, ric)
    bundle = simulate(p, ctrl, scenario, cfg)
    out = []
    for i, v in enumerate(directions):
        # convex perturbation toward v: displacement is v - current control
        w = _direction_paths(v, bundle.times, p.m, bundle) - bundle.u
        samples = _theta_samples(p, bundle, w)
        out.append(DirectionEstimate(f"direction {i}", float(samples.mean()), float(_stderr(samples))))
    return VariationalResult(out)


def gateaux_check(
    p: LQProblem,
    ctrl: FeedbackControl,
    direction,
    rho_ladder,
    family: ScenarioFamily,
    cfg: SimConfig,
    workers: int | None = None,
) -> VariationalReport:
    """Finite-difference derivative of the worst-case cost along a direction.

    Evaluates the worst case of ctrl + rho * v for each rho with common
    random numbers, forms the quotients (J_rho - J_0) / rho, extrapolates
    the last two linearly to rho = 0, and compares against the direct Theta
    estimate computed under the base control's own worst-case scenario.
    """
    rhos = np.asarray(list(rho_ladder), dtype=float)
    if rhos.size < 1 or np.any(rhos <= 0) or np.any(np.diff(rhos) >= 0):
        raise ValueError("rho ladder must be positive and strictly decreasing")
    base = robust_cost(p, ctrl, family, cfg, workers=workers)
    v_on_ctrl = _sample_direction_grid(direction, ctrl.times, p.m)

    quotients = np.empty(rhos.size)
    q_err = np.empty(rhos.size)
    for i, rho in enumerate(rhos):
        shifted = ctrl.with_offset_shift(rho * v_on_ctrl)
        res = robust_cost(p, shifted, family, cfg, workers=workers)
        quotients[i] = (res.value - base.value) / rho
        paired = (res.argmax_cost_samples - base.argmax_cost_samples) / rho
        q_err[i] = float(_stderr(paired))
    if rhos.size >= 2:
        r0, r1 = rhos[-2], rhos[-1]
        limit = float((r0 * quotients[-1] - r1 * quotients[-2]) / (r0 - r1))
    else:
        limit = float(quotients[-1])

    scenario = base.argmax_scenario
    bundle = simulate(p, ctrl, scenario, cfg)
    # additive perturbation u + rho v: the displacement is v itself
    w = np.broadcast_to(_sample_direction_grid(direction, bundle.times, p.m),
                        bundle.u.shape)
    theta = _theta_samples(p, bundle, w)
    label = getattr(direction, "__name__", None) or "direction"
    return VariationalReport(
        direction_label=label,
        rhos=rhos,
        quotients=quotients,
        quotient_stderrs=q_err,
        limit_estimate=limit,
        theta_estimate=float(theta.mean()),
        theta_stderr=float(_stderr(theta)),
    )


def _sample_direction_grid(v, times: np.ndarray, m: int) -> np.ndarray:
    """Direction sampled as a deterministic (k, m) open-loop path."""
    if isinstance(v, FeedbackControl):
        raise ValueError("finite-difference directions must be open loop")
    k = times.size
    if callable(v):
        return np.stack([np.broadcast_to(np.asarray(v(float(t)), dtype=float), (m,)) for t in times])
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        return np.full((k, m), float(arr))
    if arr.shape == (m,):
        return np.tile(arr, (k, 1))
    if arr.shape == (k, m):
        return arr
    raise ValueError(f"direction must broadcast to {(k, m)}, got {arr.shape}")


@dataclass(frozen=True)
class ConditionCheck:
    name: str
    time: float
    min_eigenvalue: float
    passed: bool


@dataclass(frozen=True, eq=False)
class SufficiencyReport:
    checks: list[ConditionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def sufficient_condition_check(p: LQProblem, delta_pd: float = DELTA_PD) -> SufficiencyReport:
    """Convexity premises for optimality of a stationary control.

    The running cost is jointly convex in (x, u) iff the block matrix
    [[Q, S'], [S, R]] is positive semidefinite; the terminal cost is convex
    iff L >= 0.  Checked at every coefficient breakpoint."""
    checks = []
    for t in p.coefficient_breakpoints():
        t = float(t)
        if t >= p.horizon:
            continue
        Q, S, R = p.Q.at(t), p.S.at(t), p.R.at(t)
        block = np.block([[Q, S.T], [S, R]])
        me = min_eig(block)
        checks.append(ConditionCheck("running cost convex in (x, u)", t, me, me >= -delta_pd))
    me_l = min_eig(p.L)
    checks.append(ConditionCheck("terminal cost convex", p.horizon, me_l, me_l >= -delta_pd))
    return SufficiencyReport(checks)


def multiplier_path(times: np.ndarray, f_y: np.ndarray) -> np.ndarray:
    """General exponential weight exp(int_0^t f_y ds) on a time grid.

    The LQ cost has f_y == 0 so the weight is identically one there; this
    exists for exercising the general formula with synthetic sensitivity
    paths."""
    times = np.asarray(times, dtype=float)
    f_y = np.broadcast_to(np.asarray(f_y, dtype=float), times.shape)
    mid = 0.5 * (f_y[:-1] + f_y[1:]) * np.diff(times)
    return np.exp(np.concatenate([[0.0], np.cumsum(mid)]))
