"""Forward Monte Carlo for the controlled state equation under one scenario.

Euler-Maruyama with increments dB = sqrt(gamma(t) dt) * xi, where the
standard normals xi come from a counter-based generator (Philox) keyed by
(seed, path index), so results are bit-reproducible for a fixed ``SimConfig``
no matter how work is split across workers.  Stochastic integrals use
left-point quadrature (Ito convention); time integrals use the trapezoid
rule.

Two engines share the coefficient plumbing:

  * ``simulate``      - stores full per-path state/control arrays, used by
                        the verification routines;
  * ``_accumulate``   - streams over steps keeping only cost and residual
                        accumulators, batched over an extra scenario axis.
                        This is what makes exhaustive scenario enumeration
                        with common random numbers affordable.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError
from .gheat import g_scalar
from .problem import FeedbackControl, LQProblem, VolatilityScenario
from .riccati import RiccatiSolution, optimal_feedback


@dataclass(frozen=True)
class SimConfig:
    n_paths: int
    dt_sim: float
    seed: int
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be positive")


def brownian_increments(seed: int, n_paths: int, n_steps: int, antithetic: bool = False) -> np.ndarray:
    """Standard normals (n_paths, n_steps) from per-path Philox streams.

    Path i draws from the counter-based stream keyed (seed, i), so adding
    paths or splitting them across workers never changes existing draws;
    with ``antithetic`` the odd path 2j+1 mirrors the even path 2j.
    """
    seed64 = int(seed) & 0xFFFFFFFFFFFFFFFF
    xi = np.empty((n_paths, n_steps))
    for i in range(n_paths):
        if antithetic and i % 2 == 1:
            xi[i] = -xi[i - 1]
            continue
        stream = i // 2 if antithetic else i
        bits = np.random.Philox(key=(seed64 << 64) + stream)
        xi[i] = np.random.Generator(bits).standard_normal(n_steps)
    return xi


def _sim_times(horizon: float, cfg: SimConfig, scenario: VolatilityScenario) -> np.ndarray:
    n_steps = int(round(horizon / cfg.dt_sim))
    tol = 1e-9 * max(1.0, horizon)
    if n_steps < 1 or abs(n_steps * cfg.dt_sim - horizon) > tol:
        raise AlignmentError(f"dt_sim={cfg.dt_sim} does not divide the horizon {horizon}")
    for bp in scenario.breakpoints:
        if abs(round(bp / cfg.dt_sim) * cfg.dt_sim - bp) > tol:
            raise AlignmentError(f"dt_sim={cfg.dt_sim} does not divide the scenario interval ending at {bp}")
    return np.linspace(0.0, horizon, n_steps + 1)


def _node_tables(p: LQProblem, ctrl: FeedbackControl, times: np.ndarray):
    """Coefficients, gains and offsets sampled on the node grid."""
    tab = {name: getattr(p, name).at_many(times)
           for name in ("A", "B_tilde", "C", "D", "b", "sigma", "Q", "S", "R")}
    tab["K"], tab["k"] = ctrl.sampled_on(times)
    return tab


def _running_cost(x, u, Q, S, R):
    """0.5 (x'Qx + 2 u'Sx + u'Ru) for stacked states x (..., n), u (..., m)."""
    qx = ((x @ Q.T) * x).sum(axis=-1)
    sx = ((x @ S.T) * u).sum(axis=-1)
    ru = ((u @ R.T) * u).sum(axis=-1)
    return 0.5 * (qx + 2.0 * sx + ru)


def _stderr(samples: np.ndarray, axis=-1) -> np.ndarray:
    n = samples.shape[axis]
    if n < 2:
        return np.zeros(samples.mean(axis=axis).shape)
    return samples.std(axis=axis, ddof=1) / np.sqrt(n)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Sampled trajectories plus cost and residual statistics for one scenario."""

    times: np.ndarray            # (k,)
    x: np.ndarray                # (n_paths, k, n)
    u: np.ndarray                # (n_paths, k, m)
    xi: np.ndarray               # (n_paths, k-1) raw standard normals
    d_b: np.ndarray              # (n_paths, k-1) Brownian increments
    gamma_steps: np.ndarray      # (k-1,) variance rate per step (left value)
    cost_samples: np.ndarray     # (n_paths,)
    cost_mean: float
    cost_stderr: float
    kbar_samples: np.ndarray | None  # (n_paths,) or None when no Riccati data given
    scenario: VolatilityScenario
    cfg: SimConfig


def simulate(
    p: LQProblem,
    ctrl: FeedbackControl,
    scenario: VolatilityScenario,
    cfg: SimConfig,
    ric: RiccatiSolution | None = None,
    increments: np.ndarray | None = None,
) -> PathBundle:
    """Euler-Maruyama paths of dx = (Ax + B~u + b) dt + (Cx + Du + sigma) dB.

    The feedback is evaluated through its interpolated gain at the left node.
    Passing ``increments`` overrides the generator (used by coupled-refinement
    convergence tests); shape must be (n_paths, n_steps).
    """
    scenario.assert_within(p.bounds)
    times = _sim_times(p.horizon, cfg, scenario)
    n_steps = times.size - 1
    dt = cfg.dt_sim
    tab = _node_tables(p, ctrl, times)
    gamma_steps = scenario.value_at(times[:-1])

    if increments is None:
        xi = brownian_increments(cfg.seed, cfg.n_paths, n_steps, cfg.antithetic)
    else:
        xi = np.asarray(increments, dtype=float)
        if xi.shape != (cfg.n_paths, n_steps):
            raise ValueError(f"increments must have shape {(cfg.n_paths, n_steps)}")
    d_b = np.sqrt(gamma_steps * dt)[None, :] * xi

    n, m = p.n, p.m
    x = np.empty((cfg.n_paths, n_steps + 1, n))
    u = np.empty((cfg.n_paths, n_steps + 1, m))
    x[:, 0] = p.x0
    for j in range(n_steps):
        xj = x[:, j]
        uj = -xj @ tab["K"][j].T - tab["k"][j]
        u[:, j] = uj
        drift = xj @ tab["A"][j].T + uj @ tab["B_tilde"][j].T + tab["b"][j]
        diff = xj @ tab["C"][j].T + uj @ tab["D"][j].T + tab["sigma"][j]
        x[:, j + 1] = xj + drift * dt + diff * d_b[:, j, None]
    u[:, n_steps] = -x[:, n_steps] @ tab["K"][n_steps].T - tab["k"][n_steps]

    run = np.empty((cfg.n_paths, n_steps + 1))
    for j in range(n_steps + 1):
        run[:, j] = _running_cost(x[:, j], u[:, j], tab["Q"][j], tab["S"][j], tab["R"][j])
    cost = np.trapezoid(run, dx=dt, axis=1)
    cost += 0.5 * np.einsum("pi,ij,pj->p", x[:, -1], p.L, x[:, -1])

    kbar = None
    if ric is not None:
        Ps = ric.P_at(times)
        v = np.empty((cfg.n_paths, n_steps + 1, n))
        for j in range(n_steps + 1):
            v[:, j] = x[:, j] @ tab["C"][j].T + u[:, j] @ tab["D"][j].T + tab["sigma"][j]
        w = np.einsum("pjn,jnk,pjk->pj", v, Ps, v)  # <P v, v> per node
        weight = gamma_steps - p.bounds.sigma_bar_sq  # <= 0 within the band
        kbar = 0.5 * np.sum(0.5 * (w[:, :-1] + w[:, 1:]) * weight[None, :] * dt, axis=1)

    mean = float(cost.mean())
    if cfg.antithetic and cfg.n_paths % 2 == 0:
        stderr = float(_stderr(cost.reshape(-1, 2).mean(axis=1)))
    else:
        stderr = float(_stderr(cost))
    return PathBundle(times, x, u, xi, d_b, np.asarray(gamma_steps, dtype=float),
                      cost, mean, stderr, kbar, scenario, cfg)


def _accumulate(
    p: LQProblem,
    ctrl: FeedbackControl,
    gammas: np.ndarray,       # (S, N) variance rate per scenario and interval
    breakpoints: np.ndarray,  # (N+1,) shared interval edges
    cfg: SimConfig,
    xi: np.ndarray | None = None,
) -> np.ndarray:
    """Per-scenario, per-path costs (S, n_paths) without storing paths.

    All scenarios share the Brownian draws (common random numbers); the state
    carries an extra leading scenario axis.
    """
    horizon = float(breakpoints[-1])
    scen0 = VolatilityScenario(breakpoints, gammas[0])
    times = _sim_times(horizon, cfg, scen0)
    n_steps = times.size - 1
    dt = cfg.dt_sim
    tab = _node_tables(p, ctrl, times)
    # map each step's left node into its scenario interval
    step_interval = np.clip(
        np.searchsorted(breakpoints, times[:-1], side="right") - 1, 0, gammas.shape[1] - 1
    )
    gamma_steps = gammas[:, step_interval]  # (S, n_steps)
    if xi is None:
        xi = brownian_increments(cfg.seed, cfg.n_paths, n_steps, cfg.antithetic)
    sqrt_gdt = np.sqrt(gamma_steps * dt)

    S = gammas.shape[0]
    n, m = p.n, p.m
    # fused per-node operators: one matmul yields [drift; diffusion], one
    # block quadratic yields the running cost of the stacked (x, u)
    k = n_steps + 1
    move_x = np.concatenate([tab["A"], tab["C"]], axis=1)          # (k, 2n, n)
    move_u = np.concatenate([tab["B_tilde"], tab["D"]], axis=1)    # (k, 2n, m)
    move_c = np.concatenate([tab["b"], tab["sigma"]], axis=1)      # (k, 2n)
    cost_w = np.empty((k, n + m, n + m))
    cost_w[:, :n, :n] = tab["Q"]
    cost_w[:, :n, n:] = np.transpose(tab["S"], (0, 2, 1))
    cost_w[:, n:, :n] = tab["S"]
    cost_w[:, n:, n:] = tab["R"]

    x = np.broadcast_to(p.x0, (S, cfg.n_paths, n)).copy()
    z = np.empty((S, cfg.n_paths, n + m))

    def node_cost(j):
        z[..., :n] = x
        z[..., n:] = -x @ tab["K"][j].T - tab["k"][j]
        return 0.5 * ((z @ cost_w[j].T) * z).sum(axis=-1)

    run_prev = node_cost(0)
    total = np.zeros((S, cfg.n_paths))
    for j in range(n_steps):
        zz = x @ move_x[j].T
        zz += z[..., n:] @ move_u[j].T
        zz += move_c[j]
        db = sqrt_gdt[:, None, j, None] * xi[None, :, j, None]
        x += zz[..., :n] * dt
        x += zz[..., n:] * db
        run_new = node_cost(j + 1)
        total += (0.5 * dt) * (run_prev + run_new)
        run_prev = run_new
    total += 0.5 * (((x @ p.L.T) * x).sum(axis=-1))
    return total


def cost_under_scenario(
    p: LQProblem,
    ctrl: FeedbackControl,
    scenario: VolatilityScenario,
    cfg: SimConfig,
) -> tuple[float, float]:
    """Monte Carlo estimate (mean, stderr) of the quadratic cost under one
    scenario: trapezoid in time along each path plus the terminal term."""
    scenario.assert_within(p.bounds)
    costs = _accumulate(p, ctrl, scenario.values[None, :], scenario.breakpoints, cfg)[0]
    if cfg.antithetic and cfg.n_paths % 2 == 0:
        return float(costs.mean()), float(_stderr(costs.reshape(-1, 2).mean(axis=1)))
    return float(costs.mean()), float(_stderr(costs))


def k_residual(
    p: LQProblem,
    ctrl: FeedbackControl,
    scenario: VolatilityScenario,
    ric: RiccatiSolution,
    cfg: SimConfig,
) -> tuple[float, float, float]:
    """Residual (mean, stderr, max over paths) of the martingale defect

        0.5 * int <P v, v> d(accumulated variance - sigma_bar_sq * s),

    v = C x + D u + sigma.  Identically zero when gamma == sigma_bar_sq;
    nonpositive per path otherwise, since the integrand is nonnegative and
    the integrator's density gamma - sigma_bar_sq is nonpositive."""
    bundle = simulate(p, ctrl, scenario, cfg, ric=ric)
    kbar = bundle.kbar_samples
    return float(kbar.mean()), float(_stderr(kbar)), float(kbar.max())


def write_paths_csv(bundle: PathBundle, path, max_paths: int | None = None) -> None:
    """Per-path dump (path id, t, x components, u components)."""
    n = bundle.x.shape[2]
    m = bundle.u.shape[2]
    count = bundle.x.shape[0] if max_paths is None else min(max_paths, bundle.x.shape[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "t"] + [f"x_{i}" for i in range(n)] + [f"u_{i}" for i in range(m)])
        for pid in range(count):
            for j, t in enumerate(bundle.times):
                row = [pid, repr(float(t))]
                row += [repr(float(v)) for v in bundle.x[pid, j]]
                row += [repr(float(v)) for v in bundle.u[pid, j]]
                w.writerow(row)


def summary_record(bundle: PathBundle) -> dict:
    """JSON-ready summary of one simulation run."""
    return {
        "mean": bundle.cost_mean,
        "stderr": bundle.cost_stderr,
        "n_paths": bundle.cfg.n_paths,
        "seed": bundle.cfg.seed,
        "dt_sim": bundle.cfg.dt_sim,
        "antithetic": bundle.cfg.antithetic,
        "scenario_hash": bundle.scenario.content_hash(),
    }


def verify_value_process(
    p: LQProblem,
    ric: RiccatiSolution,
    scenario: VolatilityScenario,
    cfg: SimConfig,
    n_check_times: int = 33,
    increments: np.ndarray | None = None,
) -> float:
    """Pathwise check of the candidate value process.

    Along each simulated path under the synthesized feedback, compares
    Y(t) = <P x, x>/2 + <phi, x> + l against the terminal cost plus
    remaining running cost minus the stochastic integral of
    Z = <P x + phi, C x + D u + sigma> minus the remaining decrease of

        K(t) = int_0^t <P v, v>/2 d(accumulated variance)
               - int_0^t g(<P v, v>) ds,

    returning the maximum absolute discrepancy over paths and sampled
    times.  Expected O(sqrt(dt_sim)) from the left-point stochastic
    integral; exactly zero at t = T by the terminal conditions."""
    ctrl = optimal_feedback(p, ric)
    bundle = simulate(p, ctrl, scenario, cfg, increments=increments)
    times = bundle.times
    k = times.size
    dt = cfg.dt_sim

    Ps = ric.P_at(times)
    phis = ric.phi_at(times)
    ls = ric.l_at(times)
    tab = _node_tables(p, ctrl, times)

    x, u = bundle.x, bundle.u
    v = np.empty_like(x)
    for j in range(k):
        v[:, j] = x[:, j] @ tab["C"][j].T + u[:, j] @ tab["D"][j].T + tab["sigma"][j]
    w = np.einsum("pjn,jnk,pjk->pj", v, Ps, v)
    px_phi = np.einsum("jnk,pjk->pjn", Ps, x) + phis[None, :, :]
    z = np.einsum("pjn,pjn->pj", px_phi, v)
    lhs = 0.5 * np.einsum("pjn,pjn->pj", np.einsum("jnk,pjk->pjn", Ps, x), x) \
        + np.einsum("jn,pjn->pj", phis, x) + ls[None, :]

    run = np.empty((cfg.n_paths, k))
    for j in range(k):
        run[:, j] = _running_cost(x[:, j], u[:, j], tab["Q"][j], tab["S"][j], tab["R"][j])
    run_cum = np.concatenate(
        [np.zeros((cfg.n_paths, 1)), np.cumsum(0.5 * (run[:, :-1] + run[:, 1:]) * dt, axis=1)], axis=1
    )
    stoch_cum = np.concatenate(
        [np.zeros((cfg.n_paths, 1)), np.cumsum(z[:, :-1] * bundle.d_b, axis=1)], axis=1
    )
    dk = 0.5 * w[:, :-1] * bundle.gamma_steps[None, :] * dt - g_scalar(w[:, :-1], p.bounds) * dt
    k_cum = np.concatenate([np.zeros((cfg.n_paths, 1)), np.cumsum(dk, axis=1)], axis=1)

    terminal = 0.5 * np.einsum("pi,ij,pj->p", x[:, -1], p.L, x[:, -1])
    rhs = terminal[:, None] + (run_cum[:, -1:] - run_cum) - (stoch_cum[:, -1:] - stoch_cum) \
        - (k_cum[:, -1:] - k_cum)

    check = np.unique(np.linspace(0, k - 1, min(n_check_times, k)).astype(int))
    return float(np.max(np.abs(lhs[:, check] - rhs[:, check])))
