"""Backward solver for the feedback synthesis system of the robust LQ problem.

For a fixed deterministic variance-rate path gamma the candidate optimal
control is affine feedback built from three backward equations solved here
on a common grid:

    P:    dP/dt + P A + A'P + gamma C'P C + Q - M' Lam^-1 M = 0,  P(T) = L,
    phi:  dphi/dt + (A - B~ Lam^-1 M)' phi
             + (C - D Lam^-1 M)' P sigma gamma + P b = 0,          phi(T) = 0,
    l:    dl/dt + <phi, b> + gamma <P sigma, sigma> / 2
             - r' Lam^-1 r / 2 = 0,                                l(T) = 0,

with Lam = R + gamma D'P D, M = B~'P + S + gamma D'P C and
r = B~'phi + gamma D'P sigma.  The value of the controlled problem started
at x is then <P(0) x, x>/2 + <phi(0), x> + l(0).

The three equations form a triangular system (P feeds phi feeds l), so a
single classical fourth-order Runge-Kutta pass integrates all of them
backward at once; scenario and coefficient breakpoints are inserted into
the step grid so every right-hand side is smooth within a step.  P is
re-symmetrized after each step to kill numerical drift.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import AdjointMismatchError, PositivityLossError, SingularGainError
from .problem import (
    DELTA_PD,
    AmbiguityBounds,
    FeedbackControl,
    LQProblem,
    VolatilityScenario,
    min_eig,
)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Gridded P(t), phi(t), l(t) plus the scenario they were solved under."""

    times: np.ndarray          # (k,), ascending, 0 .. T
    P: np.ndarray              # (k, n, n), symmetric
    phi: np.ndarray            # (k, n)
    l: np.ndarray              # (k,)
    gamma_used: VolatilityScenario
    problem: LQProblem

    def P_at(self, ts) -> np.ndarray:
        """Linear interpolation of P onto ts (scalar or array)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        n = self.P.shape[1]
        out = np.empty((ts.size, n, n))
        for i in range(n):
            for j in range(n):
                out[:, i, j] = np.interp(ts, self.times, self.P[:, i, j])
        return out

    def phi_at(self, ts) -> np.ndarray:
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        n = self.phi.shape[1]
        out = np.empty((ts.size, n))
        for i in range(n):
            out[:, i] = np.interp(ts, self.times, self.phi[:, i])
        return out

    def l_at(self, ts) -> np.ndarray:
        return np.interp(np.atleast_1d(np.asarray(ts, dtype=float)), self.times, self.l)

    def value_at_initial(self, x=None) -> float:
        """Predicted optimal cost <P(0)x, x>/2 + <phi(0), x> + l(0)."""
        x = self.problem.x0 if x is None else np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P[0] @ x + self.phi[0] @ x + self.l[0])


@dataclass(frozen=True, eq=False)
class AdjointPath:
    """Costate pair along one trajectory; the orthogonal-martingale part is
    identically zero for this construction and kept only as a marker."""

    times: np.ndarray
    p: np.ndarray               # (k, n)
    q: np.ndarray               # (k, n)
    orthogonal_component: None = None


def _ode_grid(p: LQProblem, scenario: VolatilityScenario, n_steps: int) -> np.ndarray:
    base = np.linspace(0.0, p.horizon, n_steps + 1)
    extra = np.concatenate([scenario.breakpoints, p.coefficient_breakpoints()])
    merged = np.unique(np.concatenate([base, extra]))
    merged = merged[(merged >= 0.0) & (merged <= p.horizon)]
    # drop near-duplicates introduced by float unions
    keep = np.concatenate([[True], np.diff(merged) > 1e-12 * max(1.0, p.horizon)])
    return merged[keep]


def _rhs(P, phi, l, A, Bt, C, D, bvec, sig, Q, S, R, gamma):
    lam = R + gamma * (D.T @ P @ D)
    M = Bt.T @ P + S + gamma * (D.T @ P @ C)
    Ps = P @ sig
    r = Bt.T @ phi + gamma * (D.T @ Ps)
    if lam.shape == (1, 1):  # avoid LAPACK overhead on scalar gains
        lam_inv_M = M / lam[0, 0]
        lam_inv_r = r / lam[0, 0]
    else:
        lam_inv_M = np.linalg.solve(lam, M)
        lam_inv_r = np.linalg.solve(lam, r)
    dP = -(P @ A + A.T @ P + gamma * (C.T @ P @ C) + Q - M.T @ lam_inv_M)
    dphi = -((A - Bt @ lam_inv_M).T @ phi + gamma * ((C - D @ lam_inv_M).T @ Ps) + P @ bvec)
    dl = -(phi @ bvec + 0.5 * gamma * (sig @ Ps) - 0.5 * (r @ lam_inv_r))
    return dP, dphi, dl


def solve_riccati(
    p: LQProblem,
    scenario: VolatilityScenario,
    n_steps: int = 2000,
    delta_pd: float = DELTA_PD,
    scalar_fast_path: bool = True,
) -> RiccatiSolution:
    """Integrate (P, phi, l) backward from (L, 0, 0) under ``scenario``.

    Fixed-step RK4 on the union of the uniform grid, scenario breakpoints
    and coefficient breakpoints.  Raises ``SingularGainError`` when the gain
    denominator loses definiteness and ``PositivityLossError`` when P picks
    up a genuinely negative eigenvalue (below -delta_pd) or blows up.

    Scalar problems (n = m = 1) take a plain-float stepping path with the
    same grid and checks; array dispatch overhead would otherwise dominate
    the solve.
    """
    scenario.assert_within(p.bounds)
    if abs(scenario.horizon - p.horizon) > 1e-9 * max(1.0, p.horizon):
        raise ValueError("scenario horizon differs from problem horizon")
    if scalar_fast_path and p.n == 1 and p.m == 1:
        return _solve_riccati_scalar(p, scenario, n_steps, delta_pd)
    times = _ode_grid(p, scenario, n_steps)
    k = times.size
    n = p.n
    P = np.empty((k, n, n))
    phi = np.empty((k, n))
    l = np.empty(k)
    P[-1] = 0.5 * (p.L + p.L.T)
    phi[-1] = 0.0
    l[-1] = 0.0

    # coefficients are constant within each step; snapshot all steps up front
    mids = 0.5 * (times[:-1] + times[1:])
    step = {name: getattr(p, name).at_many(mids)
            for name in ("A", "B_tilde", "C", "D", "b", "sigma", "Q", "S", "R")}
    gamma_mid = scenario.value_at(mids)
    # node-time tables for the definiteness checks (clamped at t = T)
    D_node = p.D.at_many(times)
    R_node = p.R.at_many(times)
    gamma_node = scenario.value_at(times)

    def checks(Pk, idx):
        t = float(times[idx])
        if not np.all(np.isfinite(Pk)):
            raise PositivityLossError(f"P blew up at t={t:.6g}", t)
        me = min_eig(Pk)
        if me < -delta_pd:
            raise PositivityLossError(f"min eig(P) = {me:.3e} at t={t:.6g}", t)
        Dn = D_node[idx]
        lam = R_node[idx] + gamma_node[idx] * (Dn.T @ Pk @ Dn)
        me_l = min_eig(lam)
        if me_l < delta_pd:
            raise SingularGainError(
                f"min eig(R + D'PD gamma) = {me_l:.3e} at t={t:.6g}", t
            )

    checks(P[-1], k - 1)
    for i in range(k - 1, 0, -1):
        h = float(times[i - 1] - times[i])  # negative: stepping backward
        t_mid = float(mids[i - 1])
        j = i - 1
        coeffs = (
            step["A"][j], step["B_tilde"][j], step["C"][j], step["D"][j],
            step["b"][j], step["sigma"][j], step["Q"][j], step["S"][j],
            step["R"][j], float(gamma_mid[j]),
        )
        try:
            k1 = _rhs(P[i], phi[i], l[i], *coeffs)
            k2 = _rhs(P[i] + 0.5 * h * k1[0], phi[i] + 0.5 * h * k1[1], l[i] + 0.5 * h * k1[2], *coeffs)
            k3 = _rhs(P[i] + 0.5 * h * k2[0], phi[i] + 0.5 * h * k2[1], l[i] + 0.5 * h * k2[2], *coeffs)
            k4 = _rhs(P[i] + h * k3[0], phi[i] + h * k3[1], l[i] + h * k3[2], *coeffs)
        except np.linalg.LinAlgError as exc:
            raise SingularGainError(f"gain denominator singular near t={t_mid:.6g}", t_mid) from exc
        Pn = P[i] + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        P[i - 1] = 0.5 * (Pn + Pn.T)
        phi[i - 1] = phi[i] + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        l[i - 1] = l[i] + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        checks(P[i - 1], i - 1)

    return RiccatiSolution(times, P, phi, l, scenario, p)


def _solve_riccati_scalar(p, scenario, n_steps, delta_pd):
    """Float stepping for n = m = 1; same grid, same failure semantics."""
    times = _ode_grid(p, scenario, n_steps)
    k = times.size
    mids = 0.5 * (times[:-1] + times[1:])
    step = {name: getattr(p, name).at_many(mids).reshape(-1)
            for name in ("A", "B_tilde", "C", "D", "b", "sigma", "Q", "S", "R")}
    gamma_mid = scenario.value_at(mids)
    d_node = p.D.at_many(times).reshape(-1)
    r_node = p.R.at_many(times).reshape(-1)
    gamma_node = scenario.value_at(times)

    P = np.empty(k)
    phi = np.empty(k)
    l = np.empty(k)
    P[-1] = float(p.L[0, 0])
    phi[-1] = 0.0
    l[-1] = 0.0

    def check(Pv, idx):
        t = float(times[idx])
        if not math.isfinite(Pv):
            raise PositivityLossError(f"P blew up at t={t:.6g}", t)
        if Pv < -delta_pd:
            raise PositivityLossError(f"min eig(P) = {Pv:.3e} at t={t:.6g}", t)
        lam = r_node[idx] + gamma_node[idx] * d_node[idx] ** 2 * Pv
        if lam < delta_pd:
            raise SingularGainError(f"min eig(R + D'PD gamma) = {lam:.3e} at t={t:.6g}", t)

    check(P[-1], k - 1)
    for i in range(k - 1, 0, -1):
        h = float(times[i - 1] - times[i])
        j = i - 1
        a, bt, c, d = step["A"][j], step["B_tilde"][j], step["C"][j], step["D"][j]
        bv, sg, q, s, r = step["b"][j], step["sigma"][j], step["Q"][j], step["S"][j], step["R"][j]
        g = gamma_mid[j]

        def rhs(Pv, phiv, lv):
            lam = r + g * d * d * Pv
            M = bt * Pv + s + g * d * Pv * c
            Ps = Pv * sg
            rr = bt * phiv + g * d * Ps
            inv_m = M / lam
            dP = -(2.0 * Pv * a + g * c * c * Pv + q - M * inv_m)
            dphi = -((a - bt * inv_m) * phiv + g * (c - d * inv_m) * Ps + Pv * bv)
            dl = -(phiv * bv + 0.5 * g * sg * Ps - 0.5 * rr * rr / lam)
            return dP, dphi, dl

        y = (float(P[i]), float(phi[i]), float(l[i]))
        k1 = rhs(*y)
        k2 = rhs(y[0] + 0.5 * h * k1[0], y[1] + 0.5 * h * k1[1], y[2] + 0.5 * h * k1[2])
        k3 = rhs(y[0] + 0.5 * h * k2[0], y[1] + 0.5 * h * k2[1], y[2] + 0.5 * h * k2[2])
        k4 = rhs(y[0] + h * k3[0], y[1] + h * k3[1], y[2] + h * k3[2])
        P[j] = y[0] + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        phi[j] = y[1] + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        l[j] = y[2] + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        check(float(P[j]), j)

    return RiccatiSolution(times, P.reshape(k, 1, 1), phi.reshape(k, 1), l, scenario, p)


def feedback_terms(p: LQProblem, ric: RiccatiSolution, t: float):
    """(Lam, M, r) at one grid time, using the scenario recorded in ric."""
    gamma = float(ric.gamma_used.value_at(t))
    idx = int(np.searchsorted(ric.times, t, side="left"))
    idx = min(max(idx, 0), ric.times.size - 1)
    P = ric.P[idx]
    D = p.D.at(t)
    lam = p.R.at(t) + gamma * (D.T @ P @ D)
    M = p.B_tilde.at(t).T @ P + p.S.at(t) + gamma * (D.T @ P @ p.C.at(t))
    r = p.B_tilde.at(t).T @ ric.phi[idx] + gamma * (D.T @ P @ p.sigma.at(t))
    return lam, M, r


def optimal_feedback(p: LQProblem, ric: RiccatiSolution) -> FeedbackControl:
    """Gain/offset pair of the synthesized control on the solver grid:
    u = -Lam^-1 M x - Lam^-1 r with the terms from ``feedback_terms``."""
    k = ric.times.size
    gain = np.empty((k, p.m, p.n))
    offset = np.empty((k, p.m))
    for i, t in enumerate(ric.times):
        lam, M, r = feedback_terms(p, ric, float(t))
        gain[i] = np.linalg.solve(lam, M)
        offset[i] = np.linalg.solve(lam, r)
    return FeedbackControl(ric.times, gain, offset)


def adjoint_from_riccati(
    ric: RiccatiSolution,
    xbar: np.ndarray,
    ubar: np.ndarray,
    tol: float = 1e-6,
) -> AdjointPath:
    """Costate p = P x + phi and diffusion costate q along a trajectory.

    q is computed both directly (feedback substituted into its closed form)
    and as P (C x + D u + sigma) with the supplied control; the two must
    agree within ``tol`` or the grid is too coarse for the supplied paths.
    """
    p = ric.problem
    xbar = np.asarray(xbar, dtype=float)
    ubar = np.asarray(ubar, dtype=float)
    k = ric.times.size
    if xbar.shape != (k, p.n) or ubar.shape != (k, p.m):
        raise ValueError("paths must be sampled on the solver grid")
    pv = np.empty((k, p.n))
    q_sub = np.empty((k, p.n))
    q_dir = np.empty((k, p.n))
    for i, t in enumerate(ric.times):
        t = float(t)
        P, phiv = ric.P[i], ric.phi[i]
        pv[i] = P @ xbar[i] + phiv
        C, D, sig = p.C.at(t), p.D.at(t), p.sigma.at(t)
        q_sub[i] = P @ (C @ xbar[i] + D @ ubar[i] + sig)
        lam, M, r = feedback_terms(p, ric, t)
        u_formula = -np.linalg.solve(lam, M @ xbar[i] + r)
        q_dir[i] = P @ (C @ xbar[i] + D @ u_formula + sig)
    scale = max(1.0, float(np.max(np.abs(q_sub))))
    gap = float(np.max(np.abs(q_sub - q_dir)))
    if gap > tol * scale:
        raise AdjointMismatchError(
            f"q forms disagree by {gap:.3e} (tol {tol:.1e} * scale {scale:.3g}); "
            "control path inconsistent with the recorded scenario or grid too coarse"
        )
    return AdjointPath(ric.times, pv, q_sub)


def write_riccati_csv(ric: RiccatiSolution, ctrl: FeedbackControl, path) -> None:
    """Time series (t, vec(P), phi, l, vec(K), k) for plotting/regression."""
    p = ric.problem
    header = (["t"]
              + [f"P_{i}{j}" for i in range(p.n) for j in range(p.n)]
              + [f"phi_{i}" for i in range(p.n)]
              + ["l"]
              + [f"K_{i}{j}" for i in range(p.m) for j in range(p.n)]
              + [f"k_{i}" for i in range(p.m)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for idx, t in enumerate(ric.times):
            row = [repr(float(t))]
            row += [repr(float(v)) for v in ric.P[idx].reshape(-1)]
            row += [repr(float(v)) for v in ric.phi[idx]]
            row.append(repr(float(ric.l[idx])))
            row += [repr(float(v)) for v in ctrl.gain[idx].reshape(-1)]
            row += [repr(float(v)) for v in ctrl.offset[idx]]
            w.writerow(row)
