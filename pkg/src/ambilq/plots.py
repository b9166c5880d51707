"""Figure rendering for the CLI report paths (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save(fig, path) -> None:
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)


def riccati_figure(ric, ctrl):
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    t = ric.times
    n = ric.P.shape[1]
    for i in range(n):
        for j in range(i, n):
            axes[0].plot(t, ric.P[:, i, j], label=f"P[{i},{j}]")
    axes[0].set_title("Riccati state P(t)")
    axes[0].legend(fontsize=7)
    for i in range(n):
        axes[1].plot(t, ric.phi[:, i], label=f"phi[{i}]")
    axes[1].plot(t, ric.l, "k--", label="l")
    axes[1].set_title("offset phi(t) and accumulator l(t)")
    axes[1].legend(fontsize=7)
    m = ctrl.gain.shape[1]
    for i in range(m):
        for j in range(n):
            axes[2].plot(t, ctrl.gain[:, i, j], label=f"K[{i},{j}]")
        axes[2].plot(t, ctrl.offset[:, i], "--", label=f"k[{i}]")
    axes[2].set_title("feedback gain/offset")
    axes[2].legend(fontsize=7)
    for ax in axes:
        ax.set_xlabel("t")
    fig.tight_layout()
    return fig


def gheat_figure(sol):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    xs = sol.grid.xs
    ax.plot(xs, sol.u[0], label="payoff (t=0)")
    ax.plot(xs, sol.u[-1], label=f"value (t={sol.horizon:g})")
    ax.axvline(0.0, color="gray", lw=0.6)
    ax.set_xlabel("x")
    ax.set_ylabel("u")
    ax.set_title(f"nonlinear heat solve, value at origin = {sol.expectation:.6g}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def scenario_staircase(ax, scenario, **kw):
    ax.stairs(scenario.values, scenario.breakpoints, **kw)


def robust_figure(result):
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    scenario_staircase(axes[0], result.argmax_scenario, fill=True, alpha=0.4, color="tab:red")
    axes[0].set_title("worst-case variance path")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("gamma")
    means = sorted(row[1] for row in result.table)
    axes[1].plot(means, marker=".", ls="", ms=3)
    axes[1].axhline(result.value, color="tab:red", lw=0.8,
                    label=f"worst case = {result.value:.5g}")
    axes[1].set_title(f"scenario costs ({result.method}, {len(result.table)} members)")
    axes[1].set_xlabel("rank")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    return fig


def tstar_figure(breakpoints, switch_values, t_star):
    fig, ax = plt.subplots(figsize=(6, 3.6))
    # switch_values are enumerated from the all-low member (switch at T) down
    switches = breakpoints[::-1]
    ax.plot(switches[: len(switch_values)], switch_values, marker="o", ms=3)
    ax.axvline(t_star, color="tab:red", lw=0.9, label=f"t* = {t_star:g}")
    ax.set_xlabel("switch time")
    ax.set_ylabel("objective")
    ax.set_title("worst-case objective vs switch location")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def verify_figure(checks):
    fig, ax = plt.subplots(figsize=(7, 3.4))
    names = [c["name"] for c in checks]
    margins = []
    colors = []
    for c in checks:
        margins.append(c["value"])
        colors.append("tab:green" if c["passed"] else "tab:red")
    ax.barh(range(len(names)), margins, color=colors)
    ax.set_yticks(range(len(names)))
    ax.set_yticklabels(names, fontsize=7)
    ax.axvline(0.0, color="k", lw=0.6)
    ax.set_xlabel("check statistic")
    ax.set_title("optimality verification")
    fig.tight_layout()
    return fig
