"""Domain model for linear-quadratic control under volatility ambiguity.

An ``LQProblem`` couples time-varying LQ coefficients with a band of
admissible variance rates ``[sigma_low_sq, sigma_bar_sq]``.  Coefficients are
piecewise-constant tables on ``[0, T]``, which keeps ODE integration exact
between breakpoints and matches how uncertainty scenarios are represented.
A ``VolatilityScenario`` is one deterministic variance-rate path inside the
band; a ``FeedbackControl`` is an affine state-feedback rule sampled on a
time grid.

All types are immutable after construction (backing arrays are marked
read-only), so instances can be shared freely across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import ConfigError

DELTA_PD = 1e-8  # operational threshold for "strictly positive definite"

_COEFF_SHAPES = {
    # name -> (rows, cols) in terms of (n, m); None marks a vector
    "A": ("n", "n"),
    "B_tilde": ("n", "m"),
    "C": ("n", "n"),
    "D": ("n", "m"),
    "Q": ("n", "n"),
    "S": ("m", "n"),
    "R": ("m", "m"),
    "b": ("n", None),
    "sigma": ("n", None),
}
_DEFAULT_ZERO = ("b", "sigma", "S")


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


def min_eig(mat: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix (fast path for 1x1)."""
    mat = np.asarray(mat, dtype=float)
    if mat.shape == (1, 1):
        return float(mat[0, 0])
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])


@dataclass(frozen=True)
class AmbiguityBounds:
    """Band of admissible variance rates, 0 < sigma_low_sq <= sigma_bar_sq."""

    sigma_bar_sq: float
    sigma_low_sq: float

    def __post_init__(self):
        if not (0.0 < self.sigma_low_sq <= self.sigma_bar_sq):
            raise ValueError(
                "require 0 < sigma_low_sq <= sigma_bar_sq, got "
                f"low={self.sigma_low_sq}, bar={self.sigma_bar_sq}"
            )

    @property
    def width(self) -> float:
        return self.sigma_bar_sq - self.sigma_low_sq


@dataclass(frozen=True, eq=False)
class PiecewiseConstant:
    """Right-continuous step function on [0, T], one table row per interval.

    ``values[i]`` applies on ``[times[i], times[i+1])`` and the last row
    extends through the horizon.  ``times[0]`` must be 0.
    """

    times: np.ndarray   # (k,), strictly increasing, times[0] == 0
    values: np.ndarray  # (k, ...) stacked matrices or vectors

    def __post_init__(self):
        times = _freeze(self.times).reshape(-1)
        values = _freeze(self.values)
        if times.size == 0 or times[0] != 0.0:
            raise ValueError("breakpoint table must start at t=0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("breakpoint times must be strictly increasing")
        if values.shape[0] != times.size:
            raise ValueError("one value row per breakpoint required")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, value) -> "PiecewiseConstant":
        v = np.asarray(value, dtype=float)
        return cls(np.zeros(1), v[None, ...])

    def index_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right") - 1
        return np.clip(idx, 0, self.times.size - 1)

    def at(self, t: float) -> np.ndarray:
        return self.values[int(self.index_at(t))]

    def at_many(self, ts: np.ndarray) -> np.ndarray:
        return self.values[self.index_at(ts)]

    def __eq__(self, other):
        return (
            isinstance(other, PiecewiseConstant)
            and np.array_equal(self.times, other.times)
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class VolatilityScenario:
    """One deterministic variance-rate path gamma: [0, T] -> [low, bar].

    Represents a single candidate distribution of the driving noise via the
    accumulated variance ``integral of gamma``; piecewise constant between
    ``breakpoints`` with ``values[k]`` on ``[t_k, t_{k+1})``.
    """

    breakpoints: np.ndarray  # (N+1,), 0 = t0 < ... < tN = T
    values: np.ndarray       # (N,)

    def __post_init__(self):
        bp = _freeze(self.breakpoints).reshape(-1)
        vals = _freeze(self.values).reshape(-1)
        if bp.size < 2 or bp[0] != 0.0:
            raise ValueError("scenario breakpoints must start at 0 and end at T")
        if np.any(np.diff(bp) <= 0):
            raise ValueError("scenario breakpoints must be strictly increasing")
        if vals.size != bp.size - 1:
            raise ValueError("need one value per interval")
        if np.any(vals <= 0):
            raise ValueError("variance rates must be positive")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    @property
    def horizon(self) -> float:
        return float(self.breakpoints[-1])

    @classmethod
    def constant(cls, level: float, horizon: float) -> "VolatilityScenario":
        return cls(np.array([0.0, horizon]), np.array([level]))

    @classmethod
    def from_values(cls, horizon: float, values) -> "VolatilityScenario":
        values = np.asarray(values, dtype=float)
        bp = np.linspace(0.0, horizon, values.size + 1)
        return cls(bp, values)

    def value_at(self, t) -> np.ndarray:
        idx = np.searchsorted(self.breakpoints, np.asarray(t, dtype=float), side="right") - 1
        idx = np.clip(idx, 0, self.values.size - 1)
        return self.values[idx]

    def quadratic_variation(self, t) -> np.ndarray:
        """Accumulated variance int_0^t gamma(s) ds (vectorized in t)."""
        t = np.asarray(t, dtype=float)
        widths = np.diff(self.breakpoints)
        cum = np.concatenate([[0.0], np.cumsum(self.values * widths)])
        idx = np.clip(
            np.searchsorted(self.breakpoints, t, side="right") - 1, 0, self.values.size - 1
        )
        return cum[idx] + self.values[idx] * (t - self.breakpoints[idx])

    def assert_within(self, bounds: AmbiguityBounds, tol: float = 1e-12) -> None:
        lo, hi = bounds.sigma_low_sq, bounds.sigma_bar_sq
        if np.any(self.values < lo - tol) or np.any(self.values > hi + tol):
            raise ValueError(
                f"scenario values outside [{lo}, {hi}]: "
                f"range [{self.values.min()}, {self.values.max()}]"
            )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.breakpoints.tobytes())
        h.update(self.values.tobytes())
        return h.hexdigest()[:16]

    def __eq__(self, other):
        return (
            isinstance(other, VolatilityScenario)
            and np.array_equal(self.breakpoints, other.breakpoints)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, eq=False)
class FeedbackControl:
    """Affine state feedback u(t, x) = -gain(t) @ x - offset(t).

    ``gain`` and ``offset`` are sampled on ``times`` and interpolated
    linearly in between.  Open-loop controls are the gain == 0 special case.
    """

    times: np.ndarray   # (k,), ascending, covering the problem horizon
    gain: np.ndarray    # (k, m, n)
    offset: np.ndarray  # (k, m)

    def __post_init__(self):
        times = _freeze(self.times).reshape(-1)
        gain = _freeze(self.gain)
        offset = _freeze(self.offset)
        if gain.ndim != 3 or offset.ndim != 2:
            raise ValueError("gain must be (k, m, n), offset (k, m)")
        if not (gain.shape[0] == offset.shape[0] == times.size):
            raise ValueError("gain/offset must be sampled on the full time grid")
        if gain.shape[1] != offset.shape[1]:
            raise ValueError("gain and offset disagree on control dimension")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "gain", gain)
        object.__setattr__(self, "offset", offset)

    @property
    def control_dim(self) -> int:
        return self.gain.shape[1]

    @property
    def state_dim(self) -> int:
        return self.gain.shape[2]

    @classmethod
    def open_loop(cls, times, u_path) -> "FeedbackControl":
        """Pure open-loop control u(t) (state-independent), u_path: (k, m)."""
        u_path = np.asarray(u_path, dtype=float)
        k, m = u_path.shape
        return cls(np.asarray(times, dtype=float), np.zeros((k, m, 1)), -u_path)

    def sampled_on(self, ts: np.ndarray):
        """Gains and offsets linearly interpolated onto ``ts``."""
        ts = np.asarray(ts, dtype=float)
        k, m, n = self.gain.shape
        gains = np.empty((ts.size, m, n))
        offs = np.empty((ts.size, m))
        for i in range(m):
            offs[:, i] = np.interp(ts, self.times, self.offset[:, i])
            for j in range(n):
                gains[:, i, j] = np.interp(ts, self.times, self.gain[:, i, j])
        return gains, offs

    def evaluate(self, t: float, x: np.ndarray) -> np.ndarray:
        g, o = self.sampled_on(np.array([t]))
        return -g[0] @ np.asarray(x, dtype=float) - o[0]

    def with_offset_shift(self, delta: np.ndarray) -> "FeedbackControl":
        """Additive open-loop shift: u -> u + delta(t); delta sampled on self.times."""
        delta = np.broadcast_to(np.asarray(delta, dtype=float), self.offset.shape)
        return FeedbackControl(self.times, self.gain, self.offset - delta)

    def with_scaled_gain(self, factor: float) -> "FeedbackControl":
        return FeedbackControl(self.times, self.gain * factor, self.offset)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.gain, self.offset):
            h.update(arr.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class LQProblem:
    """Full coefficient set of the controlled linear-quadratic problem.

    State dynamics  dx = (A x + B_tilde u + b) dt + (C x + D u + sigma) dB
    with quadratic running cost (Q, S, R), terminal weight L, start x0, and
    ambiguity ``bounds`` on the variance rate of B.
    """

    horizon: float
    n: int
    m: int
    A: PiecewiseConstant
    B_tilde: PiecewiseConstant
    C: PiecewiseConstant
    D: PiecewiseConstant
    b: PiecewiseConstant
    sigma: PiecewiseConstant
    Q: PiecewiseConstant
    S: PiecewiseConstant
    R: PiecewiseConstant
    L: np.ndarray
    x0: np.ndarray
    bounds: AmbiguityBounds

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be >= 1")
        object.__setattr__(self, "L", _freeze(self.L))
        object.__setattr__(self, "x0", _freeze(self.x0).reshape(-1))
        dims = {"n": self.n, "m": self.m}
        for name, (r, c) in _COEFF_SHAPES.items():
            coeff: PiecewiseConstant = getattr(self, name)
            want = (dims[r],) if c is None else (dims[r], dims[c])
            got = coeff.values.shape[1:]
            if got != want:
                raise ConfigError(f"coefficient {name!r} has shape {got}, expected {want}")
        if self.L.shape != (self.n, self.n):
            raise ConfigError(f"coefficient 'L' has shape {self.L.shape}, expected {(self.n, self.n)}")
        if self.x0.shape != (self.n,):
            raise ConfigError(f"'x0' has shape {self.x0.shape}, expected {(self.n,)}")

    def coefficient_breakpoints(self) -> np.ndarray:
        """Union of all coefficient table times (plus 0 and T)."""
        times = [np.array([0.0, self.horizon])]
        for name in _COEFF_SHAPES:
            times.append(getattr(self, name).times)
        merged = np.unique(np.concatenate(times))
        return merged[(merged >= 0.0) & (merged <= self.horizon)]

    def __eq__(self, other):
        if not isinstance(other, LQProblem):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.n == other.n
            and self.m == other.m
            and all(getattr(self, k) == getattr(other, k) for k in _COEFF_SHAPES)
            and np.array_equal(self.L, other.L)
            and np.array_equal(self.x0, other.x0)
            and self.bounds == other.bounds
        )


@dataclass(frozen=True)
class Violation:
    condition: str
    time: float
    detail: str

    def __str__(self):
        return f"{self.condition} fails at t={self.time:g}: {self.detail}"


def validate_problem(p: LQProblem, delta_pd: float = DELTA_PD) -> list[Violation]:
    """Check the standing definiteness conditions at every table breakpoint.

    Returns an empty list iff R >> 0, Q - S R^-1 S' >= 0 at every grid time
    and L >> 0 ("strictly" meaning min-eigenvalue >= delta_pd).  Violations
    are returned, never raised.
    """
    out: list[Violation] = []
    for name in _COEFF_SHAPES:
        coeff: PiecewiseConstant = getattr(p, name)
        if not np.all(np.isfinite(coeff.values)):
            out.append(Violation(f"{name} bounded", float(coeff.times[0]), "non-finite entries"))
    if not np.all(np.isfinite(p.L)):
        out.append(Violation("L bounded", p.horizon, "non-finite entries"))

    for t in p.coefficient_breakpoints():
        t = float(t)
        if t >= p.horizon:
            continue
        R = p.R.at(t)
        me_r = min_eig(R)
        if me_r < delta_pd:
            out.append(Violation("R >> 0", t, f"min eig {me_r:.3e} < {delta_pd:.1e}"))
            continue  # Schur condition below needs R invertible
        Q = p.Q.at(t)
        S = p.S.at(t)
        schur = Q - S.T @ np.linalg.solve(R, S)
        me_s = min_eig(schur)
        if me_s < -delta_pd:
            out.append(Violation("Q - S R^-1 S^T >= 0", t, f"min eig {me_s:.3e}"))

    me_l = min_eig(p.L)
    if me_l < delta_pd:
        out.append(Violation("L >> 0", p.horizon, f"min eig {me_l:.3e} < {delta_pd:.1e}"))
    return out


# --------------------------------------------------------------------------
# Structured-text configuration (JSON schema, documented in the README)
# --------------------------------------------------------------------------

def _parse_table(name: str, raw, want_shape: tuple[int, ...], horizon: float) -> PiecewiseConstant:
    if isinstance(raw, dict):
        if "times" not in raw or "values" not in raw:
            raise ConfigError(f"coefficient {name!r}: table needs 'times' and 'values'")
        times = np.asarray(raw["times"], dtype=float)
        rows = raw["values"]
        if times.ndim != 1 or len(rows) != times.size:
            raise ConfigError(f"coefficient {name!r}: one value row per time required")
        if times.size and times[-1] >= horizon:
            raise ConfigError(f"coefficient {name!r}: table times must lie in [0, T)")
    else:
        times = np.zeros(1)
        rows = [raw]
    vals = []
    for row in rows:
        arr = np.asarray(row, dtype=float)
        if arr.shape == () and want_shape in ((1,), (1, 1)):
            arr = arr.reshape(want_shape)
        if arr.shape != want_shape:
            raise ConfigError(
                f"dimension mismatch for coefficient {name!r}: got shape "
                f"{arr.shape or 'scalar'}, expected {want_shape}"
            )
        vals.append(arr)
    try:
        return PiecewiseConstant(times, np.stack(vals))
    except ValueError as exc:
        raise ConfigError(f"coefficient {name!r}: {exc}") from exc


def load_problem(config_text: str) -> LQProblem:
    """Parse the JSON problem schema into an ``LQProblem``.

    Unspecified ``b``, ``sigma``, ``S`` default to zero tables.  Parse errors
    carry line/column positions; shape errors name the offending coefficient.
    """
    try:
        doc = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("top-level config must be a JSON object")

    for key in ("T", "n", "m", "sigma_bar_sq", "sigma_low_sq", "x0", "coefficients"):
        if key not in doc:
            raise ConfigError(f"missing required field {key!r}")
    try:
        horizon = float(doc["T"])
        n = int(doc["n"])
        m = int(doc["m"])
        bounds = AmbiguityBounds(float(doc["sigma_bar_sq"]), float(doc["sigma_low_sq"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scalar field: {exc}") from exc

    coeffs = doc["coefficients"]
    if not isinstance(coeffs, dict):
        raise ConfigError("'coefficients' must be an object keyed by name")
    known = set(_COEFF_SHAPES) | {"L"}
    unknown = set(coeffs) - known
    if unknown:
        raise ConfigError(f"unknown coefficient keys: {sorted(unknown)}")

    dims = {"n": n, "m": m}
    tables = {}
    for name, (r, c) in _COEFF_SHAPES.items():
        want = (dims[r],) if c is None else (dims[r], dims[c])
        if name in coeffs:
            tables[name] = _parse_table(name, coeffs[name], want, horizon)
        elif name in _DEFAULT_ZERO:
            tables[name] = PiecewiseConstant.constant(np.zeros(want))
        else:
            raise ConfigError(f"missing required coefficient {name!r}")
    if "L" not in coeffs:
        raise ConfigError("missing required coefficient 'L'")
    L = np.asarray(coeffs["L"], dtype=float)
    if L.shape == () and n == 1:
        L = L.reshape(1, 1)
    if L.shape != (n, n):
        raise ConfigError(f"dimension mismatch for coefficient 'L': got {L.shape}, expected {(n, n)}")

    x0 = np.asarray(doc["x0"], dtype=float).reshape(-1)
    if x0.shape != (n,):
        raise ConfigError(f"'x0' has length {x0.size}, expected {n}")

    return LQProblem(
        horizon=horizon, n=n, m=m,
        A=tables["A"], B_tilde=tables["B_tilde"], C=tables["C"], D=tables["D"],
        b=tables["b"], sigma=tables["sigma"],
        Q=tables["Q"], S=tables["S"], R=tables["R"],
        L=L, x0=x0, bounds=bounds,
    )


def serialize_problem(p: LQProblem) -> str:
    """Canonical JSON text for ``p``; load(serialize(p)) == p bitwise."""
    def table(coeff: PiecewiseConstant):
        return {"times": coeff.times.tolist(), "values": coeff.values.tolist()}

    doc = {
        "T": p.horizon,
        "n": p.n,
        "m": p.m,
        "sigma_bar_sq": p.bounds.sigma_bar_sq,
        "sigma_low_sq": p.bounds.sigma_low_sq,
        "x0": p.x0.tolist(),
        "coefficients": {
            **{name: table(getattr(p, name)) for name in _COEFF_SHAPES},
            "L": p.L.tolist(),
        },
    }
    return json.dumps(doc, sort_keys=True, indent=2)


def problem_hash(p: LQProblem) -> str:
    """Content hash of the canonical serialization; keys all report outputs."""
    return hashlib.sha256(serialize_problem(p).encode()).hexdigest()[:16]
