import numpy as np
import pytest

from ambilq.problem import (
    AmbiguityBounds,
    LQProblem,
    PiecewiseConstant,
)

PC = PiecewiseConstant


def make_scalar_problem(
    A=0.0, B_tilde=1.0, C=0.0, D=0.0, b=0.0, sigma=0.0,
    Q=0.0, S=0.0, R=1.0, L=1.0, x0=1.0, T=1.0,
    sigma_bar_sq=1.0, sigma_low_sq=0.5,
) -> LQProblem:
    return LQProblem(
        horizon=T, n=1, m=1,
        A=PC.constant([[A]]), B_tilde=PC.constant([[B_tilde]]),
        C=PC.constant([[C]]), D=PC.constant([[D]]),
        b=PC.constant([b]), sigma=PC.constant([sigma]),
        Q=PC.constant([[Q]]), S=PC.constant([[S]]), R=PC.constant([[R]]),
        L=np.array([[L]]), x0=np.array([float(x0)]),
        bounds=AmbiguityBounds(sigma_bar_sq, sigma_low_sq),
    )


def random_standard_problem(rng: np.random.Generator, n=None, m=None, T=1.0) -> LQProblem:
    """Random constant-coefficient instance satisfying the standing
    definiteness conditions by construction: R = 0.5 I + G G', L = 0.3 I + F F'
    and Q = S' R^-1 S + H H' so the Schur complement is PSD."""
    n = int(rng.integers(1, 3)) if n is None else n
    m = int(rng.integers(1, 3)) if m is None else m
    A = rng.uniform(-1.0, 1.0, (n, n))
    Bt = rng.uniform(-1.0, 1.0, (n, m))
    C = rng.uniform(-0.5, 0.5, (n, n))
    D = rng.uniform(-0.5, 0.5, (n, m))
    b = rng.uniform(-0.5, 0.5, n)
    sig = rng.uniform(-0.8, 0.8, n)
    G = rng.uniform(-0.7, 0.7, (m, m))
    R = 0.5 * np.eye(m) + G @ G.T
    S = rng.uniform(-0.5, 0.5, (m, n))
    H = rng.uniform(-0.8, 0.8, (n, n))
    Q = S.T @ np.linalg.solve(R, S) + H @ H.T
    F = rng.uniform(-0.7, 0.7, (n, n))
    L = 0.3 * np.eye(n) + F @ F.T
    low = float(rng.uniform(0.3, 0.8))
    bar = low + float(rng.uniform(0.2, 0.7))
    return LQProblem(
        horizon=T, n=n, m=m,
        A=PC.constant(A), B_tilde=PC.constant(Bt), C=PC.constant(C), D=PC.constant(D),
        b=PC.constant(b), sigma=PC.constant(sig),
        Q=PC.constant(Q), S=PC.constant(S), R=PC.constant(R),
        L=L, x0=rng.uniform(-1.0, 1.0, n),
        bounds=AmbiguityBounds(bar, low),
    )


@pytest.fixture
def scalar_riccati_problem():
    """A=C=D=S=Q=0, B~=R=L=1: closed form P(t) = 1 / (1 + T - t)."""
    return make_scalar_problem()


@pytest.fixture
def scalar_noisy_problem():
    """Scalar instance with additive noise and running state cost."""
    return make_scalar_problem(Q=1.0, sigma=1.0)
