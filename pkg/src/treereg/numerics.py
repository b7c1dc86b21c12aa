"""Dense numerics: a LeakyReLU MLP with hand-derived gradients, Adam, and
least squares.

Everything here is float64 and pure: functions return new arrays and never
mutate their inputs, which keeps training trajectories exactly reproducible
and lets property tests compare runs bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular


class NonFiniteGradientError(FloatingPointError):
    """A gradient contained NaN or infinity; no update was applied."""


class RankDeficientError(ValueError):
    """The design matrix does not have full column rank."""


# ----------------------------------------------------------------------
# Encoder: d_in -> hidden[0] -> hidden[1] -> d_out with LeakyReLU on the
# two hidden layers and a linear output layer.
# ----------------------------------------------------------------------
@dataclass
class EncoderParams:
    w1: np.ndarray  # (d_in, h1)
    b1: np.ndarray  # (h1,)
    w2: np.ndarray  # (h1, h2)
    b2: np.ndarray  # (h2,)
    w3: np.ndarray  # (h2, d_out)
    b3: np.ndarray  # (d_out,)
    negative_slope: float = 0.01

    def __post_init__(self):
        if self.w1.shape[1] != self.b1.shape[0] or self.w2.shape[0] != self.w1.shape[1]:
            raise ValueError("layer 1/2 shapes do not chain")
        if self.w2.shape[1] != self.b2.shape[0] or self.w3.shape[0] != self.w2.shape[1]:
            raise ValueError("layer 2/3 shapes do not chain")
        if self.w3.shape[1] != self.b3.shape[0]:
            raise ValueError("output layer shapes do not chain")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w3.shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Parameter tensors in the documented order w1,b1,w2,b2,w3,b3."""
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def replace_arrays(self, arrays: list[np.ndarray]) -> "EncoderParams":
        w1, b1, w2, b2, w3, b3 = arrays
        return EncoderParams(w1, b1, w2, b2, w3, b3, self.negative_slope)

    def copy(self) -> "EncoderParams":
        return self.replace_arrays([a.copy() for a in self.arrays()])


@dataclass
class EncoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]


@dataclass
class EncoderCache:
    """Activations retained by the forward pass for the backward pass."""

    x: np.ndarray
    pre1: np.ndarray
    act1: np.ndarray
    pre2: np.ndarray
    act2: np.ndarray


def glorot_uniform(d_in: int, d_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def init_encoder(
    d_in: int,
    d_out: int,
    rng: np.random.Generator,
    hidden: tuple[int, int] = (256, 64),
    negative_slope: float = 0.01,
) -> EncoderParams:
    """Glorot-uniform weights, zero biases."""
    h1, h2 = hidden
    return EncoderParams(
        w1=glorot_uniform(d_in, h1, rng),
        b1=np.zeros(h1),
        w2=glorot_uniform(h1, h2, rng),
        b2=np.zeros(h2),
        w3=glorot_uniform(h2, d_out, rng),
        b3=np.zeros(d_out),
        negative_slope=negative_slope,
    )


def leaky_relu(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre > 0.0, pre, slope * pre)


def _leaky_relu_slope(pre: np.ndarray, slope: float) -> np.ndarray:
    return np.where(pre > 0.0, 1.0, slope)


def encoder_forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, EncoderCache]:
    """Batched forward pass; returns (z, cache) with z of shape (n, d_out)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise ValueError(f"expected input of shape (n, {params.d_in}), got {x.shape}")
    s = params.negative_slope
    pre1 = x @ params.w1 + params.b1
    act1 = leaky_relu(pre1, s)
    pre2 = act1 @ params.w2 + params.b2
    act2 = leaky_relu(pre2, s)
    z = act2 @ params.w3 + params.b3
    return z, EncoderCache(x, pre1, act1, pre2, act2)


def encoder_backward(
    params: EncoderParams, cache: EncoderCache, dz: np.ndarray
) -> tuple[EncoderGrads, np.ndarray]:
    """Exact reverse-mode gradients for :func:`encoder_forward`.

    ``dz`` is the upstream gradient with respect to the encoder output; the
    return value is (parameter gradients, gradient with respect to x).
    """
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != (cache.x.shape[0], params.d_out):
        raise ValueError(f"upstream gradient has shape {dz.shape}, expected "
                         f"{(cache.x.shape[0], params.d_out)}")
    s = params.negative_slope
    dw3 = cache.act2.T @ dz
    db3 = dz.sum(axis=0)
    dact2 = dz @ params.w3.T
    dpre2 = dact2 * _leaky_relu_slope(cache.pre2, s)
    dw2 = cache.act1.T @ dpre2
    db2 = dpre2.sum(axis=0)
    dact1 = dpre2 @ params.w2.T
    dpre1 = dact1 * _leaky_relu_slope(cache.pre1, s)
    dw1 = cache.x.T @ dpre1
    db1 = dpre1.sum(axis=0)
    dx = dpre1 @ params.w1.T
    return EncoderGrads(dw1, db1, dw2, db2, dw3, db3), dx


# ----------------------------------------------------------------------
# Adam
# ----------------------------------------------------------------------
@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: list[np.ndarray], learning_rate: float, **kw) -> "AdamState":
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            step=0,
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    state: AdamState, params: list[np.ndarray], grads: list[np.ndarray]
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Pure: returns fresh arrays.

    Raises :class:`NonFiniteGradientError` (before touching anything) if any
    gradient entry is NaN or infinite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient; update skipped")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        new_p.append(p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(new_m, new_v, t, state.learning_rate, b1, b2, state.eps)
    return new_p, new_state


# ----------------------------------------------------------------------
# Least squares
# ----------------------------------------------------------------------
def ols_solve(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients minimizing ||x @ beta - y||^2 via QR.

    Requires n >= p and full column rank; rank deficiency raises
    :class:`RankDeficientError` instead of silently pseudo-inverting.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("x must be 2-d")
    n, p = x.shape
    if n < p:
        raise ValueError(f"need at least as many rows as columns, got {n} < {p}")
    if y.shape[0] != n:
        raise ValueError("y length does not match x rows")
    q, r = np.linalg.qr(x)
    diag = np.abs(np.diag(r))
    tol = max(n, p) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    if diag.size == 0 or diag.min() <= tol:
        raise RankDeficientError(
            f"rank-deficient design: min |R_ii| = {diag.min() if diag.size else 0.0:.3e}"
        )
    return solve_triangular(r, q.T @ y, lower=False)


def l1_least_squares(
    x: np.ndarray,
    y: np.ndarray,
    lam: float,
    max_iter: int = 1000,
    tol: float = 1e-12,
) -> np.ndarray:
    """Coordinate-descent minimizer of mean((y - x @ beta)^2) + lam * ||beta||_1.

    Deterministic cyclic updates from beta = 0; intended for the small
    per-environment head problems (p of the order of the latent dimension).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    if lam < 0:
        raise ValueError("lam must be non-negative")
    col_sq = (x * x).sum(axis=0) / n
    if np.any(col_sq == 0.0):
        raise RankDeficientError("zero column in L1 least squares design")
    beta = np.zeros(p)
    resid = y.copy()
    for _ in range(max_iter):
        max_change = 0.0
        for j in range(p):
            old = beta[j]
            rho = (x[:, j] @ resid) / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam / 2.0, 0.0) / col_sq[j]
            if new != old:
                resid += x[:, j] * (old - new)
                beta[j] = new
                max_change = max(max_change, abs(new - old))
        if max_change <= tol:
            break
    return beta
