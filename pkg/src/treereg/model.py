"""Tree-headed and single-headed prediction models over a shared encoder.

The tree model keeps root head weights plus one mutation row per tree arc;
an environment's head is the root head plus the mutations on its root path.
Its training objective is the batch-mean squared prediction error plus an L1
penalty on the mutation rows (a differentiable surrogate for counting
non-zero mutations; the count itself is only used at evaluation time).
The baseline model shares the encoder architecture but fits one head for all
environments and carries no penalty.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env_tree import EnvTree
from .numerics import (
    EncoderGrads,
    EncoderParams,
    encoder_backward,
    encoder_forward,
)


@dataclass
class TbrParams:
    """Encoder plus root head ``w0`` and per-arc mutation estimates ``delta``."""

    encoder: EncoderParams
    w0: np.ndarray  # (k_hat,)
    delta: np.ndarray  # (n_arcs, k_hat)

    def __post_init__(self):
        if self.delta.ndim != 2 or self.delta.shape[1] != self.w0.shape[0]:
            raise ValueError("delta columns must match w0 length")
        if self.encoder.d_out != self.w0.shape[0]:
            raise ValueError("encoder output width must match head width")

    @property
    def k_hat(self) -> int:
        return self.w0.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Tensors in checkpoint order: encoder layers, then w0, then delta."""
        return self.encoder.arrays() + [self.w0, self.delta]

    def replace_arrays(self, arrays: list[np.ndarray]) -> "TbrParams":
        return TbrParams(self.encoder.replace_arrays(arrays[:6]), arrays[6], arrays[7])

    def copy(self) -> "TbrParams":
        return self.replace_arrays([a.copy() for a in self.arrays()])


@dataclass
class BaselineParams:
    """Encoder plus a single environment-agnostic head."""

    encoder: EncoderParams
    w: np.ndarray  # (k_hat,)

    def __post_init__(self):
        if self.encoder.d_out != self.w.shape[0]:
            raise ValueError("encoder output width must match head width")

    @property
    def k_hat(self) -> int:
        return self.w.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.w]

    def replace_arrays(self, arrays: list[np.ndarray]) -> "BaselineParams":
        return BaselineParams(self.encoder.replace_arrays(arrays[:6]), arrays[6])

    def copy(self) -> "BaselineParams":
        return self.replace_arrays([a.copy() for a in self.arrays()])


@dataclass
class LossBreakdown:
    prediction_term: float
    penalty_term: float
    lam: float

    @property
    def total(self) -> float:
        return self.prediction_term + self.lam * self.penalty_term


@dataclass
class TbrGrads:
    encoder: EncoderGrads
    w0: np.ndarray
    delta: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.w0, self.delta]


@dataclass
class BaselineGrads:
    encoder: EncoderGrads
    w: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + [self.w]


def all_env_weights(params: TbrParams, tree: EnvTree) -> np.ndarray:
    """Head weights for every tree node, shape (n_nodes, k_hat).

    Computed by the parent recurrence, so the difference between a child row
    and its parent row is exactly the arc's mutation row (bitwise).
    """
    if params.delta.shape[0] != tree.n_arcs:
        raise ValueError("delta row count must equal tree arc count")
    w = np.empty((tree.n_nodes, params.k_hat))
    w[0] = params.w0
    for child in range(1, tree.n_nodes):
        w[child] = w[tree.parent(child)] + params.delta[child - 1]
    return w


def env_weights(params: TbrParams, tree: EnvTree, env: int) -> np.ndarray:
    """Head weights of one environment (root head for the root)."""
    if params.delta.shape[0] != tree.n_arcs:
        raise ValueError("delta row count must equal tree arc count")
    w = params.w0.copy()
    for arc in tree.path_to_root(env):
        w = w + params.delta[arc]
    return w


def _check_env_ids(tree: EnvTree, env_ids: np.ndarray) -> np.ndarray:
    env_ids = np.asarray(env_ids)
    if env_ids.size and (env_ids.min() < 0 or env_ids.max() >= tree.n_nodes):
        bad = env_ids[(env_ids < 0) | (env_ids >= tree.n_nodes)][0]
        raise KeyError(f"unknown environment id {bad}")
    return env_ids


def predict(
    params: TbrParams | BaselineParams,
    tree: EnvTree,
    x: np.ndarray,
    env_ids: np.ndarray | None = None,
) -> np.ndarray:
    """Predicted targets; per-sample head lookup for the tree model."""
    z, _ = encoder_forward(params.encoder, x)
    if isinstance(params, BaselineParams):
        return (z * params.w).sum(axis=1)
    if env_ids is None:
        raise ValueError("tree model prediction needs per-sample environment ids")
    env_ids = _check_env_ids(tree, env_ids)
    w = all_env_weights(params, tree)
    return (z * w[env_ids]).sum(axis=1)


def tbr_loss_and_grads(
    params: TbrParams,
    tree: EnvTree,
    x: np.ndarray,
    env_ids: np.ndarray,
    y: np.ndarray,
    lam: float,
) -> tuple[LossBreakdown, TbrGrads]:
    """Batch-mean squared error + lam * L1(delta), with exact gradients.

    The absolute value's subgradient at exactly zero is taken to be zero, so
    mutation entries parked at zero stay there unless the prediction term
    moves them. Encoder gradients flow through every environment head present
    in the batch.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty batch")
    env_ids = _check_env_ids(tree, env_ids)
    n = y.shape[0]

    z, cache = encoder_forward(params.encoder, x)
    w_all = all_env_weights(params, tree)
    w_batch = w_all[env_ids]
    y_hat = (z * w_batch).sum(axis=1)
    resid = y_hat - y
    prediction = float(resid @ resid) / n
    penalty = float(np.abs(params.delta).sum())
    breakdown = LossBreakdown(prediction, penalty, lam)

    dy = (2.0 / n) * resid
    dz = dy[:, None] * w_batch
    # Head gradients: the root head sees every sample (same expression as the
    # baseline head, so a frozen-zero-mutation run tracks the baseline bit for
    # bit); an arc sees the samples of all environments below it.
    dw0 = z.T @ dy
    dw_env = np.zeros_like(w_all)
    np.add.at(dw_env, env_ids, dy[:, None] * z)
    for child in range(tree.n_nodes - 1, 0, -1):
        dw_env[tree.parent(child)] += dw_env[child]
    ddelta = dw_env[1:] + lam * np.sign(params.delta)

    enc_grads, _ = encoder_backward(params.encoder, cache, dz)
    return breakdown, TbrGrads(enc_grads, dw0, ddelta)


def baseline_loss_and_grads(
    params: BaselineParams,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, BaselineGrads]:
    """Batch-mean squared error of the single-head model, with gradients."""
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise ValueError("empty batch")
    n = y.shape[0]
    z, cache = encoder_forward(params.encoder, x)
    resid = (z * params.w).sum(axis=1) - y
    loss = float(resid @ resid) / n
    dy = (2.0 / n) * resid
    dw = z.T @ dy
    dz = np.outer(dy, params.w)
    enc_grads, _ = encoder_backward(params.encoder, cache, dz)
    return loss, BaselineGrads(enc_grads, dw)
