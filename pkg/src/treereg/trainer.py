"""Mini-batch training loop, validation-based selection, and grid sweeps."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .env_tree import EnvTree
from .model import (
    BaselineParams,
    TbrParams,
    baseline_loss_and_grads,
    predict,
    tbr_loss_and_grads,
)
from .numerics import AdamState, adam_step, init_encoder
from .simulator import MultiEnvDataset, split_dataset  # noqa: F401  (re-export)

_STREAM_INIT = 10
_STREAM_BATCH = 11


class TrainingDiverged(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    model_kind: str = "tbr"  # "tbr" | "baseline"
    learning_rate: float = 1e-3
    lam: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 200
    seed: int = 0
    k_hat: int | None = None  # None: use the data's latent dimension
    hidden: tuple[int, int] = (256, 64)
    patience: int | None = 25  # epochs without val improvement; None disables
    freeze_encoder: bool = False
    freeze_delta: bool = False

    def __post_init__(self):
        if self.model_kind not in ("tbr", "baseline"):
            raise ValueError("model_kind must be 'tbr' or 'baseline'")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning_rate, batch_size and max_epochs must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")

    def to_json_dict(self) -> dict:
        d = self.__dict__.copy()
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainReport:
    params: TbrParams | BaselineParams  # best-epoch checkpoint
    final_params: TbrParams | BaselineParams  # last epoch reached
    train_losses: list[float]  # per-epoch mean total training loss
    val_losses: list[float]  # per-epoch validation prediction MSE
    val_objectives: list[float]  # prediction MSE + lam * penalty (selection metric)
    selected_epoch: int
    wall_clock_seconds: float
    config: TrainConfig

    @property
    def selected_val_loss(self) -> float:
        return self.val_losses[self.selected_epoch]

    @property
    def selected_val_objective(self) -> float:
        return self.val_objectives[self.selected_epoch]


def _init_params(config: TrainConfig, d_x: int, k_hat: int, n_arcs: int):
    # The encoder draw is identical for both model kinds under the same seed,
    # and heads start at zero, so a tree model with frozen zero mutations
    # follows the baseline trajectory step for step.
    rng = np.random.default_rng([config.seed, _STREAM_INIT])
    encoder = init_encoder(d_x, k_hat, rng, hidden=config.hidden)
    if config.model_kind == "baseline":
        return BaselineParams(encoder, np.zeros(k_hat))
    return TbrParams(encoder, np.zeros(k_hat), np.zeros((n_arcs, k_hat)))


def _val_mse(params, tree, dataset, idx, chunk=8192) -> float:
    total = 0.0
    for start in range(0, idx.size, chunk):
        sl = idx[start : start + chunk]
        y_hat = predict(params, tree, dataset.x[sl], dataset.env_ids[sl])
        d = y_hat - dataset.y[sl]
        total += float(d @ d)
    return total / idx.size


def train(dataset: MultiEnvDataset, tree: EnvTree, config: TrainConfig) -> TrainReport:
    """Adam over shuffled mixed-environment batches with best-epoch selection.

    Returns the parameters of the epoch with the lowest validation objective:
    validation prediction MSE plus the weighted mutation penalty. The penalty
    must take part in selection because prediction error alone is flat across
    entangled and disentangled solutions; the sparsest point on the plateau
    is the one the objective actually prefers. For the baseline (no penalty)
    this reduces to validation prediction MSE. Raises
    :class:`TrainingDiverged` on non-finite losses or gradients. The test
    split is never read.
    """
    t0 = time.perf_counter()
    train_idx = dataset.split_indices("train")
    val_idx = dataset.split_indices("val")
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("dataset needs non-empty train and val splits")
    k_hat = config.k_hat if config.k_hat is not None else dataset.z_dim

    params = _init_params(config, dataset.d_x, k_hat, tree.n_arcs)
    adam = AdamState.init(params.arrays(), config.learning_rate)
    batch_rng = np.random.default_rng([config.seed, _STREAM_BATCH])

    is_tbr = config.model_kind == "tbr"
    best_params = params.copy()
    best_objective = np.inf
    best_epoch = 0
    train_losses: list[float] = []
    val_losses: list[float] = []
    val_objectives: list[float] = []
    stale = 0

    for epoch in range(config.max_epochs):
        order = batch_rng.permutation(train_idx)
        epoch_losses = []
        for start in range(0, order.size, config.batch_size):
            sl = order[start : start + config.batch_size]
            if is_tbr:
                breakdown, grads = tbr_loss_and_grads(
                    params, tree, dataset.x[sl], dataset.env_ids[sl],
                    dataset.y[sl], config.lam,
                )
                loss = breakdown.total
            else:
                loss, grads = baseline_loss_and_grads(
                    params, dataset.x[sl], dataset.y[sl]
                )
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at epoch {epoch}, sample offset {start}"
                )
            grad_arrays = grads.arrays()
            if config.freeze_encoder:
                for i in range(6):
                    grad_arrays[i] = np.zeros_like(grad_arrays[i])
            if is_tbr and config.freeze_delta:
                grad_arrays[7] = np.zeros_like(grad_arrays[7])
            try:
                new_arrays, adam = adam_step(adam, params.arrays(), grad_arrays)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"epoch {epoch}: {exc}") from exc
            params = params.replace_arrays(new_arrays)
            epoch_losses.append(loss)
        train_losses.append(float(np.mean(epoch_losses)))

        val = _val_mse(params, tree, dataset, val_idx)
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite validation MSE at epoch {epoch}")
        val_losses.append(val)
        objective = val
        if is_tbr:
            objective += config.lam * float(np.abs(params.delta).sum())
        val_objectives.append(objective)
        if objective < best_objective:
            best_objective = objective
            best_epoch = epoch
            best_params = params.copy()
            stale = 0
        else:
            stale += 1
            if config.patience is not None and stale >= config.patience:
                break

    return TrainReport(
        params=best_params,
        final_params=params,
        train_losses=train_losses,
        val_losses=val_losses,
        val_objectives=val_objectives,
        selected_epoch=best_epoch,
        wall_clock_seconds=time.perf_counter() - t0,
        config=config,
    )


@dataclass
class SweepResult:
    best: TrainReport
    table: list[dict]  # one row per grid entry: config, val MSE or failure
    failures: list[dict] = field(default_factory=list)


def sweep(dataset: MultiEnvDataset, tree: EnvTree, grid: list[TrainConfig]) -> SweepResult:
    """Train every config; pick the lowest validation MSE.

    Exact ties go to the larger penalty weight (prefer the sparser model).
    Diverged configs are excluded from selection but recorded.
    """
    if not grid:
        raise ValueError("empty sweep grid")
    table: list[dict] = []
    failures: list[dict] = []
    candidates: list[tuple[float, float, int, TrainReport]] = []
    for i, config in enumerate(grid):
        entry = {"index": i, "config": config.to_json_dict()}
        try:
            report = train(dataset, tree, config)
        except TrainingDiverged as exc:
            entry["status"] = "diverged"
            entry["error"] = str(exc)
            failures.append(entry)
        else:
            entry["status"] = "ok"
            entry["val_mse"] = report.selected_val_loss
            entry["selected_epoch"] = report.selected_epoch
            candidates.append((report.selected_val_loss, -config.lam, i, report))
        table.append(entry)
    if not candidates:
        raise TrainingDiverged("every sweep configuration diverged")
    candidates.sort(key=lambda t: (t[0], t[1], t[2]))
    return SweepResult(best=candidates[0][3], table=table, failures=failures)
