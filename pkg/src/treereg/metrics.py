"""Evaluation metrics: disentanglement, prediction error, and causal-effect
recovery.

The disentanglement score matches estimated to true latents with the
permutation maximizing the mean absolute Pearson correlation; 1.0 means the
representation equals the truth up to per-coordinate reordering and scaling.
Causal-effect recovery regresses the target on column-standardized
representations and compares absolute coefficients after the same matching,
so it is exactly zero on permutation-scaling transforms.
"""
from __future__ import annotations

import csv
import itertools
import os
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import ols_solve


@dataclass
class MccResult:
    score: float
    permutation: tuple[int, ...]  # true latent i is matched to estimate permutation[i]
    per_latent: np.ndarray  # matched |Pearson| per true latent

    def __float__(self) -> float:
        return self.score


def abs_pearson_matrix(z_hat: np.ndarray, z: np.ndarray) -> np.ndarray:
    """C[a, b] = |Pearson(z_hat[:, a], z[:, b])|, with 0 for constant columns."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z_hat.shape != z.shape:
        raise ValueError(f"shape mismatch: {z_hat.shape} vs {z.shape}")
    if z_hat.ndim != 2 or z_hat.shape[0] < 3:
        raise ValueError("need 2-d inputs with at least 3 rows")
    if not (np.all(np.isfinite(z_hat)) and np.all(np.isfinite(z))):
        raise ValueError("non-finite representation values")
    a = z_hat - z_hat.mean(axis=0)
    b = z - z.mean(axis=0)
    sa = np.sqrt((a * a).sum(axis=0))
    sb = np.sqrt((b * b).sum(axis=0))
    cov = a.T @ b
    denom = np.outer(sa, sb)
    c = np.zeros_like(cov)
    ok = denom > 0.0
    c[ok] = np.abs(cov[ok] / denom[ok])
    return c


def mcc(z_hat: np.ndarray, z: np.ndarray, method: str = "auto") -> MccResult:
    """Best-permutation mean absolute Pearson correlation.

    Solved exactly: exhaustive search for up to 8 latents, optimal assignment
    on the correlation matrix above that (``method`` can force either path).
    """
    c = abs_pearson_matrix(z_hat, z)
    k = c.shape[0]
    if method not in ("auto", "brute", "assignment"):
        raise ValueError("method must be auto, brute or assignment")
    use_brute = method == "brute" or (method == "auto" and k <= 8)
    if use_brute:
        best_score = -1.0
        best_perm: tuple[int, ...] | None = None
        for perm in itertools.permutations(range(k)):
            s = sum(c[perm[i], i] for i in range(k))
            if s > best_score:
                best_score = s
                best_perm = perm
        perm = best_perm
    else:
        # rows = true latents, columns = estimated latents; maximize total |r|
        row, col = linear_sum_assignment(c.T, maximize=True)
        perm = tuple(int(col[np.where(row == i)[0][0]]) for i in range(k))
    per_latent = np.array([c[perm[i], i] for i in range(k)])
    return MccResult(float(per_latent.mean()), tuple(perm), per_latent)


def mse(y_hat: np.ndarray, y: np.ndarray) -> float:
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ValueError("length mismatch")
    if y_hat.size == 0:
        raise ValueError("empty inputs")
    d = y_hat - y
    return float(d @ d) / y.size


def standardize_columns(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    mean = m.mean(axis=0)
    std = m.std(axis=0)
    if np.any(std == 0.0):
        raise ValueError("constant column cannot be standardized")
    return (m - mean) / std


def estimate_ate(z_repr: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-latent effect sizes: OLS slopes of y on standardized columns.

    With the target linear in the latents, the regression coefficients
    identify the average effect of raising one latent while holding the
    others fixed.
    """
    z_std = standardize_columns(z_repr)
    design = np.column_stack([np.ones(z_std.shape[0]), z_std])
    beta = ols_solve(design, y)
    return beta[1:]


@dataclass
class AteResult:
    estimated: np.ndarray  # |coefficients| from the candidate representation
    reference: np.ndarray  # |coefficients| from the ground-truth latents
    permutation: tuple[int, ...]
    mse: float


def ate_details(
    z_hat: np.ndarray,
    z: np.ndarray,
    y: np.ndarray,
    permutation: tuple[int, ...] | None = None,
) -> AteResult:
    """Absolute standardized effect sizes of both representations, matched by
    the disentanglement permutation, and their mean squared difference."""
    if permutation is None:
        permutation = mcc(z_hat, z).permutation
    est = np.abs(estimate_ate(z_hat, y))
    ref = np.abs(estimate_ate(z, y))
    est_matched = est[list(permutation)]
    d = est_matched - ref
    return AteResult(est_matched, ref, tuple(permutation), float(d @ d) / d.size)


def ate_recovery_error(z_hat: np.ndarray, z: np.ndarray, y: np.ndarray) -> float:
    return ate_details(z_hat, z, y).mse


# ----------------------------------------------------------------------
# Result rows
# ----------------------------------------------------------------------
EVAL_CSV_COLUMNS = (
    "run_id", "seed", "S", "model", "mcc", "test_mse", "ate_mse",
    "l0_delta_hat", "l1_delta_hat", "k_hat",
)


@dataclass
class EvalReport:
    run_id: str
    seed: int
    s: float
    model: str
    mcc: float
    test_mse: float
    ate_mse: float
    l0_delta_hat: int | None  # None for the baseline model
    l1_delta_hat: float | None
    k_hat: int

    def csv_row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)

        return [
            self.run_id, str(self.seed), fmt(self.s), self.model,
            repr(self.mcc), repr(self.test_mse), repr(self.ate_mse),
            fmt(self.l0_delta_hat), fmt(self.l1_delta_hat), str(self.k_hat),
        ]


def append_eval_reports(path, reports: list[EvalReport]) -> None:
    """Append rows to the metrics CSV, writing the header on first use."""
    new_file = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(EVAL_CSV_COLUMNS)
        for r in reports:
            writer.writerow(r.csv_row())
