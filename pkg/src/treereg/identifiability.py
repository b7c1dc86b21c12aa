"""Sparsity-pattern algebra behind the disentanglement guarantee.

The core fact being exercised: if every mutation row has at most one
non-zero entry and every latent coordinate is perturbed somewhere, then any
invertible column mixing that does not increase the number of non-zero
mutation entries must be a permutation combined with per-column scaling.
This module makes each ingredient executable — the pattern operators, the
nonzero-permutation existence property of invertible matrices, the
permutation-scaling test, and a structured verdict with the per-column
lost/gained diagnostics used in the argument — plus a linear probe that fits
the best linear map between a learned and a true representation.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .numerics import ols_solve

DEFAULT_TOL = 1e-6  # exact-arithmetic checks
LEARNED_TOL = 0.1  # learned matrices, after max-abs row normalization


class SingularMatrixError(ValueError):
    """The matrix is numerically singular at the working tolerance."""


@dataclass(frozen=True)
class SparsityPattern:
    """Index set of entries with magnitude above ``tol``."""

    indices: frozenset[tuple[int, int]]
    shape: tuple[int, int]
    tol: float

    @classmethod
    def of(cls, m: np.ndarray, tol: float = DEFAULT_TOL) -> "SparsityPattern":
        m = np.asarray(m)
        if tol < 0:
            raise ValueError("tol must be non-negative")
        rows, cols = np.nonzero(np.abs(m) > tol)
        return cls(frozenset(zip(rows.tolist(), cols.tolist())), m.shape, tol)

    def __len__(self) -> int:
        return len(self.indices)


def l0_norm(m: np.ndarray, tol: float = DEFAULT_TOL) -> int:
    """Number of entries with magnitude above ``tol``."""
    if tol < 0:
        raise ValueError("tol must be non-negative")
    return int((np.abs(np.asarray(m)) > tol).sum())


@dataclass
class AssumptionReport:
    """Which structural conditions a mutation matrix satisfies.

    ``one_sparse``: every row has at most one entry above tolerance.
    ``sufficient_perturbations``: every column has at least one.
    ``witness_arcs[j]``: a row index witnessing column j's perturbation, or
    None when the column is untouched. ``violating_rows`` lists rows with
    two or more non-zeros.
    """

    one_sparse: bool
    sufficient_perturbations: bool
    witness_arcs: tuple[int | None, ...]
    violating_rows: tuple[int, ...]


def check_assumptions(delta: np.ndarray, tol: float = DEFAULT_TOL) -> AssumptionReport:
    delta = np.asarray(delta, dtype=np.float64)
    nz = np.abs(delta) > tol
    row_counts = nz.sum(axis=1)
    violating = tuple(int(i) for i in np.flatnonzero(row_counts > 1))
    witnesses: list[int | None] = []
    for j in range(delta.shape[1]):
        rows = np.flatnonzero(nz[:, j])
        witnesses.append(int(rows[0]) if rows.size else None)
    return AssumptionReport(
        one_sparse=len(violating) == 0,
        sufficient_perturbations=all(w is not None for w in witnesses),
        witness_arcs=tuple(witnesses),
        violating_rows=violating,
    )


def find_nonzero_permutation(l: np.ndarray, tol: float = DEFAULT_TOL) -> tuple[int, ...]:
    """A permutation pi with |l[i, pi(i)]| > tol for every row i.

    Any invertible matrix admits one (a non-zero determinant has a non-zero
    expansion term); found via maximum bipartite matching on the non-zero
    pattern. Raises :class:`SingularMatrixError` when no perfect matching of
    non-zero entries exists.
    """
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ValueError("matrix must be square")
    nz = (np.abs(l) > tol).astype(np.float64)
    row, col = linear_sum_assignment(nz, maximize=True)
    if nz[row, col].sum() < l.shape[0]:
        raise SingularMatrixError(
            "no permutation of non-zero entries: matrix is numerically "
            f"singular at tol={tol}"
        )
    perm = np.empty(l.shape[0], dtype=np.int64)
    perm[row] = col
    return tuple(int(p) for p in perm)


def is_perm_scaling(l: np.ndarray, tol: float = DEFAULT_TOL) -> bool:
    """True iff exactly one entry per row and per column exceeds ``tol``."""
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ValueError("matrix must be square")
    nz = np.abs(l) > tol
    return bool(np.all(nz.sum(axis=0) == 1) and np.all(nz.sum(axis=1) == 1))


def normalize_rows_maxabs(l: np.ndarray) -> np.ndarray:
    """Scale each row by its largest magnitude (for learned-matrix verdicts)."""
    l = np.asarray(l, dtype=np.float64)
    scale = np.abs(l).max(axis=1, keepdims=True)
    if np.any(scale == 0.0):
        raise SingularMatrixError("zero row cannot be normalized")
    return l / scale


@dataclass
class MixingVerdict:
    """Outcome of mixing a mutation matrix by an invertible matrix.

    When ``assumptions_hold`` and ``sparsity_nonincreasing`` are both true,
    the theory forces ``perm_scaling``; ``implication_holds`` exposes exactly
    that implication for testing. ``lost_per_column``/``gained_per_column``
    count, per column of the mixed matrix under the matched permutation, the
    non-zeros that disappeared and appeared (the proof shows the former is
    always empty for one-sparse inputs).
    """

    assumptions_hold: bool
    sparsity_nonincreasing: bool
    perm_scaling: bool
    l0_delta: int
    l0_mixed: int
    column_permutation: tuple[int, ...]
    lost_per_column: tuple[int, ...]
    gained_per_column: tuple[int, ...]

    @property
    def implication_holds(self) -> bool:
        return self.perm_scaling or not (
            self.assumptions_hold and self.sparsity_nonincreasing
        )

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["implication_holds"] = self.implication_holds
        return json.dumps(d, sort_keys=True)


def mixing_verdict(
    delta: np.ndarray, l: np.ndarray, tol: float = DEFAULT_TOL
) -> MixingVerdict:
    """Evaluate the disentanglement implication on a concrete (delta, l) pair."""
    delta = np.asarray(delta, dtype=np.float64)
    l = np.asarray(l, dtype=np.float64)
    if delta.ndim != 2 or l.shape[0] != delta.shape[1]:
        raise ValueError("l must be square with size equal to delta's column count")
    mixed = delta @ l
    report = check_assumptions(delta, tol)
    l0_delta = l0_norm(delta, tol)
    l0_mixed = l0_norm(mixed, tol)

    # Column matching: column i of the mixed matrix receives a non-zero
    # multiple of column perm[i] of the original (perm[i] is the row of a
    # non-zero entry of l in column i).
    perm = find_nonzero_permutation(l.T, tol)

    lost, gained = [], []
    for i in range(delta.shape[1]):
        src = np.abs(delta[:, perm[i]]) > tol
        dst = np.abs(mixed[:, i]) > tol
        lost.append(int(np.count_nonzero(src & ~dst)))
        gained.append(int(np.count_nonzero(~src & dst)))

    return MixingVerdict(
        assumptions_hold=report.one_sparse and report.sufficient_perturbations,
        sparsity_nonincreasing=l0_mixed <= l0_delta,
        perm_scaling=is_perm_scaling(l, tol),
        l0_delta=l0_delta,
        l0_mixed=l0_mixed,
        column_permutation=perm,
        lost_per_column=tuple(lost),
        gained_per_column=tuple(gained),
    )


def fit_linear_map(z_hat: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares ``l_hat`` aligning representations: z ~= z_hat @ l_hat.T.

    Row convention: each true latent vector is approximately ``l_hat`` applied
    to the estimated one. The relative Frobenius residual is the empirical
    probe for identification up to an invertible linear map — near zero means
    the learned representation spans the true latents linearly.
    """
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z_hat.shape != z.shape:
        raise ValueError("representations must have equal shapes")
    n, k = z_hat.shape
    if n < k:
        raise ValueError("need at least as many samples as latents")
    b = np.column_stack([ols_solve(z_hat, z[:, j]) for j in range(k)])
    resid = z - z_hat @ b
    denom = float(np.linalg.norm(z))
    rel = float(np.linalg.norm(resid)) / denom if denom > 0 else 0.0
    return b.T, rel
