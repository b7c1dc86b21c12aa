"""Randomized self-verification battery (no training involved).

Each check draws randomized instances and returns a report dict; the battery
aggregates them and is what ``treereg check-theory`` runs. The checks mirror
the theoretical claims the package relies on:

* non-permutation-scaling mixings strictly increase the non-zero count of
  one-sparse, column-covering mutation matrices, while permutation-scaling
  mixings preserve it exactly;
* every invertible matrix admits a permutation of non-zero entries
  (cross-checked against exhaustive enumeration at small sizes);
* hand-derived gradients match central finite differences;
* assignment-based disentanglement scores match exhaustive permutation
  search;
* the training penalty is invariant to joint latent permutations and behaves
  covariantly under per-latent rescaling.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import metrics
from .env_tree import build_balanced_binary
from .identifiability import (
    check_assumptions,
    find_nonzero_permutation,
    is_perm_scaling,
    l0_norm,
    mixing_verdict,
)
from .model import BaselineParams, TbrParams, baseline_loss_and_grads, tbr_loss_and_grads
from .numerics import EncoderParams, encoder_backward, encoder_forward

TOL = 1e-6


def random_one_sparse_delta(
    n_arcs: int, k: int, rng: np.random.Generator, min_mag: float = 0.05
) -> np.ndarray:
    """One non-zero per row, every column covered, magnitudes >= min_mag."""
    if n_arcs < k:
        raise ValueError("need at least as many arcs as latents to cover all columns")
    cols = np.concatenate([rng.permutation(k), rng.integers(0, k, size=n_arcs - k)])
    rng.shuffle(cols)
    values = (min_mag + np.abs(rng.normal(0.0, 0.5, size=n_arcs))) * rng.choice(
        [-1.0, 1.0], size=n_arcs
    )
    delta = np.zeros((n_arcs, k))
    delta[np.arange(n_arcs), cols] = values
    return delta


def random_perm_scaling(k: int, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(k)
    scales = (0.5 + rng.random(k)) * rng.choice([-1.0, 1.0], size=k)
    l = np.zeros((k, k))
    l[perm, np.arange(k)] = scales
    return l


def _random_mixing_matrix(k: int, rng: np.random.Generator) -> np.ndarray:
    """Invertible but not permutation-scaling: either dense Gaussian or a
    permutation-scaling matrix with one extra off-diagonal entry."""
    while True:
        if rng.random() < 0.5:
            l = rng.normal(size=(k, k))
        else:
            l = random_perm_scaling(k, rng)
            nz_row = {int(np.flatnonzero(l[:, j])[0]) for j in range(k)}
            r, c = int(rng.integers(k)), int(rng.integers(k))
            if int(np.flatnonzero(l[:, c])[0]) == r:
                continue
            l = l.copy()
            l[r, c] = (0.2 + rng.random()) * (1 if rng.random() < 0.5 else -1)
        if is_perm_scaling(l, TOL):
            continue
        if np.linalg.cond(l) < 1e8:
            return l


def check_sparsity_preservation(trials: int, rng: np.random.Generator) -> dict:
    """Strict increase under genuine mixing; exact preservation under
    permutation-scaling; no column ever loses a non-zero (one-sparse case)."""
    failures = []
    for t in range(trials):
        k = int(rng.integers(3, 7))
        n_arcs = int(rng.integers(k + 2, 3 * k + 4))
        delta = random_one_sparse_delta(n_arcs, k, rng)
        report = check_assumptions(delta, TOL)
        if not (report.one_sparse and report.sufficient_perturbations):
            failures.append({"trial": t, "reason": "bad construction"})
            continue

        l_mix = _random_mixing_matrix(k, rng)
        verdict = mixing_verdict(delta, l_mix, TOL)
        if verdict.l0_mixed <= verdict.l0_delta:
            failures.append({"trial": t, "reason": "mixing did not increase L0"})
        if any(verdict.lost_per_column):
            failures.append({"trial": t, "reason": "lost a non-zero under mixing"})

        l_ps = random_perm_scaling(k, rng)
        if l0_norm(delta @ l_ps, TOL) != l0_norm(delta, TOL):
            failures.append({"trial": t, "reason": "perm-scaling changed L0"})
        ps_verdict = mixing_verdict(delta, l_ps, TOL)
        if not (ps_verdict.perm_scaling and ps_verdict.implication_holds):
            failures.append({"trial": t, "reason": "perm-scaling verdict wrong"})
    return {"name": "sparsity_preservation", "trials": trials,
            "failures": failures, "passed": not failures}


def _random_invertible_with_zeros(k: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        l = rng.normal(size=(k, k))
        l[rng.random((k, k)) < 0.45] = 0.0
        if np.abs(np.linalg.det(l)) > 1e-9 and np.linalg.cond(l) < 1e8:
            return l


def _brute_force_nonzero_perm(l: np.ndarray) -> tuple[int, ...] | None:
    k = l.shape[0]
    for perm in itertools.permutations(range(k)):
        if all(abs(l[i, perm[i]]) > TOL for i in range(k)):
            return perm
    return None


def check_nonzero_permutation(trials: int, rng: np.random.Generator) -> dict:
    """Invertible matrices always yield a valid non-zero-entry permutation;
    exhaustive enumeration agrees at small sizes."""
    failures = []
    for t in range(trials):
        k = int(rng.integers(3, 8))
        l = _random_invertible_with_zeros(k, rng)
        try:
            perm = find_nonzero_permutation(l, TOL)
        except Exception as exc:  # matching must exist for invertible input
            failures.append({"trial": t, "reason": f"no matching: {exc}"})
            continue
        if not all(abs(l[i, perm[i]]) > TOL for i in range(k)):
            failures.append({"trial": t, "reason": "returned permutation invalid"})
        if k <= 7 and _brute_force_nonzero_perm(l) is None:
            failures.append({"trial": t, "reason": "brute force found none"})
    return {"name": "nonzero_permutation", "trials": trials,
            "failures": failures, "passed": not failures}


# ----------------------------------------------------------------------
# Gradient checks
# ----------------------------------------------------------------------
def _random_encoder(rng: np.random.Generator, d_in: int, hidden, k: int) -> EncoderParams:
    h1, h2 = hidden
    return EncoderParams(
        w1=rng.normal(0, 0.6, (d_in, h1)), b1=rng.normal(0, 0.3, h1),
        w2=rng.normal(0, 0.6, (h1, h2)), b2=rng.normal(0, 0.3, h2),
        w3=rng.normal(0, 0.6, (h2, k)), b3=rng.normal(0, 0.3, k),
    )


def central_difference_grads(fn, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of a list of arrays."""
    grads = []
    for idx, arr in enumerate(arrays):
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn(arrays)
            flat[i] = orig - h
            down = fn(arrays)
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def _max_rel_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check_gradients(draws: int, rng: np.random.Generator, rel_tol: float = 1e-4) -> dict:
    """Encoder, tree-model loss and baseline loss against central differences.

    Mutation entries are kept away from zero so the finite difference never
    straddles the absolute value's kink.
    """
    tree = build_balanced_binary(2)
    failures = []
    for t in range(draws):
        d_in, k = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        hidden = (int(rng.integers(3, 6)), int(rng.integers(3, 6)))
        n = int(rng.integers(3, 6))
        x = rng.normal(size=(n, d_in))
        enc = _random_encoder(rng, d_in, hidden, k)

        # encoder alone, probed through a fixed linear functional
        g_out = rng.normal(size=(n, k))

        def enc_value(arrays):
            p = enc.replace_arrays(arrays)
            z, _ = encoder_forward(p, x)
            return float((g_out * z).sum())

        z, cache = encoder_forward(enc, x)
        analytic, _ = encoder_backward(enc, cache, g_out)
        numeric = central_difference_grads(enc_value, [a.copy() for a in enc.arrays()])
        err = _max_rel_error(analytic.arrays(), numeric)
        if err > rel_tol:
            failures.append({"draw": t, "check": "encoder", "rel_error": err})

        # tree model loss
        env_ids = rng.integers(1, tree.n_nodes, size=n)
        y = rng.normal(size=n)
        lam = 0.37
        delta = (0.1 + np.abs(rng.normal(0, 0.5, (tree.n_arcs, k)))) * rng.choice(
            [-1.0, 1.0], size=(tree.n_arcs, k)
        )
        tbr = TbrParams(enc, rng.normal(size=k), delta)

        def tbr_value(arrays):
            p = tbr.replace_arrays(arrays)
            breakdown, _ = tbr_loss_and_grads(p, tree, x, env_ids, y, lam)
            return breakdown.total

        breakdown, grads = tbr_loss_and_grads(tbr, tree, x, env_ids, y, lam)
        numeric = central_difference_grads(tbr_value, [a.copy() for a in tbr.arrays()])
        err = _max_rel_error(grads.arrays(), numeric)
        if err > rel_tol:
            failures.append({"draw": t, "check": "tree_loss", "rel_error": err})

        # baseline loss
        base = BaselineParams(enc, rng.normal(size=k))

        def base_value(arrays):
            p = base.replace_arrays(arrays)
            loss, _ = baseline_loss_and_grads(p, x, y)
            return loss

        loss, bgrads = baseline_loss_and_grads(base, x, y)
        numeric = central_difference_grads(base_value, [a.copy() for a in base.arrays()])
        err = _max_rel_error(bgrads.arrays(), numeric)
        if err > rel_tol:
            failures.append({"draw": t, "check": "baseline_loss", "rel_error": err})
    return {"name": "gradient_checks", "draws": draws,
            "failures": failures, "passed": not failures}


def check_mcc_assignment(instances: int, rng: np.random.Generator, k: int = 5) -> dict:
    """Assignment-based score equals exhaustive permutation search."""
    failures = []
    for t in range(instances):
        n = int(rng.integers(20, 60))
        z = rng.normal(size=(n, k))
        mix = rng.normal(size=(k, k))
        z_hat = z @ mix + 0.3 * rng.normal(size=(n, k))
        brute = metrics.mcc(z_hat, z, method="brute")
        assigned = metrics.mcc(z_hat, z, method="assignment")
        if abs(brute.score - assigned.score) > 1e-12:
            failures.append({"instance": t, "brute": brute.score,
                             "assignment": assigned.score})
    return {"name": "mcc_assignment", "instances": instances,
            "failures": failures, "passed": not failures}


def check_penalty_invariance(draws: int, rng: np.random.Generator) -> dict:
    """Joint latent permutation leaves the loss unchanged; rescaling latent j
    (and dividing its head column) preserves predictions and divides its L1
    contribution, all at 1e-12."""
    tree = build_balanced_binary(2)
    failures = []
    for t in range(draws):
        d_in, k, n = 4, 4, 12
        enc = _random_encoder(rng, d_in, (5, 6), k)
        delta = rng.normal(0, 0.7, (tree.n_arcs, k))
        params = TbrParams(enc, rng.normal(size=k), delta)
        x = rng.normal(size=(n, d_in))
        env_ids = rng.integers(1, tree.n_nodes, size=n)
        y = rng.normal(size=n)
        lam = 0.11
        base, _ = tbr_loss_and_grads(params, tree, x, env_ids, y, lam)

        perm = rng.permutation(k)
        enc_p = EncoderParams(enc.w1, enc.b1, enc.w2, enc.b2,
                              enc.w3[:, perm], enc.b3[perm], enc.negative_slope)
        permuted = TbrParams(enc_p, params.w0[perm], params.delta[:, perm])
        got, _ = tbr_loss_and_grads(permuted, tree, x, env_ids, y, lam)
        if (abs(got.prediction_term - base.prediction_term) > 1e-12
                or abs(got.penalty_term - base.penalty_term) > 1e-12):
            failures.append({"draw": t, "check": "permutation"})

        j = int(rng.integers(k))
        c = float(rng.choice([-1.0, 1.0]) * (0.5 + rng.random() * 2.0))
        w3_s = enc.w3.copy(); w3_s[:, j] *= c
        b3_s = enc.b3.copy(); b3_s[j] *= c
        enc_s = EncoderParams(enc.w1, enc.b1, enc.w2, enc.b2, w3_s, b3_s,
                              enc.negative_slope)
        w0_s = params.w0.copy(); w0_s[j] /= c
        delta_s = params.delta.copy(); delta_s[:, j] /= c
        scaled = TbrParams(enc_s, w0_s, delta_s)
        got, _ = tbr_loss_and_grads(scaled, tree, x, env_ids, y, lam)
        col_l1 = np.abs(params.delta[:, j]).sum()
        expected_penalty = base.penalty_term - col_l1 + col_l1 / abs(c)
        if (abs(got.prediction_term - base.prediction_term) > 1e-12
                or abs(got.penalty_term - expected_penalty) > 1e-12):
            failures.append({"draw": t, "check": "scaling"})
    return {"name": "penalty_invariance", "draws": draws,
            "failures": failures, "passed": not failures}


@dataclass
class BatteryReport:
    checks: list[dict]

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def run_property_battery(
    seed: int = 0,
    trials: int = 200,
    matrices: int = 500,
    gradient_draws: int = 100,
    mcc_instances: int = 100,
    invariance_draws: int = 50,
) -> BatteryReport:
    checks = [
        check_sparsity_preservation(trials, np.random.default_rng([seed, 101])),
        check_nonzero_permutation(matrices, np.random.default_rng([seed, 102])),
        check_gradients(gradient_draws, np.random.default_rng([seed, 103])),
        check_mcc_assignment(mcc_instances, np.random.default_rng([seed, 104])),
        check_penalty_invariance(invariance_draws, np.random.default_rng([seed, 105])),
    ]
    return BatteryReport(checks)
