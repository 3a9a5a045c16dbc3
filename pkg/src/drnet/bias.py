"""Incidental-parameter bias components and corrected estimators.

Two-way fixed-effects estimates of the threshold coefficients and the
counterfactual distribution carry a first-order bias of order I/n + J/n.
This module evaluates the plug-in estimates of the four primitive bias
terms (per-sender and per-receiver, for coefficients and for the
distribution level), assembles the corrected series, and applies the
shape restrictions (rearrangement and winsorization to [0, 1]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import SingularSystemError
from .felogit import SolverOptions, ThresholdFit, profiled_fixed_effects
from .panel import DyadPanel, ThresholdGrid
from .projections import ProjectionSet
from .twoway import _group_sums

__all__ = ["BiasComponents", "DistributionEstimate", "bias_components",
           "correct_beta", "correct_distribution", "shape_restrict"]


@dataclass(frozen=True)
class BiasComponents:
    """Plug-in bias terms at one threshold; vectors over counterfactual
    levels follow the order of `ks`."""

    ks: tuple
    B_beta: np.ndarray    # (d,)
    D_beta: np.ndarray
    B_lambda: np.ndarray  # (|ks|,)
    D_lambda: np.ndarray
    B_F: np.ndarray
    D_F: np.ndarray
    n_active_senders: int
    n_active_receivers: int


def _group_ratio_mean(idx, numer, denom_w, size, active_mask):
    """Mean over active units of (group sum of numer) / (group sum of
    denom_w); numer may be a matrix."""
    denom = _group_sums(idx, denom_w, size)
    if numer.ndim == 1:
        sums = _group_sums(idx, numer, size)
        return (sums[active_mask] / denom[active_mask]).mean()
    sums = _group_sums(idx, numer, size)
    return (sums[active_mask] / denom[active_mask, None]).mean(axis=0)


def bias_components(panel: DyadPanel, fit: ThresholdFit,
                    proj: ProjectionSet) -> BiasComponents:
    """Evaluate the four primitive bias terms by per-unit group sums.

    Separated (clamped) units are excluded from the unit averages, with
    the average renormalized by the active-unit counts; their near-flat
    likelihood makes the group ratios 0/0-unstable.
    """
    I, J = panel.n_senders, panel.n_receivers
    act_s = ~fit.clamped_senders
    act_r = ~fit.clamped_receivers
    if not act_s.any() or not act_r.any():
        raise SingularSystemError("no active units left for bias averages")
    sender, receiver = panel.sender, panel.receiver
    lam, lam2 = proj.lam, proj.lam2

    try:
        w_inv = np.linalg.inv(proj.W)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"W(y) singular at threshold y={fit.threshold!r}") from exc

    num_x = lam2[:, None] * proj.tilde_x
    B_beta = -0.5 * w_inv @ _group_ratio_mean(sender, num_x, lam, I, act_s)
    D_beta = -0.5 * w_inv @ _group_ratio_mean(receiver, num_x, lam, J, act_r)

    B_lam = np.empty(len(proj.ks))
    D_lam = np.empty(len(proj.ks))
    for pos, k in enumerate(proj.ks):
        num = proj.lam2_k[k] - lam2 * proj.psi[k]
        B_lam[pos] = 0.5 * _group_ratio_mean(sender, num, lam, I, act_s)
        D_lam[pos] = 0.5 * _group_ratio_mean(receiver, num, lam, J, act_r)

    B_F = B_lam + proj.dF_dbeta @ B_beta
    D_F = D_lam + proj.dF_dbeta @ D_beta
    return BiasComponents(ks=proj.ks, B_beta=B_beta, D_beta=D_beta,
                          B_lambda=B_lam, D_lambda=D_lam, B_F=B_F, D_F=D_F,
                          n_active_senders=int(act_s.sum()),
                          n_active_receivers=int(act_r.sum()))


def correct_beta(fit: ThresholdFit, comps: BiasComponents, I: int, J: int,
                 n: int) -> np.ndarray:
    """beta - (I/n) B - (J/n) D."""
    return fit.beta - (I / n) * comps.B_beta - (J / n) * comps.D_beta


def correct_distribution(panel: DyadPanel, fit: ThresholdFit,
                         comps: BiasComponents, counterfactuals: dict,
                         variant: str = "star",
                         opts: SolverOptions = SolverOptions()):
    """Corrected per-level distribution values at one threshold.

    variant 'tilde' subtracts the full assembled bias from the plug-in
    average; 'star' re-solves the fixed effects at the corrected
    coefficients and subtracts only the level terms.  Returns
    (F_hat, F_corrected) as arrays over comps.ks.
    """
    I, J, n = panel.n_senders, panel.n_receivers, panel.n
    s, r = panel.sender, panel.receiver
    f_hat = np.array([
        expit(counterfactuals[k] @ fit.beta + fit.alpha[s]
              + fit.gamma[r]).mean()
        for k in comps.ks])
    if variant == "tilde":
        corrected = f_hat - (I / n) * comps.B_F - (J / n) * comps.D_F
        return f_hat, corrected
    if variant != "star":
        raise ValueError(f"unknown variant {variant!r}")
    beta_t = correct_beta(fit, comps, I, J, n)
    alpha_t, gamma_t = profiled_fixed_effects(panel, fit, beta_t, opts=opts)
    corrected = np.array([
        expit(counterfactuals[k] @ beta_t + alpha_t[s]
              + gamma_t[r]).mean()
        for k in comps.ks])
    corrected = corrected - (I / n) * comps.B_lambda - (J / n) * comps.D_lambda
    return f_hat, corrected


def shape_restrict(series: np.ndarray) -> np.ndarray:
    """Rearrange to nondecreasing order and winsorize to [0, 1]."""
    return np.clip(np.sort(np.asarray(series, dtype=float)), 0.0, 1.0)


@dataclass(frozen=True)
class DistributionEstimate:
    """Counterfactual distribution series over a grid, one row per level
    in ks: uncorrected (F_hat), corrected (F_corrected, tilde or star per
    `variant`), shape-restricted (F_shaped), with pointwise standard
    errors filled in by the inference step."""

    grid: ThresholdGrid
    ks: tuple
    variant: str
    F_hat: np.ndarray        # (|ks|, G)
    F_corrected: np.ndarray
    F_shaped: np.ndarray
    se: np.ndarray | None = None

    @classmethod
    def assemble(cls, grid, ks, variant, f_hat_cols, f_corr_cols, se=None):
        """Build from per-threshold column arrays (lists over the grid)."""
        F_hat = np.column_stack(f_hat_cols)
        F_corr = np.column_stack(f_corr_cols)
        F_shaped = np.vstack([shape_restrict(row) for row in F_corr])
        return cls(grid=grid, ks=tuple(ks), variant=variant, F_hat=F_hat,
                   F_corrected=F_corr, F_shaped=F_shaped, se=se)
