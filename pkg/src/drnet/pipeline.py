"""Grid-level orchestration: fit, correct, and prepare inference inputs.

One pass over the threshold grid produces everything the band
construction, the quantile transforms, and the Monte Carlo harness
consume: per-threshold fits, bias-corrected series, influence arrays, and
standard errors under both clustering modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bias import bias_components, correct_beta, correct_distribution
from .felogit import SolverOptions, fit_all, hessian
from .inference import (BootstrapResult, InfluenceSet, MultiplierScheme,
                        influence, multiplier_bootstrap, standard_errors)
from .panel import DyadPanel, ThresholdGrid
from .projections import projection_set

__all__ = ["GridResults", "run_grid", "bootstrap_grid"]


@dataclass(frozen=True)
class GridResults:
    """Stacked per-threshold estimation output over a grid."""

    grid: ThresholdGrid
    ks: tuple
    variant: str
    fits: tuple
    influences: tuple                 # InfluenceSet per threshold
    beta_hat: np.ndarray              # (G, d)
    beta_tilde: np.ndarray            # (G, d)
    F_hat: np.ndarray                 # (G, |ks|)
    F_corrected: np.ndarray           # (G, |ks|)
    sigma_beta: dict                  # mode -> (G, d)
    sigma_F: dict                     # mode -> (G, |ks|)
    phi_grid: np.ndarray              # (G, n, |ks|)
    n_clamped: np.ndarray             # (G,)

    @property
    def n_thresholds(self) -> int:
        return len(self.fits)


def run_grid(panel: DyadPanel, grid: ThresholdGrid, counterfactuals: dict,
             opts: SolverOptions = SolverOptions(), variant: str = "star",
             cluster_modes=("independent", "pairwise")) -> GridResults:
    """Fit every threshold and assemble corrected series and influences.

    Raises on any threshold failure; callers wanting partial grids should
    call fit_all themselves and subset the grid first.
    """
    gridfit = fit_all(panel, grid, opts=opts).require_complete()
    ks = tuple(sorted(counterfactuals))
    recip = panel.reciprocal_rows if "pairwise" in cluster_modes else None

    G, d, nK = len(grid), panel.d_x, len(ks)
    beta_hat = np.empty((G, d))
    beta_tilde = np.empty((G, d))
    F_hat = np.empty((G, nK))
    F_corr = np.empty((G, nK))
    sigma_beta = {m: np.empty((G, d)) for m in cluster_modes}
    sigma_F = {m: np.empty((G, nK)) for m in cluster_modes}
    phi_grid = np.empty((G, panel.n, nK))
    n_clamped = np.empty(G, dtype=int)
    influences = []

    for g, fit in enumerate(gridfit.fits):
        proj = projection_set(panel, fit, counterfactuals)
        comps = bias_components(panel, fit, proj)
        beta_hat[g] = fit.beta
        beta_tilde[g] = correct_beta(fit, comps, panel.n_senders,
                                     panel.n_receivers, panel.n)
        F_hat[g], F_corr[g] = correct_distribution(
            panel, fit, comps, counterfactuals, variant=variant, opts=opts)
        infl = influence(panel, fit, hessian(fit, panel), counterfactuals)
        influences.append(infl)
        phi_grid[g] = infl.phi
        for mode in cluster_modes:
            sigma_beta[mode][g], sigma_F[mode][g] = standard_errors(
                infl, panel.n, mode, recip=recip)
        n_clamped[g] = fit.n_clamped

    return GridResults(grid=grid, ks=ks, variant=variant,
                       fits=gridfit.fits, influences=tuple(influences),
                       beta_hat=beta_hat, beta_tilde=beta_tilde,
                       F_hat=F_hat, F_corrected=F_corr,
                       sigma_beta=sigma_beta, sigma_F=sigma_F,
                       phi_grid=phi_grid, n_clamped=n_clamped)


def bootstrap_grid(panel: DyadPanel, results: GridResults, seed: int,
                   n_draws: int, cluster_mode: str, levels=(0.95,),
                   coef_set=None):
    """Multiplier bootstrap critical values for a completed grid."""
    scheme = MultiplierScheme(panel, seed, cluster_mode, n_draws)
    boot = multiplier_bootstrap(
        scheme, list(results.influences),
        results.sigma_beta[cluster_mode], results.sigma_F[cluster_mode],
        levels=levels, coef_set=coef_set)
    return boot, scheme
