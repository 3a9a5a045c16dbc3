"""Weight-projected covariates and the matrices built from them.

At a converged threshold fit with weights L1 = Lambda'(pi), each covariate
column is projected onto additive sender/receiver surfaces under the L1
metric; the residuals x~ and the fitted ratio surface Psi feed both the
bias formulas and the asymptotic variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import SingularSystemError
from .felogit import ThresholdFit
from .panel import DyadPanel
from .twoway import TwoWaySystem

__all__ = ["ProjectionSet", "project_covariates", "project_psi",
           "compute_W_and_dF", "projection_set"]


@dataclass(frozen=True)
class ProjectionSet:
    """Per-threshold projections and derived matrices.

    ks orders the counterfactual levels; psi, tilde_xk, lam_k, lam2_k are
    keyed by level.  lam / lam2 are the first two sigmoid derivatives at
    the fitted index, lam_k / lam2_k at the counterfactual index.
    """

    ks: tuple
    tilde_x: np.ndarray            # (n, d)
    tilde_xk: dict
    psi: dict
    lam: np.ndarray                # (n,)
    lam2: np.ndarray
    lam_k: dict
    lam2_k: dict
    prob_k: dict
    W: np.ndarray                  # (d, d)
    dF_dbeta: np.ndarray           # (|ks|, d), rows follow ks


def _derivatives(prob):
    lam = prob * (1.0 - prob)
    return lam, lam * (1.0 - 2.0 * prob)


def project_covariates(panel: DyadPanel, fit: ThresholdFit,
                       counterfactuals: dict, weights=None):
    """Two-way weighted projection of the covariates.

    Returns (tilde_x, tilde_xk) where tilde_xk subtracts the projection
    coefficients of the observed covariates from each counterfactual
    matrix (the counterfactual matrices are not projected themselves).
    Plug-in weights come from the fit; passing a synthetic fit built from
    true parameters evaluates everything at the true indices instead.
    """
    if weights is None:
        weights = fit.prob * (1.0 - fit.prob)
    system = TwoWaySystem(panel.sender, panel.receiver, panel.n_senders,
                          panel.n_receivers, weights)
    a, c, tilde_x = system.project(panel.covariates)
    tilde_xk = {k: xk - a[panel.sender] - c[panel.receiver]
                for k, xk in counterfactuals.items()}
    return tilde_x, tilde_xk


def project_psi(panel: DyadPanel, fit: ThresholdFit, lam: np.ndarray,
                lam_k: np.ndarray, is_null: bool) -> np.ndarray:
    """Fitted additive surface of the weight ratio lam_k / lam.

    The null counterfactual projects the constant 1, whose weighted
    two-way fit is exactly 1; short-circuit keeps it bit-exact.
    """
    if is_null:
        return np.ones(panel.n)
    # dyads between two same-direction clamped units can carry weight
    # exactly 0; their ratio value is arbitrary since the weight kills it
    ratio = np.zeros_like(lam)
    pos = lam > 0.0
    ratio[pos] = lam_k[pos] / lam[pos]
    system = TwoWaySystem(panel.sender, panel.receiver, panel.n_senders,
                          panel.n_receivers, lam)
    a, c, _ = system.project(ratio)
    return a[panel.sender] + c[panel.receiver]


def compute_W_and_dF(panel, lam, tilde_x, lam_k, tilde_xk, ks):
    """W = n^-1 sum lam x~ x~' and the stacked rows n^-1 sum lam_k x~_k'."""
    n = panel.n
    W = (tilde_x * lam[:, None]).T @ tilde_x / n
    dF = np.vstack([(lam_k[k][:, None] * tilde_xk[k]).sum(axis=0) / n
                    for k in ks])
    return W, dF


def projection_set(panel: DyadPanel, fit: ThresholdFit,
                   counterfactuals: dict) -> ProjectionSet:
    """All projection quantities at one threshold.

    counterfactuals maps level k to its covariate matrix; a value that is
    the panel's own covariate array is recognized as the null
    counterfactual.
    """
    lam, lam2 = _derivatives(fit.prob)
    ks = tuple(sorted(counterfactuals))
    tilde_x, tilde_xk = project_covariates(panel, fit, counterfactuals,
                                           weights=lam)
    psi, lam_k, lam2_k, prob_k = {}, {}, {}, {}
    for k in ks:
        xk = counterfactuals[k]
        if xk is panel.covariates or np.array_equal(xk, panel.covariates):
            prob_k[k] = fit.prob
            lam_k[k], lam2_k[k] = lam, lam2
            psi[k] = project_psi(panel, fit, lam, lam, is_null=True)
        else:
            pk = expit(xk @ fit.beta + fit.alpha[panel.sender]
                       + fit.gamma[panel.receiver])
            prob_k[k] = pk
            lam_k[k], lam2_k[k] = _derivatives(pk)
            psi[k] = project_psi(panel, fit, lam, lam_k[k], is_null=False)
    W, dF = compute_W_and_dF(panel, lam, tilde_x, lam_k, tilde_xk, ks)
    return ProjectionSet(ks=ks, tilde_x=tilde_x, tilde_xk=tilde_xk, psi=psi,
                         lam=lam, lam2=lam2, lam_k=lam_k, lam2_k=lam2_k,
                         prob_k=prob_k, W=W, dF_dbeta=dF)
