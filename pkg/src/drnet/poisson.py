"""Poisson fixed-effects baseline and its implied distribution plug-in.

The comparison model for count-like outcomes: a log-link mean with the
same two-way effects, fit by conditional ML, whose implied counterfactual
CDF averages Poisson CDFs over dyads.  Point estimates only; the
distribution-regression machinery owns the bands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import pdtr

from .errors import ConvergenceError, DegenerateThresholdError
from .panel import DyadPanel, ThresholdGrid
from .twoway import TwoWaySystem, _group_sums

__all__ = ["PoissonFit", "fit_poisson", "poisson_distribution"]


@dataclass(frozen=True)
class PoissonFit:
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    rate: np.ndarray          # fitted means per dyad
    clamped_senders: np.ndarray
    clamped_receivers: np.ndarray
    iterations: int
    grad_norm: float


def _peel_zero_units(y, sender, receiver, I, J):
    """Units with no positive outcome have their effect at -inf; clamp and
    drop their dyads, cascading."""
    a_val = np.full(I, np.nan)
    g_val = np.full(J, np.nan)
    active = np.ones(y.shape[0], dtype=bool)
    while True:
        s_pos = _group_sums(sender[active], y[active], I)
        s_cnt = np.bincount(sender[active], minlength=I)
        r_pos = _group_sums(receiver[active], y[active], J)
        r_cnt = np.bincount(receiver[active], minlength=J)
        new_s = np.isnan(a_val) & (s_cnt > 0) & (s_pos == 0)
        new_r = np.isnan(g_val) & (r_cnt > 0) & (r_pos == 0)
        iso_s = np.isnan(a_val) & (s_cnt == 0)
        iso_r = np.isnan(g_val) & (r_cnt == 0)
        if not (new_s.any() or new_r.any() or iso_s.any() or iso_r.any()):
            break
        a_val[new_s | iso_s] = 0.0
        g_val[new_r | iso_r] = 0.0
        active &= np.isnan(a_val[sender]) & np.isnan(g_val[receiver])
    return a_val, g_val, active


def fit_poisson(panel: DyadPanel, opts=None) -> PoissonFit:
    """Two-way fixed-effects Poisson conditional MLE.

    Outcomes must be nonnegative; non-integer values are accepted in the
    quasi-likelihood sense.  Senders/receivers with all-zero outcomes are
    clamped at -clamp_bound and flagged.
    """
    from .felogit import SolverOptions
    opts = opts or SolverOptions()
    y = panel.outcome
    if np.any(y < 0):
        raise DegenerateThresholdError(
            None, "negative outcomes are outside the Poisson model")
    if not np.any(y > 0):
        raise DegenerateThresholdError(None, "all outcomes are zero")
    I, J, d = panel.n_senders, panel.n_receivers, panel.d_x
    sender, receiver, X = panel.sender, panel.receiver, panel.covariates

    a_val, g_val, active = _peel_zero_units(y, sender, receiver, I, J)
    free_s, free_r = np.isnan(a_val), np.isnan(g_val)
    if not active.any():
        raise DegenerateThresholdError(None,
                                       "every unit has all-zero outcomes")
    s_map = np.cumsum(free_s) - 1
    r_map = np.cumsum(free_r) - 1
    Ia, Ja = int(free_s.sum()), int(free_r.sum())
    sa, ra = s_map[sender[active]], r_map[receiver[active]]
    Xa, ya = X[active], y[active]

    base = np.log(ya.mean())
    mean_s = _group_sums(sa, ya, Ia) / np.bincount(sa, minlength=Ia)
    mean_r = _group_sums(ra, ya, Ja) / np.bincount(ra, minlength=Ja)
    alpha = 0.5 * (np.log(np.maximum(mean_s, 1e-8)) - base) + base / 2
    gamma = 0.5 * (np.log(np.maximum(mean_r, 1e-8)) - base) + base / 2
    beta = np.zeros(d)

    nll = None
    for it in range(opts.max_iter + 1):
        pi = Xa @ beta + alpha[sa] + gamma[ra]
        lam = np.exp(pi)
        if nll is None:
            nll = float(lam.sum() - ya @ pi)
        s = ya - lam
        g_beta = Xa.T @ s
        g_a = _group_sums(sa, s, Ia)
        g_g = _group_sums(ra, s, Ja)
        # FOC scale grows with the outcomes; converge on a relative norm
        scale = max(1.0, float(ya.sum()))
        grad_norm = max(np.abs(g_beta).max(initial=0.0), np.abs(g_a).max(),
                        np.abs(g_g).max()) / scale
        if grad_norm <= opts.tol:
            break
        if it == opts.max_iter:
            raise ConvergenceError(
                f"poisson fit did not converge ({opts.max_iter} iterations, "
                f"relative gradient {grad_norm:.3e})",
                best=(beta, alpha, gamma), grad_norm=grad_norm)
        system = TwoWaySystem(sa, ra, Ia, Ja, lam, Xa)
        step = system.apply_pinv(np.concatenate([g_beta, g_a, g_g]))
        slope = float(step @ np.concatenate([g_beta, g_a, g_g]))
        roundoff = 64.0 * np.finfo(float).eps * (1.0 + abs(nll))
        t = 1.0
        for _ in range(opts.max_halvings):
            cb = beta + t * step[:d]
            ca = alpha + t * step[d:d + Ia]
            cg = gamma + t * step[d + Ia:]
            cpi = Xa @ cb + ca[sa] + cg[ra]
            with np.errstate(over="ignore"):
                cand_nll = float(np.exp(cpi).sum() - ya @ cpi)
            if np.isfinite(cand_nll) \
                    and cand_nll <= nll - opts.armijo * t * slope + roundoff:
                break
            t *= 0.5
        else:
            raise ConvergenceError("poisson line search failed",
                                   best=(beta, alpha, gamma),
                                   grad_norm=grad_norm)
        beta, alpha, gamma, nll = cb, ca, cg, cand_nll

    alpha_full = np.where(free_s, 0.0, -opts.clamp_bound)
    gamma_full = np.where(free_r, 0.0, -opts.clamp_bound)
    alpha_full[free_s] = alpha
    gamma_full[free_r] = gamma
    shift = (alpha_full.sum() - gamma_full.sum()) / (I + J)
    alpha_full -= shift
    gamma_full += shift
    rate = np.exp(X @ beta + alpha_full[sender] + gamma_full[receiver])
    return PoissonFit(beta=beta, alpha=alpha_full, gamma=gamma_full,
                      rate=rate, clamped_senders=~free_s,
                      clamped_receivers=~free_r, iterations=it,
                      grad_norm=float(grad_norm))


def poisson_distribution(fit: PoissonFit, panel: DyadPanel,
                         counterfactual: np.ndarray,
                         grid: ThresholdGrid) -> np.ndarray:
    """Implied counterfactual CDF: the dyad-average Poisson CDF at the
    integer part of each threshold, with the treatment set per the
    counterfactual covariates.  Negative thresholds give 0."""
    rate = np.exp(counterfactual @ fit.beta + fit.alpha[panel.sender]
                  + fit.gamma[panel.receiver])
    out = np.empty(len(grid))
    floors = np.floor(grid.values)
    for pos, m in enumerate(floors):
        out[pos] = 0.0 if m < 0 else float(pdtr(m, rate).mean())
    return out
