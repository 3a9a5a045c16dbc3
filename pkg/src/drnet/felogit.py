"""Fixed-effects logistic fits, one per outcome threshold.

For each threshold y the binarized outcomes 1{y_ij <= y} are fit by
conditional maximum likelihood over (beta, alpha_1..alpha_I,
gamma_1..gamma_J) with exact Newton steps on the arrow-structured
Hessian.  Units whose indicators are constant (perfect separation) get
their effect clamped at +-clamp_bound and are flagged; the remaining
parameters are estimated on the subpanel of dyads with both ends free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (ConvergenceError, DegenerateThresholdError,
                     SingularSystemError)
from .panel import DyadPanel, ThresholdGrid
from .twoway import TwoWaySystem, _group_sums

__all__ = ["SolverOptions", "ThresholdFit", "GridFit", "HessianSystem",
           "fit_threshold", "fit_all", "hessian", "profiled_fixed_effects"]


@dataclass(frozen=True)
class SolverOptions:
    # gradient sup-norm target; quadratic convergence makes 1e-10 cost at
    # most one iteration over 1e-8 and keeps influence-function identities
    # (score sums through the pseudo-inverse) at their stated tolerances
    tol: float = 1e-10
    max_iter: int = 100
    clamp_bound: float = 30.0
    armijo: float = 1e-4
    max_halvings: int = 50


@dataclass(frozen=True)
class ThresholdFit:
    """Converged solution at one threshold, normalized so that
    sum(alpha) - sum(gamma) = 0."""

    threshold: float
    beta: np.ndarray
    alpha: np.ndarray
    gamma: np.ndarray
    index: np.ndarray        # fitted linear index per dyad
    prob: np.ndarray         # fitted probabilities, in (0, 1)
    indicators: np.ndarray   # binarized outcomes (float 0/1)
    clamped_senders: np.ndarray
    clamped_receivers: np.ndarray
    iterations: int
    grad_norm: float

    @property
    def n_clamped(self) -> int:
        return int(self.clamped_senders.sum() + self.clamped_receivers.sum())


@dataclass(frozen=True)
class GridFit:
    """Per-threshold fits over a grid; failed thresholds are None with the
    failure reason recorded."""

    grid: ThresholdGrid
    fits: tuple
    failures: tuple = ()

    def require_complete(self):
        if self.failures:
            ys = ", ".join(f"y={y:g} ({msg})" for y, msg in self.failures)
            raise DegenerateThresholdError(
                self.failures[0][0], f"thresholds failed: {ys}")
        return self


def _loglik(b: np.ndarray, pi: np.ndarray) -> float:
    # log Lambda(pi) = -log(1+e^-pi);  log(1-Lambda(pi)) = -pi - log(1+e^-pi)
    return float(-(np.logaddexp(0.0, -pi).sum() + ((1.0 - b) * pi).sum()))


def _detect_clamps(b, sender, receiver, I, J, clamp):
    """Peel perfectly separated units; returns clamp values (nan = free)
    and the mask of dyads whose endpoints are both free."""
    a_val = np.full(I, np.nan)
    g_val = np.full(J, np.nan)
    active = np.ones(b.shape[0], dtype=bool)
    while True:
        s_sum = _group_sums(sender[active], b[active], I)
        s_cnt = np.bincount(sender[active], minlength=I)
        r_sum = _group_sums(receiver[active], b[active], J)
        r_cnt = np.bincount(receiver[active], minlength=J)
        with np.errstate(invalid="ignore"):
            new_s = np.isnan(a_val) & (s_cnt > 0) \
                & ((s_sum == 0) | (s_sum == s_cnt))
            new_r = np.isnan(g_val) & (r_cnt > 0) \
                & ((r_sum == 0) | (r_sum == r_cnt))
        # units that lost every dyad to clamped partners are unidentified
        iso_s = np.isnan(a_val) & (s_cnt == 0)
        iso_r = np.isnan(g_val) & (r_cnt == 0)
        if not (new_s.any() or new_r.any() or iso_s.any() or iso_r.any()):
            break
        a_val[new_s] = np.where(s_sum[new_s] == 0, -clamp, clamp)
        g_val[new_r] = np.where(r_sum[new_r] == 0, -clamp, clamp)
        a_val[iso_s] = 0.0
        g_val[iso_r] = 0.0
        active &= np.isnan(a_val[sender]) & np.isnan(g_val[receiver])
    return a_val, g_val, active


def fit_threshold(panel: DyadPanel, y: float, warm_start: ThresholdFit = None,
                  opts: SolverOptions = SolverOptions()) -> ThresholdFit:
    """Solve the binary fixed-effects logit at threshold y.

    Raises DegenerateThresholdError when every indicator agrees, and
    ConvergenceError (carrying the best iterate) if Newton stalls.
    """
    if not np.isfinite(y):
        raise DegenerateThresholdError(y, f"non-finite threshold {y!r}")
    b = (panel.outcome <= y).astype(np.float64)
    if b.all() or not b.any():
        raise DegenerateThresholdError(y)

    I, J, d = panel.n_senders, panel.n_receivers, panel.d_x
    sender, receiver, X = panel.sender, panel.receiver, panel.covariates
    a_val, g_val, active = _detect_clamps(b, sender, receiver, I, J,
                                          opts.clamp_bound)
    free_s = np.isnan(a_val)
    free_r = np.isnan(g_val)
    if not free_s.any() or not free_r.any() or not active.any():
        raise DegenerateThresholdError(
            y, f"threshold y={y!r}: every sender or receiver separated")

    s_map = np.cumsum(free_s) - 1          # active sender -> compact id
    r_map = np.cumsum(free_r) - 1
    Ia, Ja = int(free_s.sum()), int(free_r.sum())
    sa = s_map[sender[active]]
    ra = r_map[receiver[active]]
    Xa = X[active]
    ba = b[active]

    # initial point
    alpha = np.zeros(Ia)
    gamma = np.zeros(Ja)
    beta = np.zeros(d)
    if warm_start is not None:
        beta = warm_start.beta.copy()
        alpha = warm_start.alpha[free_s].copy()
        gamma = warm_start.gamma[free_r].copy()
    else:
        p_s = _group_sums(sa, ba, Ia) / np.bincount(sa, minlength=Ia)
        p_r = _group_sums(ra, ba, Ja) / np.bincount(ra, minlength=Ja)
        alpha = 0.5 * np.log(np.clip(p_s, 0.01, 0.99)
                             / (1.0 - np.clip(p_s, 0.01, 0.99)))
        gamma = 0.5 * np.log(np.clip(p_r, 0.01, 0.99)
                             / (1.0 - np.clip(p_r, 0.01, 0.99)))

    nll = None
    grad_norm = np.inf
    for it in range(opts.max_iter + 1):
        pi = Xa @ beta + alpha[sa] + gamma[ra]
        prob = expit(pi)
        if nll is None:
            nll = -_loglik(ba, pi)
        s = ba - prob
        g_beta = Xa.T @ s
        g_a = _group_sums(sa, s, Ia)
        g_g = _group_sums(ra, s, Ja)
        grad_norm = max(np.abs(g_beta).max(initial=0.0),
                        np.abs(g_a).max(), np.abs(g_g).max())
        if grad_norm <= opts.tol:
            break
        if it == opts.max_iter:
            raise ConvergenceError(
                f"no convergence at y={y!r} after {opts.max_iter} iterations "
                f"(gradient sup-norm {grad_norm:.3e})",
                best=(beta, alpha, gamma), grad_norm=grad_norm)
        weights = prob * (1.0 - prob)
        try:
            system = TwoWaySystem(sa, ra, Ia, Ja, weights, Xa)
        except SingularSystemError:
            if it > 0:
                # an intermediate iterate concentrated the weights enough
                # to degenerate the curvature; floor them for this step
                system = TwoWaySystem(sa, ra, Ia, Ja,
                                      np.maximum(weights, 1e-4), Xa)
            else:
                raise
        step = system.apply_pinv(np.concatenate([g_beta, g_a, g_g]))
        slope = float(step @ np.concatenate([g_beta, g_a, g_g]))
        # once predicted progress is below objective roundoff, the full
        # Newton step is a pure refinement and needs no sufficient decrease
        roundoff = 64.0 * np.finfo(float).eps * (1.0 + abs(nll))
        t = 1.0
        for _ in range(opts.max_halvings):
            cand_beta = beta + t * step[:d]
            cand_alpha = alpha + t * step[d:d + Ia]
            cand_gamma = gamma + t * step[d + Ia:]
            cand_pi = Xa @ cand_beta + cand_alpha[sa] + cand_gamma[ra]
            cand_nll = -_loglik(ba, cand_pi)
            if cand_nll <= nll - opts.armijo * t * slope + roundoff:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"line search failed at y={y!r} (gradient sup-norm "
                f"{grad_norm:.3e})", best=(beta, alpha, gamma),
                grad_norm=grad_norm)
        beta, alpha, gamma, nll = cand_beta, cand_alpha, cand_gamma, cand_nll

    alpha_full = np.where(free_s, 0.0, np.nan_to_num(a_val))
    gamma_full = np.where(free_r, 0.0, np.nan_to_num(g_val))
    alpha_full[free_s] = alpha
    gamma_full[free_r] = gamma
    shift = (alpha_full.sum() - gamma_full.sum()) / (I + J)
    alpha_full -= shift
    gamma_full += shift
    index = X @ beta + alpha_full[sender] + gamma_full[receiver]
    return ThresholdFit(
        threshold=float(y), beta=beta, alpha=alpha_full, gamma=gamma_full,
        index=index, prob=expit(index), indicators=b,
        clamped_senders=~free_s, clamped_receivers=~free_r,
        iterations=it, grad_norm=float(grad_norm))


def fit_all(panel: DyadPanel, grid: ThresholdGrid,
            opts: SolverOptions = SolverOptions()) -> GridFit:
    """Fit every grid threshold in increasing order with chained warm
    starts.  Failed thresholds are recorded, not raised."""
    fits = []
    failures = []
    warm = None
    for y in grid.values:
        try:
            fit = fit_threshold(panel, float(y), warm_start=warm, opts=opts)
            fits.append(fit)
            warm = fit
        except (DegenerateThresholdError, ConvergenceError,
                SingularSystemError) as exc:
            fits.append(None)
            failures.append((float(y), str(exc)))
    return GridFit(grid=grid, fits=tuple(fits), failures=tuple(failures))


class HessianSystem:
    """Normalized Hessian H = n^-1 sum Lambda'(pi) w w' at a converged fit,
    with pseudo-inverse applications.

    Built over the full panel (clamped units keep their plug-in weights).
    """

    def __init__(self, fit: ThresholdFit, panel: DyadPanel):
        self.n = panel.n
        self.d = panel.d_x
        weights = fit.prob * (1.0 - fit.prob)
        self._sys = TwoWaySystem(panel.sender, panel.receiver,
                                 panel.n_senders, panel.n_receivers,
                                 weights, panel.covariates)

    def apply_pinv(self, rhs: np.ndarray) -> np.ndarray:
        """pinv(H) @ rhs, H normalized by 1/n."""
        return self.n * self._sys.apply_pinv(rhs)

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        return self._sys.matvec(vec) / self.n

    def beta_rows(self) -> np.ndarray:
        """First d rows of pinv(H), shape (d, d + I + J)."""
        size = self.d + self._sys.I + self._sys.J
        rows = np.empty((self.d, size))
        basis = np.zeros(size)
        for c in range(self.d):
            basis[c] = 1.0
            rows[c] = self.apply_pinv(basis)
            basis[c] = 0.0
        return rows


def profiled_fixed_effects(panel: DyadPanel, fit: ThresholdFit,
                           beta: np.ndarray,
                           opts: SolverOptions = SolverOptions()):
    """Re-solve the fixed effects at a pinned coefficient vector.

    Returns (alpha, gamma) maximizing the threshold likelihood with beta
    held fixed, warm-started at the original fit and using the original
    fit's clamp pattern.
    """
    b = fit.indicators
    sender, receiver = panel.sender, panel.receiver
    I, J = panel.n_senders, panel.n_receivers
    free_s = ~fit.clamped_senders
    free_r = ~fit.clamped_receivers
    active = free_s[sender] & free_r[receiver]
    s_map = np.cumsum(free_s) - 1
    r_map = np.cumsum(free_r) - 1
    Ia, Ja = int(free_s.sum()), int(free_r.sum())
    sa, ra = s_map[sender[active]], r_map[receiver[active]]
    offset = panel.covariates[active] @ beta
    ba = b[active]

    alpha = fit.alpha[free_s].copy()
    gamma = fit.gamma[free_r].copy()
    nll = None
    for it in range(opts.max_iter + 1):
        pi = offset + alpha[sa] + gamma[ra]
        prob = expit(pi)
        if nll is None:
            nll = -_loglik(ba, pi)
        s = ba - prob
        g_a = _group_sums(sa, s, Ia)
        g_g = _group_sums(ra, s, Ja)
        grad_norm = max(np.abs(g_a).max(), np.abs(g_g).max())
        if grad_norm <= opts.tol:
            break
        if it == opts.max_iter:
            raise ConvergenceError(
                f"profiled effects did not converge at y={fit.threshold!r}",
                grad_norm=grad_norm)
        system = TwoWaySystem(sa, ra, Ia, Ja, prob * (1.0 - prob))
        step = system.solve_fe(np.concatenate([g_a, g_g]))
        slope = float(step @ np.concatenate([g_a, g_g]))
        roundoff = 64.0 * np.finfo(float).eps * (1.0 + abs(nll))
        t = 1.0
        for _ in range(opts.max_halvings):
            ca = alpha + t * step[:Ia]
            cg = gamma + t * step[Ia:]
            cand_nll = -_loglik(ba, offset + ca[sa] + cg[ra])
            if cand_nll <= nll - opts.armijo * t * slope + roundoff:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"profiled line search failed at y={fit.threshold!r}",
                grad_norm=grad_norm)
        alpha, gamma, nll = ca, cg, cand_nll

    alpha_full = fit.alpha.copy()
    gamma_full = fit.gamma.copy()
    alpha_full[free_s] = alpha
    gamma_full[free_r] = gamma
    shift = (alpha_full.sum() - gamma_full.sum()) / (I + J)
    return alpha_full - shift, gamma_full + shift


def hessian(fit: ThresholdFit, panel: DyadPanel) -> HessianSystem:
    """Hessian machinery at a converged fit (see HessianSystem)."""
    return HessianSystem(fit, panel)
