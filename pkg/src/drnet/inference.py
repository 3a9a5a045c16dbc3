"""Influence functions, standard errors, multiplier bootstrap, and bands.

The influence function of the threshold estimator is
psi_ij = pinv(H) [1{y_ij <= y} - Lambda(pi_ij)] w_ij; only its coefficient
block and the scalar projections phi_ij = J_k' psi_ij needed downstream
are materialized (d + |K| structured solves per threshold, never n dense
solves).  Bootstrap draws perturb these influences with centered standard
normal multipliers; pairwise clustering shares one multiplier within each
symmetric dyad pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, ndtri

from .errors import InferenceError
from .felogit import HessianSystem, ThresholdFit
from .panel import DyadPanel
from .twoway import _group_sums

__all__ = ["InfluenceSet", "Band", "MultiplierScheme", "influence",
           "standard_errors", "multiplier_bootstrap", "build_bands",
           "BootstrapResult", "normal_quantile"]

CLUSTER_MODES = ("independent", "pairwise")


@dataclass(frozen=True)
class InfluenceSet:
    """Per-dyad influences at one threshold.

    psi_beta has shape (n, d): rows are the coefficient block of psi_ij.
    phi has shape (n, |ks|): columns follow ks.
    """

    threshold: float
    ks: tuple
    psi_beta: np.ndarray
    phi: np.ndarray


def influence(panel: DyadPanel, fit: ThresholdFit, hess: HessianSystem,
              counterfactuals: dict) -> InfluenceSet:
    """Coefficient and distribution influences at one threshold."""
    s, r = panel.sender, panel.receiver
    score = fit.indicators - fit.prob
    rows = hess.beta_rows()                    # (d, d+I+J)
    d, I = panel.d_x, panel.n_senders
    t_bb, t_ba, t_bg = rows[:, :d], rows[:, d:d + I], rows[:, d + I:]
    psi_beta = score[:, None] * (panel.covariates @ t_bb.T
                                 + t_ba.T[s] + t_bg.T[r])
    ks = tuple(sorted(counterfactuals))
    phi = np.empty((panel.n, len(ks)))
    for pos, k in enumerate(ks):
        xk = counterfactuals[k]
        lam_k = expit(xk @ fit.beta + fit.alpha[s] + fit.gamma[r])
        lam_k = lam_k * (1.0 - lam_k)
        jvec = np.concatenate([
            xk.T @ lam_k, _group_sums(s, lam_k, I),
            _group_sums(r, lam_k, panel.n_receivers)]) / panel.n
        zeta = hess.apply_pinv(jvec)
        phi[:, pos] = score * (panel.covariates @ zeta[:d]
                               + zeta[d:d + I][s] + zeta[d + I:][r])
    return InfluenceSet(threshold=fit.threshold, ks=ks, psi_beta=psi_beta,
                        phi=phi)


def _clustered_ssq(values: np.ndarray, recip: np.ndarray) -> np.ndarray:
    """sum over dyads of (v_ij + v_ji) v_ij per column, v_ji = 0 when the
    symmetric dyad is unobserved."""
    v2d = values if values.ndim == 2 else values[:, None]
    total = (v2d * v2d).sum(axis=0)
    has = recip >= 0
    total = total + (v2d[recip[has]] * v2d[has]).sum(axis=0)
    return total


def standard_errors(infl: InfluenceSet, n: int, cluster_mode: str,
                    recip: np.ndarray = None):
    """Pointwise standard errors (sigma_beta (d,), sigma_F (|ks|,)).

    Raises InferenceError when a pairwise-clustered variance estimate is
    negative (possible in finite samples).
    """
    if cluster_mode == "independent":
        var_beta = (infl.psi_beta ** 2).sum(axis=0)
        var_f = (infl.phi ** 2).sum(axis=0)
    elif cluster_mode == "pairwise":
        if recip is None:
            raise InferenceError("pairwise clustering needs the reciprocal "
                                 "row map")
        var_beta = _clustered_ssq(infl.psi_beta, recip)
        var_f = _clustered_ssq(infl.phi, recip)
        for label, var in (("beta", var_beta), ("F", var_f)):
            if np.any(var < 0):
                bad = int(np.flatnonzero(var < 0)[0])
                raise InferenceError(
                    f"negative clustered variance for {label} component "
                    f"{bad} at threshold y={infl.threshold!r}")
    else:
        raise InferenceError(f"unknown cluster mode {cluster_mode!r}")
    return np.sqrt(var_beta) / n, np.sqrt(var_f) / n


class MultiplierScheme:
    """Reproducible multiplier draws keyed by (seed, draw index).

    Each draw generates one standard normal per draw slot (per dyad when
    independent; per unordered symmetric pair when pairwise) with a
    counter-based generator, maps slots to dyads, and centers the result
    so the weights sum to zero exactly.  Independent of thread count and
    draw evaluation order by construction.
    """

    def __init__(self, panel: DyadPanel, seed: int, cluster_mode: str,
                 n_draws: int):
        if cluster_mode not in CLUSTER_MODES:
            raise InferenceError(f"unknown cluster mode {cluster_mode!r}")
        self.seed = int(seed)
        self.cluster_mode = cluster_mode
        self.n_draws = int(n_draws)
        if self.n_draws < 1:
            raise InferenceError("need at least one bootstrap draw")
        self.n = panel.n
        if cluster_mode == "pairwise":
            self.slots = panel.pair_slots
            self.n_slots = int(self.slots.max()) + 1
        else:
            self.slots = np.arange(panel.n)
            self.n_slots = panel.n

    def weights(self, m: int) -> np.ndarray:
        """Centered multiplier vector for draw m."""
        gen = np.random.Generator(np.random.Philox(
            key=np.array([self.seed, m], dtype=np.uint64)))
        vals = gen.standard_normal(self.n_slots)[self.slots]
        return vals - vals.mean()

    def draws_dot(self, matrix: np.ndarray) -> np.ndarray:
        """(n_draws, q) array of omega_m' V for V of shape (n, q)."""
        out = np.empty((self.n_draws, matrix.shape[1]))
        for m in range(self.n_draws):
            out[m] = self.weights(m) @ matrix
        return out


@dataclass(frozen=True)
class BootstrapResult:
    levels: tuple
    crit_beta: dict            # level -> critical value
    crit_F: dict
    t_beta: np.ndarray         # per-draw max statistics
    t_F: np.ndarray
    seed: int
    cluster_mode: str
    n_draws: int


def empirical_quantile_higher(draws: np.ndarray, p: float) -> float:
    """Smallest order statistic whose empirical CDF reaches p."""
    sorted_draws = np.sort(draws)
    rank = int(np.ceil(p * sorted_draws.size)) - 1
    return float(sorted_draws[max(rank, 0)])


def multiplier_bootstrap(scheme: MultiplierScheme, influences: list,
                         sigma_beta: np.ndarray, sigma_F: np.ndarray,
                         levels=(0.95,), coef_set=None) -> BootstrapResult:
    """Critical values of the maximal t-statistics over the grid.

    influences: per-threshold InfluenceSet list (grid order).
    sigma_beta (G, d), sigma_F (G, |ks|): matching standard errors.
    coef_set: coefficient indices entering the beta statistic (default all).
    """
    G = len(influences)
    if G == 0:
        raise InferenceError("no thresholds to bootstrap")
    d = influences[0].psi_beta.shape[1]
    coef_set = tuple(range(d)) if coef_set is None else tuple(coef_set)
    nK = len(influences[0].ks)
    n = scheme.n

    if np.any(sigma_beta[:, list(coef_set)] == 0.0):
        g, l = np.argwhere(sigma_beta[:, list(coef_set)] == 0.0)[0]
        raise InferenceError(
            f"zero standard error for coefficient {coef_set[l]} at "
            f"threshold y={influences[g].threshold!r}; band undefined")
    if np.any(sigma_F == 0.0):
        g, k = np.argwhere(sigma_F == 0.0)[0]
        raise InferenceError(
            f"zero standard error for distribution level {k} at threshold "
            f"y={influences[g].threshold!r}; band undefined")

    stacked = np.concatenate(
        [np.column_stack([inf.psi_beta[:, list(coef_set)], inf.phi])
         for inf in influences], axis=1)           # (n, G*(|B|+|K|))
    draws = scheme.draws_dot(stacked) / n          # (M, G*(|B|+|K|))
    draws = np.abs(draws).reshape(scheme.n_draws, G, len(coef_set) + nK)
    t_beta = (draws[:, :, :len(coef_set)]
              / sigma_beta[None, :, list(coef_set)]).max(axis=(1, 2))
    t_F = (draws[:, :, len(coef_set):] / sigma_F[None, :, :]).max(axis=(1, 2))
    crit_beta = {p: empirical_quantile_higher(t_beta, p) for p in levels}
    crit_F = {p: empirical_quantile_higher(t_F, p) for p in levels}
    return BootstrapResult(levels=tuple(levels), crit_beta=crit_beta,
                           crit_F=crit_F, t_beta=t_beta, t_F=t_F,
                           seed=scheme.seed, cluster_mode=scheme.cluster_mode,
                           n_draws=scheme.n_draws)


def normal_quantile(level: float) -> float:
    """Two-sided pointwise critical value at coverage `level`."""
    return float(ndtri(0.5 + level / 2.0))


@dataclass(frozen=True)
class Band:
    """Lower/upper envelope around a center series on a grid."""

    grid_values: np.ndarray
    region: tuple
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray
    level: float
    critical_value: float
    kind: str                  # "pointwise" | "uniform"
    cluster_mode: str
    shaped: bool = False

    def covers(self, truth: np.ndarray) -> bool:
        return bool(np.all((self.lower <= truth) & (truth <= self.upper)))


def build_bands(grid_values, region, center, se, critical_value, level,
                kind, cluster_mode, shape=False) -> Band:
    """center +- c * se, optionally shape-restricted for CDF bands.

    Shaping rearranges each envelope (and the center) into nondecreasing
    order and winsorizes to [0, 1]; sorting preserves the pointwise order
    lower <= center <= upper.
    """
    center = np.asarray(center, dtype=float)
    se = np.asarray(se, dtype=float)
    lower = center - critical_value * se
    upper = center + critical_value * se
    if shape:
        from .bias import shape_restrict
        center = shape_restrict(center)
        lower = shape_restrict(lower)
        upper = shape_restrict(upper)
    return Band(grid_values=np.asarray(grid_values, dtype=float),
                region=tuple(region), center=center, lower=lower,
                upper=upper, se=se, level=float(level),
                critical_value=float(critical_value), kind=kind,
                cluster_mode=cluster_mode, shaped=bool(shape))
