"""Quantile functions and effects from distribution bands.

Distribution bands with monotone endpoints invert into quantile bands by
swapping the roles of the envelopes: the upper CDF envelope inverts into
the lower quantile envelope and vice versa.  Quantile-effect bands are
the pointwise Minkowski difference of the two arms' quantile bands.
Coverage of these transforms is preserved path by path, not just in
probability.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InferenceError, ValidationError
from .inference import Band, MultiplierScheme, empirical_quantile_higher, \
    normal_quantile

__all__ = ["QuantileBand", "AverageEffect", "left_inverse", "invert_band",
           "qe_band", "average_effect", "step_integral"]


def left_inverse(grid_values, series, taus, y_sup):
    """Smallest grid value with series >= tau, capped at y_sup.

    `series` must be nondecreasing on the grid (shape-restrict first).
    """
    series = np.asarray(series, dtype=float)
    grid_values = np.asarray(grid_values, dtype=float)
    if np.any(np.diff(series) < 0):
        raise ValidationError("left_inverse needs a nondecreasing series")
    scalar = np.isscalar(taus) or np.ndim(taus) == 0
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    if np.any(taus <= 0) or np.any(taus >= 1):
        raise ValidationError("quantile indices must lie in (0, 1)")
    idx = np.searchsorted(series, taus, side="left")
    out = np.where(idx < grid_values.size,
                   grid_values[np.minimum(idx, grid_values.size - 1)],
                   float(y_sup))
    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class QuantileBand:
    """Band over quantile indices; `capped` marks indices where either
    envelope hit the region supremum."""

    taus: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    source: str
    capped: np.ndarray

    def covers(self, truth: np.ndarray) -> bool:
        return bool(np.all((self.lower <= truth) & (truth <= self.upper)))


def _require_cdf_path(name, values):
    if np.any(np.diff(values) < -1e-12) or values.min() < -1e-12 \
            or values.max() > 1 + 1e-12:
        raise ValidationError(
            f"{name} endpoint is not a nondecreasing [0,1] path; apply the "
            "shape restriction before inverting")


def invert_band(band: Band, taus) -> QuantileBand:
    """Quantile band from a CDF band: lower = upper^-1, upper = lower^-1."""
    _require_cdf_path("lower", band.lower)
    _require_cdf_path("upper", band.upper)
    _require_cdf_path("center", band.center)
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    y_sup = band.region[1]
    lower = np.atleast_1d(left_inverse(band.grid_values, band.upper, taus,
                                       y_sup))
    center = np.atleast_1d(left_inverse(band.grid_values, band.center, taus,
                                        y_sup))
    upper = np.atleast_1d(left_inverse(band.grid_values, band.lower, taus,
                                       y_sup))
    capped = (upper >= y_sup) | (center >= y_sup)
    return QuantileBand(taus=taus, center=center, lower=lower, upper=upper,
                        level=band.level, source=f"cdf:{band.kind}",
                        capped=capped)


def qe_band(q1: QuantileBand, q0: QuantileBand) -> QuantileBand:
    """Pointwise Minkowski difference of two quantile bands.

    Valid as a joint band for the quantile effect only when q1 and q0 come
    from a joint band for both distributions.
    """
    if q1.taus.shape != q0.taus.shape or np.any(q1.taus != q0.taus):
        raise ValidationError("quantile bands live on different tau grids")
    return QuantileBand(
        taus=q1.taus, center=q1.center - q0.center,
        lower=q1.lower - q0.upper, upper=q1.upper - q0.lower,
        level=min(q1.level, q0.level), source="difference",
        capped=q1.capped | q0.capped)


def step_integral(grid_values, values, region_hi, below_first=0.0,
                  above_region=0.0):
    """Integral of the left-continuous step extension of `values`.

    The extension is `below_first` strictly below the first grid point,
    values[m] on [g_m, g_{m+1}), values[-1] on [g_last, region_hi), and
    `above_region` beyond; only the part over [min(g_0, 0), region_hi)
    relative to the 1(y >= 0) baseline enters the counterfactual mean, so
    the caller supplies the integrand values directly.
    """
    grid_values = np.asarray(grid_values, dtype=float)
    values = np.asarray(values, dtype=float)
    widths = np.diff(np.append(grid_values, region_hi))
    if np.any(widths < 0):
        raise ValidationError("region upper bound below the last grid point")
    return float(values @ widths)


@dataclass(frozen=True)
class AverageEffect:
    mu0: float
    mu1: float
    delta: float
    se: float
    level: float
    ci_lower: float
    ci_upper: float
    critical_value: float
    critical_source: str       # "normal" | "bootstrap"
    cluster_mode: str
    support_incomplete: tuple  # levels whose grid mass is short of 1


def _counterfactual_mean(grid_values, series, region):
    """mu = int [1(y >= 0) - C F(y)] dy on the step extension."""
    lo, hi = region
    if not (lo <= 0.0 <= hi):
        raise ValidationError(
            f"region {region} does not bracket 0; the counterfactual mean "
            "integral is ill-defined")
    g = np.asarray(grid_values, dtype=float)
    F = np.asarray(series, dtype=float)
    nodes = np.concatenate([[min(g[0], 0.0)], g, [hi]])
    # step value on [nodes[t], nodes[t+1]): 0 before the first grid point,
    # 1 beyond the region (contributing nothing to either integral)
    step_vals = np.concatenate([[0.0], F])
    pos_len = np.clip(nodes[1:], 0.0, None) - np.clip(nodes[:-1], 0.0, None)
    neg_len = np.clip(nodes[1:], None, 0.0) - np.clip(nodes[:-1], None, 0.0)
    return float(((1.0 - step_vals) * pos_len).sum()
                 - (step_vals * neg_len).sum())


def average_effect(grid_values, region, f0, f1, phi_grid, cluster_mode,
                   recip=None, scheme: MultiplierScheme = None,
                   level=0.95, support_tol=1e-6) -> AverageEffect:
    """Bias-corrected average effect with standard error and interval.

    f0, f1: shape-restricted distribution series on the grid.
    phi_grid: (G, n, 2) per-threshold influence values for levels (0, 1).
    scheme: multiplier draws shared with the band bootstrap; when absent
    the interval uses the normal quantile.
    """
    mu0 = _counterfactual_mean(grid_values, f0, region)
    mu1 = _counterfactual_mean(grid_values, f1, region)
    delta = mu1 - mu0
    support = tuple(k for k, f in ((0, f0), (1, f1))
                    if f[-1] < 1.0 - support_tol)

    hi = region[1]
    widths = np.diff(np.append(np.asarray(grid_values, dtype=float), hi))
    phi_delta = -np.tensordot(widths, phi_grid[:, :, 1] - phi_grid[:, :, 0],
                              axes=(0, 0))          # (n,)
    n = phi_delta.shape[0]
    if cluster_mode == "independent":
        var = float((phi_delta ** 2).sum())
    else:
        if recip is None:
            raise InferenceError("pairwise clustering needs the reciprocal "
                                 "row map")
        part = phi_delta.copy()
        has = recip >= 0
        var = float((phi_delta ** 2).sum()
                    + (phi_delta[recip[has]] * phi_delta[has]).sum())
        if var < 0:
            raise InferenceError("negative clustered variance for the "
                                 "average effect")
    se = float(np.sqrt(var)) / n

    if scheme is not None and se > 0:
        draws = np.abs(scheme.draws_dot(phi_delta[:, None])[:, 0] / n) / se
        crit = empirical_quantile_higher(draws, level)
        source = "bootstrap"
    else:
        crit = normal_quantile(level)
        source = "normal"
    return AverageEffect(mu0=mu0, mu1=mu1, delta=delta, se=se, level=level,
                         ci_lower=delta - crit * se,
                         ci_upper=delta + crit * se, critical_value=crit,
                         critical_source=source, cluster_mode=cluster_mode,
                         support_incomplete=support)
