"""Weighted two-way linear systems with sender/receiver structure.

Every quadratic subproblem in this package (Newton steps for the
fixed-effects logit and Poisson fits, covariate projections, influence
function solves) reduces to the same normal-equation matrix

    H = sum_d  w_d * z_d z_d',     z_d = (x_d, e_{sender(d)}, e_{receiver(d)}),

whose fixed-effect block is diagonal-plus-bipartite ("arrow" shaped) and
singular: adding a constant to all sender effects while subtracting it
from all receiver effects leaves every fitted index unchanged.  The
solver factors the system once per weight vector via a Schur complement
onto the receiver block and exposes Moore-Penrose pseudo-inverse
applications through the rank-completion identity

    pinv(H) = inv(H + v v' / (I+J)) - v v' / (I+J),

where v = (0, 1_I, -1_J) spans the location null space.  Units whose
entire weight row is zero (saturated fitted probabilities) contribute
zero blocks; their pseudo-inverse rows/columns are exactly zero and they
are dropped from the factorization.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import SingularSystemError

__all__ = ["TwoWaySystem"]


def _group_sums(idx: np.ndarray, values: np.ndarray, size: int) -> np.ndarray:
    """Sum `values` (1-d or 2-d) by group index, fixed output size."""
    if values.ndim == 1:
        return np.bincount(idx, weights=values, minlength=size)
    out = np.empty((size, values.shape[1]))
    for c in range(values.shape[1]):
        out[:, c] = np.bincount(idx, weights=values[:, c], minlength=size)
    return out


class TwoWaySystem:
    """Factorization of a weighted sender/receiver normal-equation matrix.

    Parameters
    ----------
    sender, receiver : int arrays of shape (n,)
        Zero-based unit indices per observation.
    n_senders, n_receivers : int
        Sizes of the two index sets (I and J).
    weights : array of shape (n,)
        Nonnegative observation weights (Hessian weights).
    covariates : array of shape (n, d) or None
        Dense block; omit for fixed-effect-only systems.

    Raises
    ------
    SingularSystemError
        If the system is singular beyond the location null space and the
        zero-weight-unit blocks (disconnected weight graph, collinear
        covariates).
    """

    def __init__(self, sender, receiver, n_senders, n_receivers, weights,
                 covariates=None):
        self.I = int(n_senders)
        self.J = int(n_receivers)
        self.full_weights = weights
        self.full_sender = sender
        self.full_receiver = receiver

        row_full = _group_sums(sender, weights, self.I)
        col_full = _group_sums(receiver, weights, self.J)
        self.active_s = row_full > 0.0
        self.active_r = col_full > 0.0
        if not (self.active_s.any() and self.active_r.any()):
            raise SingularSystemError("every unit has zero total weight")
        self._reduced = not (self.active_s.all() and self.active_r.all())
        if self._reduced:
            smap = np.cumsum(self.active_s) - 1
            rmap = np.cumsum(self.active_r) - 1
            keep = self.active_s[sender] & self.active_r[receiver]
            sender = smap[sender[keep]]
            receiver = rmap[receiver[keep]]
            weights = weights[keep]
            if covariates is not None:
                covariates = covariates[keep]
            self._keep_rows = keep
        self.sender = sender
        self.receiver = receiver
        self.weights = weights
        self.Ia = int(self.active_s.sum())
        self.Ja = int(self.active_r.sum())
        self.n_effects = self.Ia + self.Ja

        self.row_sums = _group_sums(sender, weights, self.Ia)
        self.col_sums = _group_sums(receiver, weights, self.Ja)

        coupling = np.zeros((self.Ia, self.Ja))
        coupling[sender, receiver] = weights
        # Pin the best-conditioned receiver effect; the dropped equation is
        # implied by the others whenever the right-hand side is consistent.
        self._pin = int(np.argmax(self.col_sums))
        keep_col = np.arange(self.Ja) != self._pin
        self._keep_col = keep_col
        a_red = coupling[:, keep_col]
        self._a_red_scaled = a_red / self.row_sums[:, None]
        schur = np.diag(self.col_sums[keep_col]) - a_red.T @ self._a_red_scaled
        try:
            self._fe_chol = cho_factor(schur, lower=True)
        except LinAlgError as exc:
            raise SingularSystemError(
                "fixed-effect block singular beyond the location direction "
                f"(receiver Schur complement not positive definite: {exc}); "
                "the sender/receiver weight graph is likely disconnected"
            ) from exc
        self._a_red = a_red

        if covariates is not None and covariates.shape[1] == 0:
            covariates = None
        self.covariates = covariates
        self.d = 0 if covariates is None else covariates.shape[1]
        if covariates is not None:
            d = self.d
            wx = weights[:, None] * covariates
            self._hxx = covariates.T @ wx
            self._c_alpha = _group_sums(sender, wx, self.Ia)     # (Ia, d)
            self._c_gamma = _group_sums(receiver, wx, self.Ja)   # (Ja, d)
            ginv_c = np.empty((self.n_effects, d))
            for c in range(d):
                ginv_c[:, c] = self._ginv(
                    np.concatenate([self._c_alpha[:, c], self._c_gamma[:, c]]))
            self._ginv_c = ginv_c
            schur_x = self._hxx - np.vstack([self._c_alpha,
                                             self._c_gamma]).T @ ginv_c
            schur_x = 0.5 * (schur_x + schur_x.T)
            try:
                self._x_chol = cho_factor(schur_x, lower=True)
            except LinAlgError as exc:
                raise SingularSystemError(
                    "covariates collinear after projecting out the two-way "
                    f"effects: {exc}") from exc
            self.schur_x = schur_x

    # -- index plumbing ------------------------------------------------------

    def _restrict_fe(self, rhs_full: np.ndarray) -> np.ndarray:
        if not self._reduced:
            return rhs_full
        return np.concatenate([rhs_full[:self.I][self.active_s],
                               rhs_full[self.I:][self.active_r]])

    def _scatter_fe(self, vec_red: np.ndarray) -> np.ndarray:
        if not self._reduced:
            return vec_red
        out = np.zeros(self.I + self.J)
        out[:self.I][self.active_s] = vec_red[:self.Ia]
        out[self.I:][self.active_r] = vec_red[self.Ia:]
        return out

    # -- fixed-effect block ----------------------------------------------

    def _gauge(self, vec: np.ndarray) -> np.ndarray:
        """Project off the active-block (1, -1) direction."""
        shift = (vec[:self.Ia].sum() - vec[self.Ia:].sum()) / self.n_effects
        out = vec.copy()
        out[:self.Ia] -= shift
        out[self.Ia:] += shift
        return out

    def _solve_fe_reduced(self, rhs: np.ndarray) -> np.ndarray:
        r = self._gauge(rhs)
        ra, rg = r[:self.Ia], r[self.Ia:]
        t = rg[self._keep_col] - self._a_red_scaled.T @ ra
        c_red = cho_solve(self._fe_chol, t)
        a = (ra - self._a_red @ c_red) / self.row_sums
        c = np.zeros(self.Ja)
        c[self._keep_col] = c_red
        return self._gauge(np.concatenate([a, c]))

    def solve_fe(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the pseudo-inverse of the fixed-effect block to `rhs`
        (full I+J layout; zero-weight unit coordinates map to zero)."""
        return self._scatter_fe(self._solve_fe_reduced(self._restrict_fe(rhs)))

    def _ginv(self, rhs: np.ndarray) -> np.ndarray:
        """Inverse of (active FE block + uu'/(Ia+Ja)) applied to reduced rhs."""
        proj = (rhs[:self.Ia].sum() - rhs[self.Ia:].sum()) / self.n_effects
        out = self._solve_fe_reduced(rhs)
        out[:self.Ia] += proj
        out[self.Ia:] -= proj
        return out

    # -- full system -------------------------------------------------------

    def apply_pinv(self, rhs: np.ndarray) -> np.ndarray:
        """Apply the Moore-Penrose pseudo-inverse of the full matrix.

        `rhs` is laid out as (covariate block, sender block, receiver
        block); for fixed-effect-only systems it has length I+J.
        """
        if self.covariates is None:
            return self.solve_fe(rhs)
        d = self.d
        rx, rfe = rhs[:d], self._restrict_fe(rhs[d:])
        ginv_rfe = self._ginv(rfe)
        zx = cho_solve(self._x_chol, rx - self._ginv_c.T @ rfe)
        zfe = ginv_rfe - self._ginv_c @ zx
        shift = (zfe[:self.Ia].sum() - zfe[self.Ia:].sum()) / self.n_effects
        zfe[:self.Ia] -= shift
        zfe[self.Ia:] += shift
        return np.concatenate([zx, self._scatter_fe(zfe)])

    # -- weighted projections ----------------------------------------------

    def project(self, targets: np.ndarray):
        """Weighted least-squares two-way fit of each target column.

        Solves min_{a,c} sum_d w_d (t_d - a_{sender(d)} - c_{receiver(d)})^2
        per column and returns (a, c, residuals) with the location pinned
        by sum(a) - sum(c) = 0 over active units; zero-weight units get
        coefficient 0 (their residuals carry no weight downstream).
        """
        t2d = targets if targets.ndim == 2 else targets[:, None]
        if self._reduced:
            t_red = t2d[self._keep_rows]
        else:
            t_red = t2d
        q = t2d.shape[1]
        wt = self.weights[:, None] * t_red
        rhs_a = _group_sums(self.sender, wt, self.Ia)
        rhs_g = _group_sums(self.receiver, wt, self.Ja)
        a = np.empty((self.I, q))
        c = np.empty((self.J, q))
        for k in range(q):
            sol = self._scatter_fe(self._solve_fe_reduced(
                np.concatenate([rhs_a[:, k], rhs_g[:, k]])))
            a[:, k], c[:, k] = sol[:self.I], sol[self.I:]
        resid = t2d - a[self.full_sender] - c[self.full_receiver]
        if targets.ndim == 1:
            return a[:, 0], c[:, 0], resid[:, 0]
        return a, c, resid

    # -- diagnostics ---------------------------------------------------------

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        """Multiply the (unnormalized) full system matrix by a vector."""
        d = self.d
        vx = vec[:d]
        va = vec[d:d + self.I]
        vg = vec[d + self.I:]
        fitted = va[self.full_sender] + vg[self.full_receiver]
        if d:
            cov_full = self.covariates
            if self._reduced:
                # zero-weight rows were dropped; rebuild the full view
                cov_full = np.zeros((self.full_sender.shape[0], d))
                cov_full[self._keep_rows] = self.covariates
            fitted = fitted + cov_full @ vx
        wfit = self.full_weights * fitted
        out_a = _group_sums(self.full_sender, wfit, self.I)
        out_g = _group_sums(self.full_receiver, wfit, self.J)
        if d:
            return np.concatenate([cov_full.T @ wfit, out_a, out_g])
        return np.concatenate([out_a, out_g])
