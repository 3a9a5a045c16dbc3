"""Independent reference implementations used as test oracles.

Everything here is deliberately naive: dense matrices, SVD pseudo-inverses,
plain Python loops over units.  None of it shares code with the package
paths it checks.
"""

import math

import numpy as np
from scipy.special import expit as SIGMOID


def design_matrix(panel):
    """Dense (n, d+I+J) design with one-hot sender/receiver columns."""
    n, d = panel.n, panel.d_x
    I, J = panel.n_senders, panel.n_receivers
    W = np.zeros((n, d + I + J))
    W[:, :d] = panel.covariates
    W[np.arange(n), d + panel.sender] = 1.0
    W[np.arange(n), d + I + panel.receiver] = 1.0
    return W


def gauge_normalize(theta, d, I, J):
    """Shift to the representative with sum(alpha) - sum(gamma) = 0."""
    theta = theta.copy()
    shift = (theta[d:d + I].sum() - theta[d + I:].sum()) / (I + J)
    theta[d:d + I] -= shift
    theta[d + I:] += shift
    return theta


def dense_newton_logit(panel, b, tol=1e-11, max_iter=200):
    """Full-Newton logit CMLE on the raw parameter vector using SVD
    pseudo-inverse steps; returns the gauge-normalized maximizer."""
    W = design_matrix(panel)
    d, I, J = panel.d_x, panel.n_senders, panel.n_receivers
    theta = np.zeros(W.shape[1])
    for _ in range(max_iter):
        pi = W @ theta
        p = SIGMOID(pi)
        grad = W.T @ (b - p)
        if np.abs(grad).max() <= tol:
            break
        hess = W.T @ (W * (p * (1 - p))[:, None])
        step = np.linalg.pinv(hess, rcond=1e-12) @ grad
        t = 1.0
        nll = np.logaddexp(0, -pi).sum() + ((1 - b) * pi).sum()
        for _ in range(60):
            cand = theta + t * step
            cpi = W @ cand
            cnll = np.logaddexp(0, -cpi).sum() + ((1 - b) * cpi).sum()
            if cnll <= nll + 1e-12 * (1 + abs(nll)):
                break
            t *= 0.5
        theta = theta + t * step
    else:
        raise RuntimeError("oracle newton failed to converge")
    return gauge_normalize(theta, d, I, J)


def dense_newton_poisson(panel, tol=1e-10, max_iter=200):
    """Full-Newton Poisson CMLE analogue of dense_newton_logit."""
    W = design_matrix(panel)
    d, I, J = panel.d_x, panel.n_senders, panel.n_receivers
    y = panel.outcome
    theta = np.zeros(W.shape[1])
    theta[d] = math.log(max(y.mean(), 1e-8))
    for _ in range(max_iter):
        pi = W @ theta
        lam = np.exp(pi)
        grad = W.T @ (y - lam)
        if np.abs(grad).max() <= tol:
            break
        hess = W.T @ (W * lam[:, None])
        step = np.linalg.pinv(hess, rcond=1e-12) @ grad
        t = 1.0
        nll = lam.sum() - y @ pi
        for _ in range(60):
            cand = theta + t * step
            cpi = W @ cand
            cnll = np.exp(cpi).sum() - y @ cpi
            if cnll <= nll + 1e-12 * (1 + abs(nll)):
                break
            t *= 0.5
        theta = theta + t * step
    else:
        raise RuntimeError("oracle poisson newton failed to converge")
    return gauge_normalize(theta, d, I, J)


def dense_hessian(panel, prob):
    W = design_matrix(panel)
    lam = prob * (1 - prob)
    return (W.T @ (W * lam[:, None])) / panel.n


def dense_pinv_hessian(panel, prob):
    return np.linalg.pinv(dense_hessian(panel, prob), rcond=1e-12,
                          hermitian=True)


def dense_two_way_projection(panel, weights, targets):
    """Weighted LS fit of a_i + c_j to each target column via lstsq on the
    dense one-hot design; returns residuals (unique regardless of gauge)."""
    n = panel.n
    I, J = panel.n_senders, panel.n_receivers
    D = np.zeros((n, I + J))
    D[np.arange(n), panel.sender] = 1.0
    D[np.arange(n), I + panel.receiver] = 1.0
    sw = np.sqrt(weights)
    t2d = targets if targets.ndim == 2 else targets[:, None]
    coef, *_ = np.linalg.lstsq(D * sw[:, None], t2d * sw[:, None], rcond=None)
    resid = t2d - D @ coef
    return resid if targets.ndim == 2 else resid[:, 0]


def loop_bias_components(panel, fit, tilde_x, psi, lam, lam2, lam2_k, W_mat,
                         dF):
    """Literal per-unit loops for the six bias components.

    psi, lam2_k: dicts keyed by counterfactual level; active units only
    (clamped senders/receivers excluded from the averages).
    """
    I, J = panel.n_senders, panel.n_receivers
    d = panel.d_x
    ks = sorted(psi)
    act_s = [i for i in range(I) if not fit.clamped_senders[i]]
    act_r = [j for j in range(J) if not fit.clamped_receivers[j]]
    rows_s = {i: [r for r in range(panel.n) if panel.sender[r] == i]
              for i in range(I)}
    rows_r = {j: [r for r in range(panel.n) if panel.receiver[r] == j]
              for j in range(J)}

    B_beta_in = np.zeros(d)
    for i in act_s:
        num = np.zeros(d)
        den = 0.0
        for r in rows_s[i]:
            num += lam2[r] * tilde_x[r]
            den += lam[r]
        B_beta_in += num / den
    B_beta = -0.5 * np.linalg.solve(W_mat, B_beta_in / len(act_s))

    D_beta_in = np.zeros(d)
    for j in act_r:
        num = np.zeros(d)
        den = 0.0
        for r in rows_r[j]:
            num += lam2[r] * tilde_x[r]
            den += lam[r]
        D_beta_in += num / den
    D_beta = -0.5 * np.linalg.solve(W_mat, D_beta_in / len(act_r))

    B_lam = np.zeros(len(ks))
    D_lam = np.zeros(len(ks))
    for pos, k in enumerate(ks):
        for i in act_s:
            num = sum(lam2_k[k][r] - lam2[r] * psi[k][r] for r in rows_s[i])
            den = sum(lam[r] for r in rows_s[i])
            B_lam[pos] += num / den
        B_lam[pos] /= 2.0 * len(act_s)
        for j in act_r:
            num = sum(lam2_k[k][r] - lam2[r] * psi[k][r] for r in rows_r[j])
            den = sum(lam[r] for r in rows_r[j])
            D_lam[pos] += num / den
        D_lam[pos] /= 2.0 * len(act_r)

    B_F = B_lam + dF @ B_beta
    D_F = D_lam + dF @ D_beta
    return B_beta, D_beta, B_lam, D_lam, B_F, D_F


def poisson_cdf_series(m, lam):
    """Poisson CDF at integer m by direct term summation with fsum."""
    if m < 0:
        return 0.0
    terms = []
    log_term = -lam
    for t in range(int(m) + 1):
        terms.append(math.exp(log_term))
        log_term += math.log(lam) - math.log(t + 1)
    return math.fsum(terms)
