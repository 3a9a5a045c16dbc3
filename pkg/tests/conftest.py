import numpy as np
import pytest

from drnet.panel import DyadPanel


def complete_panel(I, J, outcome, covariates, missing_diagonal=False):
    """Panel over the full I x J pair set (optionally minus the diagonal)."""
    s_idx, r_idx = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    s_idx, r_idx = s_idx.ravel(), r_idx.ravel()
    keep = np.ones(s_idx.size, dtype=bool)
    if missing_diagonal:
        keep = s_idx != r_idx
    return DyadPanel.from_arrays(
        sender=s_idx[keep], receiver=r_idx[keep],
        outcome=np.asarray(outcome, dtype=float).ravel()[keep],
        covariates=np.asarray(covariates, dtype=float)[keep],
    )


def _unit_separation_free(panel, b):
    for i in range(panel.n_senders):
        rows = panel.sender == i
        if not 0 < b[rows].sum() < rows.sum():
            return False
    for j in range(panel.n_receivers):
        rows = panel.receiver == j
        if not 0 < b[rows].sum() < rows.sum():
            return False
    return True


def _within_variation_ok(panel, floor=0.02):
    """Covariates keep variation after projecting out both effect sets."""
    n = panel.n
    D = np.zeros((n, panel.n_senders + panel.n_receivers))
    D[np.arange(n), panel.sender] = 1.0
    D[np.arange(n), panel.n_senders + panel.receiver] = 1.0
    coef, *_ = np.linalg.lstsq(D, panel.covariates, rcond=None)
    resid = panel.covariates - D @ coef
    if resid.shape[1] == 0:
        return True
    return np.linalg.eigvalsh(resid.T @ resid / n).min() > floor


def random_panel(rng, I, J, d=2, binary_col=True, missing_diagonal=False,
                 quantiles=(0.5,)):
    """Random complete panel with a continuous outcome; indicators at the
    given outcome quantiles are guaranteed non-separated per unit and the
    covariates non-collinear with the two-way effects."""
    n_full = I * J
    for _ in range(500):
        x = rng.normal(size=(n_full, d))
        if binary_col and d > 1:
            x[:, 1] = (rng.random(n_full) < 0.5).astype(float)
        y = 0.7 * x[:, 0] + (0.5 * x[:, 1] if d > 1 else 0.0) \
            + rng.normal(size=n_full) * 1.2
        panel = complete_panel(I, J, y, x, missing_diagonal=missing_diagonal)
        if not _within_variation_ok(panel):
            continue
        thresholds = [float(np.quantile(panel.outcome, q)) for q in quantiles]
        if all(_unit_separation_free(panel, panel.outcome <= t)
               for t in thresholds):
            return panel, thresholds[len(thresholds) // 2]
    raise RuntimeError("could not draw a non-separated panel")


def well_posed_panel(seed, I=None, J=None, d=2, quantiles=(0.5,)):
    """Random small panel whose logit CMLE exists and is moderate at every
    requested quantile threshold, judged by the dense-Newton oracle."""
    import oracles
    rng = np.random.default_rng(seed)
    for _ in range(200):
        i = I or int(rng.integers(3, 6))
        j = J or int(rng.integers(3, 6))
        try:
            panel, med = random_panel(rng, i, j, d=d, quantiles=quantiles)
        except RuntimeError:
            continue
        ok = True
        for q in quantiles:
            yq = float(np.quantile(panel.outcome, q))
            theta = oracles.dense_newton_logit(
                panel, (panel.outcome <= yq).astype(float))
            if np.abs(theta).max() >= 6.0:
                ok = False
                break
        if ok:
            return panel, med
    raise RuntimeError("no well-posed panel found")


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture(scope="session")
def small_panel():
    """Deterministic 4x4 panel, well-posed across mid quantiles."""
    panel, _ = well_posed_panel(7, I=4, J=4, quantiles=(0.3, 0.5, 0.7))
    return panel
