"""Monte Carlo harness: censored-logistic dyadic designs and coverage studies.

The data-generating process is a censored location model whose latent
error is logistic, so its conditional CDF is exactly the two-way logit
distribution-regression model with closed-form true parameters.  The
built-in calibrator draws trade-like covariates (a symmetric
log-distance-like continuous covariate from latent node positions and a
legal-family match indicator) held fixed across replicates.

Seeding: covariates, replicate errors, and bootstrap draws live in
disjoint counter-based streams keyed off the design seed, so studies are
bit-reproducible regardless of execution order or thread count.
"""

from __future__ import annotations

import pickle
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit, ndtr

from .errors import DrnetError, ValidationError
from .felogit import SolverOptions
from .inference import normal_quantile
from .panel import DyadPanel, ThresholdGrid, TreatmentSpec, \
    counterfactual_covariates
from .pipeline import bootstrap_grid, run_grid
from .quantiles import average_effect
from .bias import shape_restrict

__all__ = ["McDesign", "McReport", "synthetic_design", "simulate_panel",
           "true_dr_params", "true_distribution", "design_grid", "run_study"]

SIGMA_LOGISTIC = np.pi / np.sqrt(3.0)

_COV_TAG = 0x434F56      # stream tags keep the Philox key spaces disjoint
_SIM_TAG = 0x53494D


def _stream(seed: int, tag: int, index: int) -> np.random.Generator:
    key = np.array([seed, (tag << 32) | index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class McDesign:
    """Fixed design for a coverage study.

    beta_star holds the outcome-position (intercept) coefficient first and
    the real covariate coefficients after it; only the latter are
    estimable under two-way effects.
    """

    n_senders: int
    n_receivers: int
    sender: np.ndarray
    receiver: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple
    beta_star: np.ndarray
    alpha_star: np.ndarray
    gamma_star: np.ndarray
    sigma_star: float
    error_mode: str = "independent"
    rho: float = 0.75
    grid_indices: tuple = tuple(np.round(np.arange(0.54, 0.951, 0.01), 2))
    n_sims: int = 200
    n_draws: int = 200
    seed: int = 0
    level: float = 0.95
    treatment: TreatmentSpec = field(
        default_factory=lambda: TreatmentSpec(0, kind="log_double"))

    @property
    def n(self) -> int:
        return self.sender.shape[0]

    @property
    def d_x(self) -> int:
        return self.covariates.shape[1]

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for arr in (self.sender, self.receiver, self.covariates,
                    self.beta_star, self.alpha_star, self.gamma_star):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr((self.sigma_star, self.error_mode, self.rho,
                       self.grid_indices, self.n_sims, self.n_draws,
                       self.seed, self.level, self.treatment)).encode())
        return h.hexdigest()[:16]


def synthetic_design(n_senders=50, n_receivers=50, error_mode="independent",
                     n_sims=200, n_draws=200, seed=0,
                     beta_star=(3.9, -1.0, 0.9), sigma_star=1.0,
                     fe_scale=0.35, role_corr=0.6, grid_indices=None,
                     level=0.95) -> McDesign:
    """Trade-like synthetic calibration.

    Covariates: a symmetric log-distance-like column (mean 4.18, sd 0.78,
    from latent node positions) and a legal-family match indicator (three
    families, match rate ~0.38).  A node's sender and receiver effects are
    Gaussian with scale fe_scale and correlation role_corr, as with
    countries whose exporter and importer sizes move together.  Defaults
    give roughly half the outcomes censored at zero.
    """
    I, J = int(n_senders), int(n_receivers)
    rng = _stream(seed, _COV_TAG, 0)
    shared_nodes = I == J
    n_nodes = I if shared_nodes else I + J
    pos = rng.normal(size=(n_nodes, 2))
    family = rng.choice(3, size=n_nodes, p=(0.5, 0.3, 0.2))

    s_idx, r_idx = np.meshgrid(np.arange(I), np.arange(J), indexing="ij")
    s_idx, r_idx = s_idx.ravel(), r_idx.ravel()
    if shared_nodes:
        keep = s_idx != r_idx
        s_idx, r_idx = s_idx[keep], r_idx[keep]
        r_nodes = np.arange(J)
    else:
        r_nodes = I + np.arange(J)

    dist = np.linalg.norm(pos[s_idx] - pos[r_nodes[r_idx]], axis=1)
    ldist = np.log(np.maximum(dist, 1e-6))
    ldist = 4.18 + 0.78 * (ldist - ldist.mean()) / ldist.std()
    legal = (family[s_idx] == family[r_nodes[r_idx]]).astype(float)
    covariates = np.column_stack([ldist, legal])

    node_effect = fe_scale * rng.standard_normal(n_nodes)
    own = fe_scale * rng.standard_normal(n_nodes)
    alpha_star = node_effect[:I]
    gamma_star = (role_corr * node_effect[r_nodes]
                  + np.sqrt(1.0 - role_corr ** 2) * own[r_nodes])
    if grid_indices is None:
        grid_indices = tuple(np.round(np.arange(0.54, 0.951, 0.01), 2))
    return McDesign(
        n_senders=I, n_receivers=J, sender=s_idx, receiver=r_idx,
        covariates=covariates, covariate_names=("ldist", "legal"),
        beta_star=np.asarray(beta_star, dtype=float),
        alpha_star=alpha_star, gamma_star=gamma_star,
        sigma_star=float(sigma_star), error_mode=error_mode,
        grid_indices=tuple(grid_indices), n_sims=int(n_sims),
        n_draws=int(n_draws), seed=int(seed), level=level)


def _latent_index(design: McDesign) -> np.ndarray:
    return (design.beta_star[0]
            + design.covariates @ design.beta_star[1:]
            + design.alpha_star[design.sender]
            + design.gamma_star[design.receiver])


def _pair_structure(design: McDesign):
    """(first_occurrence mask, partner row or -1) for symmetric dyads."""
    lookup = {(i, j): row for row, (i, j)
              in enumerate(zip(design.sender, design.receiver))}
    partner = np.array([lookup.get((j, i), -1)
                        for i, j in zip(design.sender, design.receiver)],
                       dtype=np.int64)
    first = np.ones(design.n, dtype=bool)
    seen = set()
    for row, (i, j) in enumerate(zip(design.sender, design.receiver)):
        key = (min(i, j), max(i, j)) if design.n_senders == design.n_receivers \
            else (row,)
        if key in seen:
            first[row] = False
        seen.add(key)
    return first, partner


def simulate_panel(design: McDesign, s: int) -> DyadPanel:
    """Replicate s of the censored-logistic outcome process."""
    gen = _stream(design.seed, _SIM_TAG, s)
    if design.error_mode == "independent":
        u = gen.uniform(size=design.n)
    elif design.error_mode == "pairwise":
        e = gen.standard_normal(design.n)
        first, partner = _pair_structure(design)
        z = e.copy()
        mix = ~first & (partner >= 0)
        z[mix] = design.rho * e[partner[mix]] \
            + np.sqrt(1.0 - design.rho ** 2) * e[mix]
        u = ndtr(z)
    else:
        raise ValidationError(f"unknown error mode {design.error_mode!r}")
    noise = 0.0 if design.sigma_star == 0 \
        else design.sigma_star * logit(u) / SIGMA_LOGISTIC
    y = np.maximum(_latent_index(design) + noise, 0.0)
    return DyadPanel.from_arrays(
        sender=design.sender, receiver=design.receiver, outcome=y,
        covariates=design.covariates,
        covariate_names=design.covariate_names,
        sender_labels=tuple(range(design.n_senders)),
        receiver_labels=tuple(range(design.n_receivers)))


def true_dr_params(design: McDesign, y: float):
    """Closed-form DR truth at threshold y.

    Returns (beta_full, alpha, gamma): beta_full[0] is the
    outcome-position (intercept-slot) coefficient carrying the y term;
    beta_full[1:] are the estimable covariate coefficients, constant in y.
    """
    scale = SIGMA_LOGISTIC / design.sigma_star
    e1y = np.zeros_like(design.beta_star)
    e1y[0] = y
    beta_full = scale * (e1y - design.beta_star)
    return (beta_full, -scale * design.alpha_star,
            -scale * design.gamma_star)


def true_distribution(design: McDesign, y, covariates=None) -> np.ndarray:
    """True counterfactual CDF value(s) at threshold(s) y."""
    x = design.covariates if covariates is None else covariates
    base = (design.beta_star[0] + x @ design.beta_star[1:]
            + design.alpha_star[design.sender]
            + design.gamma_star[design.receiver])
    scale = SIGMA_LOGISTIC / design.sigma_star
    ys = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.array([expit(scale * (yy - base)).mean() for yy in ys])
    return out if np.ndim(y) else float(out[0])


def design_grid(design: McDesign) -> ThresholdGrid:
    """Population quantile grid at the design's indices (fixed across
    replicates)."""
    lo, hi = 0.0, 1.0
    top = max(design.grid_indices)
    while true_distribution(design, hi) < top:
        hi *= 2.0
        if hi > 1e12:
            raise ValidationError("could not bracket the grid quantiles")
    vals = []
    for tau in design.grid_indices:
        a, b = lo, hi
        if true_distribution(design, a) >= tau:
            vals.append(a)
            continue
        for _ in range(200):
            mid = 0.5 * (a + b)
            if true_distribution(design, mid) < tau:
                a = mid
            else:
                b = mid
        vals.append(b)
    vals = np.unique(np.asarray(vals))
    return ThresholdGrid(values=vals, region=(0.0, float(vals[-1])))


# -- study ------------------------------------------------------------------

MODES = ("independent", "pairwise")
CENTERS = ("uncorrected", "corrected")


def _rep_seed(design: McDesign, s: int) -> int:
    return int((design.seed * 0x9E3779B97F4A7C15 + 0xB00 + s) % (2 ** 63))


def run_replicate(design: McDesign, s: int, grid: ThresholdGrid,
                  truth: dict) -> dict:
    """Fit one simulated panel and record everything the report needs."""
    panel = simulate_panel(design, s)
    cfs = {0: counterfactual_covariates(panel, design.treatment, 0),
           1: counterfactual_covariates(panel, design.treatment, 1)}
    res = run_grid(panel, grid, cfs, opts=SolverOptions(),
                   variant="star", cluster_modes=MODES)
    rec = {"s": s,
           "beta_hat": res.beta_hat, "beta_tilde": res.beta_tilde,
           "F_hat": res.F_hat, "F_corr": res.F_corrected,
           "sigma_beta": res.sigma_beta, "sigma_F": res.sigma_F,
           "n_clamped": int(res.n_clamped.sum())}

    centers_beta = {"uncorrected": res.beta_hat, "corrected": res.beta_tilde}
    centers_F = {"uncorrected": res.F_hat, "corrected": res.F_corrected}
    z = normal_quantile(design.level)
    boot = {}
    for mode in MODES:
        b, scheme = bootstrap_grid(panel, res, _rep_seed(design, s),
                                   design.n_draws, mode,
                                   levels=(design.level,))
        boot[mode] = (b, scheme)
        rec[f"crit_beta_{mode}"] = b.crit_beta[design.level]
        rec[f"crit_F_{mode}"] = b.crit_F[design.level]

    d = design.d_x
    for mode in MODES:
        bres = boot[mode][0]
        sig_b = res.sigma_beta[mode]
        sig_f = res.sigma_F[mode]
        for center in CENTERS:
            cb = centers_beta[center]
            cf = centers_F[center]
            for ell in range(d):
                for kind, crit in (("uniform", bres.crit_beta[design.level]),
                                   ("pointwise", z)):
                    ok = np.all(np.abs(cb[:, ell] - truth["beta"][ell])
                                <= crit * sig_b[:, ell])
                    rec[f"cov_beta{ell}_{center}_{mode}_{kind}"] = bool(ok)
            for kind, crit in (("uniform", bres.crit_F[design.level]),
                               ("pointwise", z)):
                ok = np.all(np.abs(cf - truth["F"]) <= crit * sig_f)
                rec[f"cov_F_{center}_{mode}_{kind}"] = bool(ok)

    # average effect on the shaped corrected series, both cluster modes
    f0 = shape_restrict(res.F_corrected[:, 0])
    f1 = shape_restrict(res.F_corrected[:, 1])
    recip = panel.reciprocal_rows
    for mode in MODES:
        eff = average_effect(grid.values, grid.region, f0, f1, res.phi_grid,
                             mode, recip=recip, level=design.level)
        rec[f"delta_{mode}"] = eff.delta
        rec[f"delta_se_{mode}"] = eff.se
        rec[f"cov_delta_{mode}"] = bool(
            abs(eff.delta - truth["delta"]) <= normal_quantile(design.level)
            * eff.se)
    return rec


def _truth_for(design: McDesign, grid: ThresholdGrid) -> dict:
    beta_full, _, _ = true_dr_params(design, 0.0)
    cf1 = design.covariates.copy()
    if design.treatment.kind == "binary":
        cf1[:, design.treatment.treatment_index] = 1.0
        cf0 = design.covariates.copy()
        cf0[:, design.treatment.treatment_index] = 0.0
    else:
        shift = np.log(2.0) if design.treatment.kind == "log_double" \
            else design.treatment.amount
        cf1[:, design.treatment.treatment_index] += shift
        cf0 = design.covariates
    F_true = np.column_stack([
        true_distribution(design, grid.values, cf0),
        true_distribution(design, grid.values, cf1)])
    from .quantiles import _counterfactual_mean
    mu0 = _counterfactual_mean(grid.values, F_true[:, 0], grid.region)
    mu1 = _counterfactual_mean(grid.values, F_true[:, 1], grid.region)
    return {"beta": beta_full[1:], "F": F_true, "delta": mu1 - mu0}


@dataclass(frozen=True)
class McReport:
    """Aggregated study results.

    summary: {(target, center, mode): {coverage_uniform,
    coverage_pointwise, avg_length, avg_crit, se_sd}}; curves:
    {(target, center): (grid, truth, bias_pct, sd_pct, rmse_pct)}.
    """

    design_fingerprint: str
    error_mode: str
    n_sims: int
    n_failed: int
    grid: np.ndarray
    summary: dict
    curves: dict
    delta: dict

    def summary_rows(self):
        for (target, center, mode), vals in sorted(self.summary.items()):
            yield {"target": target, "center": center, "cluster": mode,
                   **vals}


def _percent_curves(estimates: np.ndarray, truth) -> tuple:
    """bias/SD/RMSE over replicates (axis 0), in percent of truth."""
    truth = np.asarray(truth, dtype=float)
    bias = estimates.mean(axis=0) - truth
    sd = estimates.std(axis=0)
    rmse = np.sqrt(bias ** 2 + sd ** 2)
    denom = np.where(np.abs(truth) < 1e-12, np.nan, np.abs(truth))
    return 100 * bias / denom, 100 * sd / denom, 100 * rmse / denom


def run_study(design: McDesign, threads: int = 1, checkpoint_path=None,
              progress=None) -> McReport:
    """Run the full coverage study; resumable via checkpoint_path."""
    grid = design_grid(design)
    truth = _truth_for(design, grid)
    fingerprint = design.fingerprint()

    records = {}
    if checkpoint_path is not None:
        try:
            with open(checkpoint_path, "rb") as fh:
                saved = pickle.load(fh)
            if saved.get("fingerprint") == fingerprint:
                records = saved["records"]
        except FileNotFoundError:
            pass

    failures = {}
    todo = [s for s in range(design.n_sims) if s not in records]

    def save_checkpoint():
        if checkpoint_path is not None:
            with open(checkpoint_path, "wb") as fh:
                pickle.dump({"fingerprint": fingerprint,
                             "records": records}, fh)

    def handle(s, outcome):
        if isinstance(outcome, Exception):
            failures[s] = str(outcome)
        else:
            records[s] = outcome
        if progress is not None:
            progress(len(records) + len(failures), design.n_sims)
        if (len(records) + len(failures)) % 25 == 0:
            save_checkpoint()

    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {s: pool.submit(run_replicate, design, s, grid, truth)
                       for s in todo}
            for s in todo:
                try:
                    handle(s, futures[s].result())
                except DrnetError as exc:
                    handle(s, exc)
    else:
        for s in todo:
            try:
                handle(s, run_replicate(design, s, grid, truth))
            except DrnetError as exc:
                handle(s, exc)
    save_checkpoint()

    if len(failures) > 0.01 * design.n_sims:
        raise DrnetError(
            f"{len(failures)}/{design.n_sims} replicates failed: "
            f"{dict(list(failures.items())[:3])}")

    order = sorted(records)
    S = len(order)
    d = design.d_x
    G = len(grid)
    get = lambda key: np.stack([records[s][key] for s in order])

    beta_hat = get("beta_hat")          # (S, G, d)
    beta_tilde = get("beta_tilde")
    F_hat = get("F_hat")                # (S, G, 2)
    F_corr = get("F_corr")
    est_beta = {"uncorrected": beta_hat, "corrected": beta_tilde}
    est_F = {"uncorrected": F_hat, "corrected": F_corr}

    summary = {}
    curves = {}
    names = design.covariate_names
    for center in CENTERS:
        for ell in range(d):
            curves[(f"beta_{names[ell]}", center)] = (
                grid.values, np.full(G, truth["beta"][ell]),
                *_percent_curves(est_beta[center][:, :, ell],
                                 truth["beta"][ell]))
        for k in (0, 1):
            curves[(f"F_{k}", center)] = (
                grid.values, truth["F"][:, k],
                *_percent_curves(est_F[center][:, :, k], truth["F"][:, k]))

    z = normal_quantile(design.level)
    for mode in MODES:
        sig_b = np.stack([records[s]["sigma_beta"][mode] for s in order])
        sig_f = np.stack([records[s]["sigma_F"][mode] for s in order])
        crit_b = np.array([records[s][f"crit_beta_{mode}"] for s in order])
        crit_f = np.array([records[s][f"crit_F_{mode}"] for s in order])
        for center in CENTERS:
            for ell in range(d):
                sd = est_beta[center][:, :, ell].std(axis=0)
                summary[(f"beta_{names[ell]}", center, mode)] = {
                    "coverage_uniform": np.mean(
                        [records[s][f"cov_beta{ell}_{center}_{mode}_uniform"]
                         for s in order]),
                    "coverage_pointwise": np.mean(
                        [records[s][f"cov_beta{ell}_{center}_{mode}_pointwise"]
                         for s in order]),
                    "avg_length": float(
                        (2 * crit_b[:, None] * sig_b[:, :, ell]).mean()),
                    "avg_crit": float(crit_b.mean()),
                    "se_sd": float((sig_b[:, :, ell].mean(axis=0)
                                    / np.where(sd == 0, np.nan, sd)).mean()),
                }
            sd_f = est_F[center].std(axis=0)                # (G, 2)
            summary[("F", center, mode)] = {
                "coverage_uniform": np.mean(
                    [records[s][f"cov_F_{center}_{mode}_uniform"]
                     for s in order]),
                "coverage_pointwise": np.mean(
                    [records[s][f"cov_F_{center}_{mode}_pointwise"]
                     for s in order]),
                "avg_length": float(
                    (2 * crit_f[:, None, None] * sig_f).mean()),
                "avg_crit": float(crit_f.mean()),
                "se_sd": float((sig_f.mean(axis=0)
                                / np.where(sd_f == 0, np.nan, sd_f)).mean()),
            }

    delta = {}
    for mode in MODES:
        vals = np.array([records[s][f"delta_{mode}"] for s in order])
        ses = np.array([records[s][f"delta_se_{mode}"] for s in order])
        delta[mode] = {
            "truth": truth["delta"],
            "mean": float(vals.mean()),
            "sd": float(vals.std()),
            "avg_se": float(ses.mean()),
            "coverage": float(np.mean(
                [records[s][f"cov_delta_{mode}"] for s in order])),
        }

    return McReport(design_fingerprint=fingerprint,
                    error_mode=design.error_mode, n_sims=S,
                    n_failed=len(failures), grid=grid.values,
                    summary=summary, curves=curves, delta=delta)
