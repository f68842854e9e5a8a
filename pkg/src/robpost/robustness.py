"""Worst-case-bias analytics over divergence neighborhoods.

Implements the local bias expansion b_eps = |leading| + sqrt(eps) * slope
for asymptotically linear estimators, the posterior informativeness R^2 and
the posterior/model bias ratio, asymptotic covariances of the model-based
and posterior average estimators, bias-aware confidence intervals, a
chi-square specification test, and the analogous expansion for worst-case
mean squared prediction error.  Everything starred (reference-model
expectations) is computed by simulation under the fitted reference law.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as _sps

from .divergences import DivergenceSpec
from .framework import PosteriorLaw, ReferenceModel, posterior_average_estimate
from .stats_core import KernelSpec, RngStream, normal_quantile, nw_regress

__all__ = [
    "DivergenceSpec",
    "BiasReport",
    "local_bias",
    "informativeness_r2",
    "bias_ratio",
    "asymptotic_variance",
    "bias_aware_ci",
    "specification_test",
    "prediction_error_expansion",
]

DEFAULT_DRAWS = 50_000


@dataclass
class BiasReport:
    """Local worst-case-bias expansion of one estimator map."""

    leading: float
    slope: float
    lambda_: np.ndarray
    epsilon: np.ndarray
    envelope: np.ndarray
    mc_se: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "leading": self.leading,
                "slope": self.slope,
                "lambda": np.asarray(self.lambda_).tolist(),
                "epsilon": np.asarray(self.epsilon).tolist(),
                "envelope": np.asarray(self.envelope).tolist(),
                "mc_se": self.mc_se,
            }
        )


# ---------------------------------------------------------------------------
# Reference-simulation helpers
# ---------------------------------------------------------------------------

def _simulate(model: ReferenceModel, draws: int, rng: RngStream):
    from .framework import simulate_reference

    u, x, y = simulate_reference(model, draws, rng)
    return u, x, y


def _center_on_x(vals: np.ndarray, x, max_exact: int = 100) -> np.ndarray:
    """Subtract an estimate of E[vals | X]; plain mean when X is absent.

    Exact group means when X has few distinct rows, Nadaraya-Watson
    regression otherwise.
    """
    vals = np.asarray(vals, dtype=float)
    if x is None:
        return vals - vals.mean(axis=0)
    xa = np.atleast_2d(np.asarray(x, dtype=float))
    if xa.shape[0] != vals.shape[0]:
        raise ValueError("covariate rows must match the simulated sample")
    uniq, inv = np.unique(xa, axis=0, return_inverse=True)
    flat = vals if vals.ndim > 1 else vals[:, None]
    if uniq.shape[0] <= max_exact:
        out = np.empty_like(flat)
        for q in range(flat.shape[1]):
            sums = np.bincount(inv, weights=flat[:, q], minlength=uniq.shape[0])
            cnts = np.bincount(inv, minlength=uniq.shape[0])
            out[:, q] = flat[:, q] - (sums / cnts)[inv]
    else:
        out = np.empty_like(flat)
        for q in range(flat.shape[1]):
            fit = nw_regress(xa, flat[:, q], KernelSpec(), xa)
            out[:, q] = flat[:, q] - fit
    return out if vals.ndim > 1 else out[:, 0]


def _centered_psi(model: ReferenceModel, y, x) -> np.ndarray:
    """psi minus its conditional mean given X (closed form when available)."""
    if model.psi is None:
        return np.zeros((np.asarray(y).shape[0], 0))
    p = np.atleast_2d(model.psi(y, x))
    if p.shape[1] == 0:
        return p
    if model.psi_cond_mean is not None:
        return p - model.psi_cond_mean(x, n=p.shape[0])
    return _center_on_x(p, x)


def _project_out(vals: np.ndarray, psi_t: np.ndarray, include_const: bool = True):
    """Residual of vals on (constant, centered psi); returns (resid, coef)."""
    s = vals.shape[0]
    cols = [np.ones((s, 1))] if include_const else []
    if psi_t.shape[1]:
        gram_ok = np.linalg.matrix_rank(psi_t.T @ psi_t / s) == psi_t.shape[1]
        if not gram_ok:
            warnings.warn("collinear moment components dropped from the projection", RuntimeWarning)
            _, idx = np.unique(np.round(psi_t.T @ psi_t, 12), axis=0, return_index=True)
            psi_t = psi_t[:, sorted(idx)]
        cols.append(psi_t)
    if not cols:
        return vals, np.zeros(0)
    a = np.column_stack(cols)
    coef, *_ = np.linalg.lstsq(a, vals, rcond=None)
    return vals - a @ coef, coef


def _tail_diagnostic(vals: np.ndarray, power: float, label: str) -> None:
    """Crude finite-moment check: no single draw may dominate the moment."""
    mom = np.abs(vals) ** power
    tot = mom.sum()
    if tot > 0 and mom.max() / tot > 0.5:
        warnings.warn(
            f"heavy-tail diagnostic: one draw carries {mom.max() / tot:.0%} of the "
            f"order-{power:g} moment of {label}; the expansion may be unreliable",
            RuntimeWarning,
        )


def _scalar_target(vals: np.ndarray) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if vals.ndim == 2:
        if vals.shape[1] != 1:
            raise ValueError("this operation expects a scalar target; run componentwise")
        vals = vals[:, 0]
    return vals


# ---------------------------------------------------------------------------
# Local bias expansion
# ---------------------------------------------------------------------------

def local_bias(
    model: ReferenceModel,
    gamma,
    div: DivergenceSpec = DivergenceSpec("chi2"),
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
    epsilon_grid=None,
) -> BiasReport:
    """Leading term and sqrt(eps) slope of the worst-case bias of ``gamma``.

    ``gamma`` maps observations to estimator values, gamma(y, x) -> (n,).
    The slope is {(2/phi''(1)) Var(gamma - delta - E[gamma - delta | X] -
    lambda' psi_tilde)}^(1/2) with lambda the least-squares coefficient of
    (gamma - delta) on the centered moments, all estimated on ``draws``
    reference simulations with Monte Carlo standard errors attached.
    """
    rng = rng or RngStream(0, 0)
    u, x, y = _simulate(model, draws, rng)
    d = np.asarray(gamma(y, x), dtype=float).reshape(draws) - _scalar_target(model.delta(u, x))
    _tail_diagnostic(d, 2, "gamma - delta")
    psi_t = _centered_psi(model, y, x)
    leading = float(abs(d.mean()))
    se_leading = float(d.std(ddof=1) / math.sqrt(draws))
    d_c = _center_on_x(d, x)
    resid, coef = _project_out(d_c, psi_t, include_const=(x is None))
    lam = coef[1:] if (x is None and coef.size) else coef
    var = float(resid.var(ddof=0))
    slope = math.sqrt(2.0 / div.curvature * var)
    m4 = float(np.mean((resid**2 - var) ** 2))
    se_var = math.sqrt(m4 / draws)
    se_slope = (2.0 / div.curvature) * se_var / (2.0 * slope) if slope > 0 else 0.0
    eps = np.asarray(
        np.logspace(-4, 0, 9) if epsilon_grid is None else np.asarray(epsilon_grid, dtype=float)
    )
    return BiasReport(
        leading=leading,
        slope=slope,
        lambda_=np.asarray(lam, dtype=float).reshape(-1),
        epsilon=eps,
        envelope=leading + slope * np.sqrt(eps),
        mc_se={"leading": se_leading, "slope": float(se_slope)},
    )


# ---------------------------------------------------------------------------
# Posterior informativeness
# ---------------------------------------------------------------------------

def _informativeness_pieces(model: ReferenceModel, draws: int, rng: RngStream):
    if model.posterior_mean is None or model.model_mean is None:
        raise ValueError("informativeness needs closed-form posterior and model means")
    u, x, y = _simulate(model, draws, rng)
    delta_v = np.atleast_2d(np.asarray(model.delta(u, x), dtype=float).T).T
    if delta_v.ndim == 1:
        delta_v = delta_v[:, None]
    gam_m = model.model_mean(x, n=draws) if x is not None else model.model_mean(n=draws)
    post = np.atleast_2d(np.asarray(model.posterior_mean(y, x), dtype=float).T).T
    psi_t = _centered_psi(model, y, x)
    v_raw = delta_v - gam_m
    a = np.column_stack([np.ones((draws, 1))] + ([psi_t] if psi_t.shape[1] else []))
    coef, *_ = np.linalg.lstsq(a, v_raw, rcond=None)
    v = v_raw - a @ coef
    ev = post - gam_m - a @ coef
    return v, ev


def informativeness_r2(
    model: ReferenceModel,
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
) -> np.ndarray:
    """Share of the robust residual's variance explained by the conditioning.

    R^2 = Var(E[v | Y, X]) / Var(v) per target component, where v is the
    residual of (delta - model mean) on a constant and the centered moments,
    computed under the reference simulation.
    """
    rng = rng or RngStream(0, 0)
    v, ev = _informativeness_pieces(model, draws, rng)
    var_v = v.var(axis=0, ddof=0)
    if np.any(var_v <= 0):
        raise ValueError("degenerate target: the robust residual has zero variance")
    r2 = ev.var(axis=0, ddof=0) / var_v
    return r2 if r2.size > 1 else float(r2[0])


def bias_ratio(
    model: ReferenceModel,
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
) -> np.ndarray:
    """First-order posterior/model worst-case bias ratio.

    Equals {Var(v - E[v | Y, X]) / Var(v)}^(1/2); its square plus the
    informativeness R^2 is one by construction.
    """
    rng = rng or RngStream(0, 0)
    v, ev = _informativeness_pieces(model, draws, rng)
    var_v = v.var(axis=0, ddof=0)
    if np.any(var_v <= 0):
        raise ValueError("degenerate target: the robust residual has zero variance")
    ratio = np.sqrt((v - ev).var(axis=0, ddof=0) / var_v)
    return ratio if ratio.size > 1 else float(ratio[0])


# ---------------------------------------------------------------------------
# Asymptotic covariance, confidence intervals, specification test
# ---------------------------------------------------------------------------

def _fd_gradients(model: ReferenceModel, y, x, rel_step: float = 1e-5):
    """Central finite differences of the model and posterior means in theta.

    Evaluated on a fixed simulated sample; a half-step Richardson pass warns
    when the two estimates differ beyond 1e-3 relative.
    """
    if model.with_params is None:
        raise ValueError(f"model {model.name!r} cannot be rebuilt at perturbed parameters")
    theta = model.theta[: model.n_params]
    s = np.asarray(y).shape[0]

    def means_at(th):
        m = model.with_params(th)
        mm = m.model_mean(x, n=s) if x is not None else m.model_mean(n=s)
        pm = np.atleast_2d(np.asarray(m.posterior_mean(y, x), dtype=float).T).T
        return float(np.mean(mm)), float(np.mean(pm))

    def grad(step_scale):
        g1 = np.zeros(theta.size)
        g2 = np.zeros(theta.size)
        for j in range(theta.size):
            h = step_scale * max(abs(theta[j]), 1.0)
            tp, tm = theta.copy(), theta.copy()
            tp[j] += h
            tm[j] -= h
            m_p, p_p = means_at(tp)
            m_m, p_m = means_at(tm)
            g1[j] = (m_p - m_m) / (2 * h)
            g2[j] = (p_p - p_m) / (2 * h)
        return g1, g2

    g1, g2 = grad(rel_step)
    g1h, g2h = grad(rel_step / 2)
    for full, half, name in ((g1, g1h, "G1"), (g2, g2h, "G2")):
        denom = max(float(np.max(np.abs(half))), 1e-12)
        if float(np.max(np.abs(full - half))) / denom > 1e-3:
            warnings.warn(f"finite-difference gradient {name} failed its half-step check", RuntimeWarning)
    if not (np.all(np.isfinite(g1h)) and np.all(np.isfinite(g2h))):
        raise FloatingPointError("non-finite finite-difference gradient")
    return g1h, g2h


def asymptotic_variance(
    model: ReferenceModel,
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
    influence_h=None,
) -> dict:
    """Joint asymptotic covariance of the model-based and posterior estimators.

    Sigma11 = Var(G1'h + E[delta|X]), Sigma22 = Var(G2'h + E[delta|Y,X]),
    Sigma12 their covariance, estimated under the reference simulation with
    finite-difference parameter gradients.  ``influence_h`` overrides the
    model's influence function (pass a zero map for known parameters).
    """
    rng = rng or RngStream(0, 0)
    if model.posterior_mean is None or model.model_mean is None:
        raise ValueError("asymptotic variance needs closed-form conditional means")
    u, x, y = _simulate(model, draws, rng)
    post = _scalar_target(model.posterior_mean(y, x))
    mm = _scalar_target(model.model_mean(x, n=draws) if x is not None else model.model_mean(n=draws))
    h_fn = influence_h if influence_h is not None else model.influence_h
    if h_fn is None:
        hv = np.zeros((draws, model.n_params or 1))
        g1 = g2 = np.zeros(hv.shape[1])
    else:
        hv = np.atleast_2d(np.asarray(h_fn(y, x), dtype=float))
        g1, g2 = _fd_gradients(model, y, x)
        if g1.size != hv.shape[1]:
            raise ValueError("influence dimension does not match the parameter count")
    col_m = hv @ g1 + mm
    col_p = hv @ g2 + post
    sig = np.cov(np.column_stack([col_m, col_p]).T, ddof=1)
    eig = np.linalg.eigvalsh(sig)
    projected = bool(eig.min() < -1e-12)
    if projected:
        w, v = np.linalg.eigh(sig)
        sig = (v * np.maximum(w, 0.0)) @ v.T
    return {
        "sigma": sig,
        "sigma11": float(sig[0, 0]),
        "sigma12": float(sig[0, 1]),
        "sigma22": float(sig[1, 1]),
        "g1": g1,
        "g2": g2,
        "projected_to_psd": projected,
    }


def bias_aware_ci(
    estimate: float,
    slope: float,
    sigma22: float,
    n: int,
    epsilon: float,
    level: float = 0.95,
) -> tuple[float, float]:
    """Wald interval widened by the local worst-case bias bound.

    Half-width = sqrt(epsilon) * slope + z_level * sqrt(sigma22 / n); with
    epsilon = 0 this is the standard interval.
    """
    if slope < 0 or sigma22 < 0 or epsilon < 0:
        raise ValueError("slope, sigma22 and epsilon must be nonnegative")
    z = float(normal_quantile(0.5 + level / 2.0))
    half = math.sqrt(epsilon) * slope + z * math.sqrt(sigma22 / n)
    return (estimate - half, estimate + half)


def specification_test(
    model: ReferenceModel,
    data,
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
) -> dict:
    """Chi-square(1) test of correct specification of the latent law.

    Compares the posterior average and model-based estimates of a scalar
    target, studentized by the simulated variance of their influence
    difference (conditioning gap plus parameter-estimation effect).
    """
    rng = rng or RngStream(0, 0)
    y_data, x_data = data if isinstance(data, tuple) else (data, None)
    n = np.asarray(y_data).shape[0]
    post_hat = posterior_average_estimate(model, data)
    mm_data = model.model_mean(x_data, n=n) if x_data is not None else model.model_mean(n=n)
    model_hat = float(np.mean(_scalar_target(mm_data)))
    post_hat = float(np.mean(_scalar_target(np.asarray(model.posterior_mean(y_data, x_data)))))

    u, x, y = _simulate(model, draws, rng)
    post = _scalar_target(model.posterior_mean(y, x))
    mm = _scalar_target(model.model_mean(x, n=draws) if x is not None else model.model_mean(n=draws))
    core = post - mm
    if model.influence_h is not None and model.with_params is not None:
        hv = np.atleast_2d(np.asarray(model.influence_h(y, x), dtype=float))
        g1, g2 = _fd_gradients(model, y, x)
        core = core + hv @ (g2 - g1)
    sigma_tilde = float(core.var(ddof=1))
    if sigma_tilde <= 0 or not math.isfinite(sigma_tilde):
        raise FloatingPointError(f"degenerate studentization variance {sigma_tilde!r}")
    diff = post_hat - model_hat
    statistic = n * diff**2 / sigma_tilde
    return {
        "statistic": float(statistic),
        "p_value": float(_sps.chi2.sf(statistic, df=1)),
        "posterior_estimate": post_hat,
        "model_estimate": model_hat,
        "sigma_tilde": sigma_tilde,
    }


# ---------------------------------------------------------------------------
# Prediction-error expansion
# ---------------------------------------------------------------------------

def prediction_error_expansion(
    model: ReferenceModel,
    gamma,
    div: DivergenceSpec = DivergenceSpec("chi2"),
    draws: int = DEFAULT_DRAWS,
    rng: RngStream | None = None,
) -> dict:
    """Leading term and sqrt(eps) slope of the worst-case squared prediction error.

    The leading term is E[(gamma - delta)^2]; the slope applies the local
    expansion to the squared error.  Also runs a Monte Carlo test of the
    conditional-symmetry condition under which the posterior mean minimizes
    the slope as well as the leading term.
    """
    rng = rng or RngStream(0, 0)
    u, x, y = _simulate(model, draws, rng)
    d = np.asarray(gamma(y, x), dtype=float).reshape(draws) - _scalar_target(model.delta(u, x))
    _tail_diagnostic(d, 6, "gamma - delta")
    sq = d**2
    leading = float(sq.mean())
    psi_t = _centered_psi(model, y, x)
    sq_c = _center_on_x(sq, x)
    resid, coef = _project_out(sq_c, psi_t, include_const=(x is None))
    lam = coef[1:] if (x is None and coef.size) else coef
    slope = math.sqrt(2.0 / div.curvature * float(resid.var(ddof=0)))
    skew_ok = None
    if model.posterior_mean is not None:
        post = _scalar_target(model.posterior_mean(y, x))
        r3 = (_scalar_target(model.delta(u, x)) - post) ** 3
        edges = np.quantile(post, np.linspace(0, 1, 11))
        bins = np.clip(np.searchsorted(edges, post, side="right") - 1, 0, 9)
        tstats = []
        for b in range(10):
            sel = bins == b
            if sel.sum() >= 30:
                tstats.append(abs(r3[sel].mean()) / max(r3[sel].std(ddof=1) / math.sqrt(sel.sum()), 1e-300))
        skew_ok = bool(tstats) and all(t < 3.0 for t in tstats)
    return {
        "leading": leading,
        "slope": slope,
        "lambda": np.asarray(lam, dtype=float).reshape(-1),
        "mc_se": {"leading": float(sq.std(ddof=1) / math.sqrt(draws))},
        "posterior_skewness_zero": skew_ok,
    }
