"""Censored, binary, and ordered threshold-crossing models.

Average structural functions in model-based and posterior-average form,
closed-form worst-case biases for the binary model (the tightness example
for the factor-2 bound), maximum score estimation on a deterministic grid,
probit-likelihood scale estimation, and truncated-normal imputation for
censored outcomes.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .framework import ReferenceModel, register_model
from .stats_core import mills_ratio_lower, normal_cdf, normal_pdf

__all__ = [
    "ChoiceModelSpec",
    "asf_model",
    "asf_posterior",
    "worst_case_bias_closed_form",
    "ordered_asf",
    "max_score",
    "ordered_max_score",
    "probit_sigma",
    "ordered_probit_sigma",
    "censored_posterior",
    "censored_cell_mean",
]


@dataclass(frozen=True)
class ChoiceModelSpec:
    """Index coefficients, scale, and (for ordered models) thresholds."""

    beta: np.ndarray
    sigma: float = 1.0
    thresholds: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "beta", np.atleast_1d(np.asarray(self.beta, dtype=float)))
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.thresholds is not None:
            th = np.asarray(self.thresholds, dtype=float)
            if np.any(np.diff(th) <= 0):
                raise ValueError("thresholds must be strictly increasing")
            object.__setattr__(self, "thresholds", th)

    @property
    def n_categories(self) -> int:
        if self.thresholds is None:
            raise ValueError("no thresholds: not an ordered model")
        return self.thresholds.size + 1

    def index(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x @ self.beta


# ---------------------------------------------------------------------------
# Binary choice
# ---------------------------------------------------------------------------

def asf_model(spec: ChoiceModelSpec, x) -> np.ndarray | float:
    """Average structural function under the fitted normal error law."""
    out = normal_cdf(spec.index(x) / spec.sigma)
    return float(out[0]) if out.size == 1 else out


def asf_posterior(spec: ChoiceModelSpec, y, x_data, x) -> np.ndarray | float:
    """Posterior-average structural function at covariate value(s) ``x``.

    Each observation contributes the conditional probability that the
    target index crosses zero given its own outcome and index, which has a
    min/max closed form under the normal reference.  Observations whose
    fitted choice probability is numerically 0 or 1 are dropped with a
    warning.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    p_own = np.asarray(normal_cdf(spec.index(x_data) / spec.sigma))
    keep = (p_own > 1e-12) & (p_own < 1 - 1e-12)
    if not keep.all():
        warnings.warn(
            f"dropped {int((~keep).sum())} observations with degenerate fitted choice probability",
            RuntimeWarning,
        )
        y, p_own = y[keep], p_own[keep]
    p_tgt = np.atleast_1d(normal_cdf(spec.index(x) / spec.sigma))
    ones = y[:, None]
    contrib = ones * np.minimum(p_tgt[None, :], p_own[:, None]) / p_own[:, None] + (
        1.0 - ones
    ) * np.maximum(p_tgt[None, :] - p_own[:, None], 0.0) / (1.0 - p_own[:, None])
    out = contrib.mean(axis=0)
    return float(out[0]) if out.size == 1 else out


def worst_case_bias_closed_form(xb: float, design_xb: float) -> dict:
    """Large-neighborhood worst-case biases in the one-design binary model.

    With known index coefficients and unit scale, the model-based bias is
    max(Phi(xb), 1 - Phi(xb)) and the posterior bias is
    max(Phi(xb) - Phi(design_xb), 1 - Phi(xb)) / (1 - Phi(design_xb)),
    requiring xb > design_xb.  Their ratio approaches 2 as both indexes
    shrink to zero.
    """
    if not xb > design_xb:
        raise ValueError("requires xb > design_xb")
    p_t, p_d = float(normal_cdf(xb)), float(normal_cdf(design_xb))
    bias_m = max(p_t, 1.0 - p_t)
    bias_p = max(p_t - p_d, 1.0 - p_t) / (1.0 - p_d)
    return {"bias_m": bias_m, "bias_p": bias_p, "ratio": bias_p / bias_m}


# ---------------------------------------------------------------------------
# Ordered choice
# ---------------------------------------------------------------------------

def _interval_bounds(spec: ChoiceModelSpec, xb: np.ndarray):
    """Latent-error interval (lo, hi] implied by each category, given indexes."""
    th = np.concatenate([[-np.inf], spec.thresholds, [np.inf]])
    return th[:-1][None, :] - xb[:, None], th[1:][None, :] - xb[:, None]


def ordered_asf(spec: ChoiceModelSpec, y, x_data, x, mode: str = "posterior") -> float:
    """Expected category at covariate value ``x`` (in [1, J]).

    Model mode integrates the category probabilities under the fitted
    normal; posterior mode conditions, per observation, on the error lying
    in its own category interval and applies truncated-normal interval
    algebra.  Observations with numerically empty intervals are dropped
    with a warning.
    """
    if spec.thresholds is None:
        raise ValueError("ordered_asf needs thresholds")
    j_count = spec.n_categories
    xb_t = float(np.atleast_1d(spec.index(x))[0])
    edges_t = np.concatenate([[-np.inf], spec.thresholds, [np.inf]])
    z_t = (edges_t - xb_t) / spec.sigma
    probs_t = np.diff(np.asarray(normal_cdf(z_t)))
    cats = np.arange(1, j_count + 1, dtype=float)
    if mode == "model":
        return float(cats @ probs_t)
    if mode != "posterior":
        raise ValueError(f"unknown mode {mode!r}")
    y = np.asarray(y, dtype=int).reshape(-1)
    if np.any((y < 1) | (y > j_count)):
        raise ValueError("categories must lie in 1..J")
    xb_d = spec.index(x_data)
    lo_d, hi_d = _interval_bounds(spec, xb_d)
    own_lo = lo_d[np.arange(y.size), y - 1] / spec.sigma
    own_hi = hi_d[np.arange(y.size), y - 1] / spec.sigma
    mass_own = np.asarray(normal_cdf(own_hi) - normal_cdf(own_lo))
    keep = mass_own > 1e-14
    if not keep.all():
        warnings.warn(
            f"dropped {int((~keep).sum())} observations with numerically empty category intervals",
            RuntimeWarning,
        )
        own_lo, own_hi, mass_own = own_lo[keep], own_hi[keep], mass_own[keep]
    # target category intervals in the same standardized error coordinates
    tgt_lo = (edges_t[:-1] - xb_t) / spec.sigma
    tgt_hi = (edges_t[1:] - xb_t) / spec.sigma
    lo = np.maximum(own_lo[:, None], tgt_lo[None, :])
    hi = np.minimum(own_hi[:, None], tgt_hi[None, :])
    inter = np.clip(
        np.asarray(normal_cdf(hi)) - np.asarray(normal_cdf(lo)), 0.0, None
    ) * (hi > lo)
    cond = inter / mass_own[:, None]
    return float((cond @ cats).mean())


# ---------------------------------------------------------------------------
# Maximum score and scale estimation
# ---------------------------------------------------------------------------

def max_score(
    y,
    x_data,
    normalization: str = "first_slope",
    grid_resolution: int = 401,
    coef_bound: float = 5.0,
) -> np.ndarray:
    """Maximum score estimation over a deterministic coefficient grid.

    ``first_slope`` fixes the coefficient of the first covariate at +/-1
    and grids the remaining coefficient (dimension <= 2); ``unit_norm``
    grids the angle of a unit-norm coefficient vector (dimension 2).  Ties
    break lexicographically on the grid index, so results are reproducible.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    x = np.atleast_2d(np.asarray(x_data, dtype=float))
    if x.shape[1] > 2:
        raise ValueError("grid maximum score supports at most 2 covariates")
    if np.all(y == y[0]):
        raise ValueError("outcome has no variation")
    sgn = 2.0 * y - 1.0

    def score(b):
        return float(np.sum(sgn * (2.0 * (x @ b >= 0.0) - 1.0)))

    best, best_b = -np.inf, None
    if normalization == "first_slope":
        if x.shape[1] == 1:
            candidates = [np.array([1.0]), np.array([-1.0])]
        else:
            grid = np.linspace(-coef_bound, coef_bound, grid_resolution)
            candidates = [np.array([s, g]) for s in (1.0, -1.0) for g in grid]
    elif normalization == "unit_norm":
        if x.shape[1] != 2:
            raise ValueError("unit_norm normalization needs exactly 2 covariates")
        angles = np.linspace(0.0, 2.0 * math.pi, grid_resolution, endpoint=False)
        candidates = [np.array([math.cos(a), math.sin(a)]) for a in angles]
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    for b in candidates:
        s = score(b)
        if s > best:
            best, best_b = s, b
    return best_b


def ordered_max_score(y, x_data, thresholds) -> tuple[float, float]:
    """Recover (slope, intercept) from ordered data via per-threshold scores.

    For each threshold, the binary outcome 1{Y > j} follows a
    threshold-crossing model whose index, normalized to unit slope on the
    scalar covariate, has intercept (beta0 - mu_j) / beta1.  A unit-slope
    maximum score per threshold estimates those intercepts, and a least
    squares fit of the intercepts on the thresholds recovers the scale:
    slope of the fit = -1/beta1, intercept = beta0/beta1.
    """
    y = np.asarray(y, dtype=int).reshape(-1)
    x = np.asarray(x_data, dtype=float).reshape(-1)
    th = np.asarray(thresholds, dtype=float)
    cuts = []
    for j in range(th.size):
        z = (y > j + 1).astype(float)
        if np.all(z == z[0]):
            cuts.append(np.nan)
            continue
        # score of 1{x + c >= 0} is a step function of c with breakpoints at
        # -x; evaluating just on either side of each breakpoint is exact
        cand = np.unique(np.concatenate([-x - 1e-9, -x + 1e-9]))
        scores = np.array([np.sum(z * (x + c >= 0) + (1 - z) * (x + c < 0)) for c in cand])
        cuts.append(float(cand[int(np.argmax(scores))]))
    cuts = np.asarray(cuts, dtype=float)
    ok = np.isfinite(cuts)
    if ok.sum() < 2:
        raise ValueError("too few informative thresholds to recover the scale")
    a = np.column_stack([np.ones(ok.sum()), th[ok]])
    coef, *_ = np.linalg.lstsq(a, cuts[ok], rcond=None)
    if coef[1] == 0:
        raise ValueError("degenerate threshold fit: zero slope")
    beta1 = -1.0 / coef[1]
    beta0 = coef[0] * beta1
    return float(beta1), float(beta0)


def _golden_section(fn, lo: float, hi: float, tol: float = 1e-10) -> float:
    gr = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - gr * (b - a), a + gr * (b - a)
    fc, fd = fn(c), fn(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - gr * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + gr * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def probit_sigma(y, x_data, beta) -> float:
    """Scale that maximizes the probit log-likelihood at fixed coefficients."""
    y = np.asarray(y, dtype=float).reshape(-1)
    xb = np.atleast_2d(np.asarray(x_data, dtype=float)) @ np.atleast_1d(beta)

    def neg_ll(log_s):
        p = np.clip(np.asarray(normal_cdf(xb / math.exp(log_s))), 1e-12, 1 - 1e-12)
        return -float(np.sum(y * np.log(p) + (1 - y) * np.log(1 - p)))

    return math.exp(_golden_section(neg_ll, -5.0, 5.0))


def ordered_probit_sigma(y, x_data, beta, thresholds) -> float:
    """Scale maximizing the ordered-probit log-likelihood at fixed coefficients."""
    y = np.asarray(y, dtype=int).reshape(-1)
    xb = np.atleast_2d(np.asarray(x_data, dtype=float)) @ np.atleast_1d(beta)
    th = np.concatenate([[-np.inf], np.asarray(thresholds, dtype=float), [np.inf]])
    lo = th[y - 1] - xb
    hi = th[y] - xb

    def neg_ll(log_s):
        s = math.exp(log_s)
        p = np.clip(np.asarray(normal_cdf(hi / s)) - np.asarray(normal_cdf(lo / s)), 1e-300, None)
        return -float(np.sum(np.log(p)))

    return math.exp(_golden_section(neg_ll, -5.0, 5.0))


# ---------------------------------------------------------------------------
# Censored regression
# ---------------------------------------------------------------------------

def censored_cell_mean(xb, sigma: float, h=None, nodes: int = 200) -> np.ndarray:
    """E[h(xb + U) | xb + U <= 0] for U ~ N(0, sigma^2).

    Identity targets use the truncated-normal mean in erfcx form (stable at
    any censoring depth); other targets use Gauss-Legendre quadrature on
    the truncated cell, switching to a first-order tail approximation at
    the conditional mean when the cell probability underflows.
    """
    xb = np.atleast_1d(np.asarray(xb, dtype=float))
    z0 = -xb / sigma  # censoring happens when U/sigma <= z0
    cond_mean = xb - sigma * np.asarray(mills_ratio_lower(xb / sigma))
    if h is None:
        return cond_mean
    out = np.empty(xb.size)
    t, w = np.polynomial.legendre.leggauss(nodes)
    for i, z in enumerate(z0):
        mass = float(normal_cdf(z))
        if mass < 1e-300:
            out[i] = float(h(np.array([cond_mean[i]]))[0])
            continue
        lo = min(z - 8.0, -8.0)
        u = (z - lo) / 2 * t + (z + lo) / 2
        vals = h(xb[i] + sigma * u) * normal_pdf(u)
        out[i] = float((z - lo) / 2 * (w @ vals) / mass)
    return out


def censored_posterior(spec: ChoiceModelSpec, y, x_data, h=None) -> float:
    """Posterior average of h(latent outcome) under censoring at zero.

    Uncensored observations contribute h(y) directly; censored ones
    contribute the truncated-cell conditional expectation at their index.
    ``h=None`` means the identity target.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    if np.any(y < 0):
        raise ValueError("outcomes must be censored at zero (no negatives)")
    xb = spec.index(x_data)
    censored = y <= 0
    vals = np.empty(y.size)
    vals[~censored] = y[~censored] if h is None else h(y[~censored])
    if censored.any():
        vals[censored] = censored_cell_mean(xb[censored], spec.sigma, h=h)
    return float(vals.mean())


# ---------------------------------------------------------------------------
# Reference-model registrations
# ---------------------------------------------------------------------------

@register_model("binary_choice")
def binary_choice_model(beta, sigma, x_data, target_x) -> ReferenceModel:
    """Threshold-crossing binary model with the ASF at ``target_x`` as target."""
    spec = ChoiceModelSpec(beta, sigma)
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
    xb_t = float(np.atleast_1d(spec.index(target_x))[0])
    p_t = float(normal_cdf(xb_t / sigma))

    def draw_covariates(rng, size):
        gen = rng.generator()
        return x_data[gen.integers(0, x_data.shape[0], size=size)]

    def latent_sampler(x, rng, size):
        return (sigma * rng.generator().standard_normal(size))[:, None]

    def g(u, x):
        return ((x @ spec.beta + u[:, 0] > 0).astype(float))[:, None]

    def delta(u, x):
        return ((xb_t + u[:, 0] >= 0).astype(float))[:, None]

    def posterior_mean(y, x):
        yv = np.asarray(y, dtype=float).reshape(-1)
        p_own = np.asarray(normal_cdf((np.atleast_2d(x) @ spec.beta) / sigma))
        p_own = np.clip(p_own, 1e-12, 1 - 1e-12)
        out = yv * np.minimum(p_t, p_own) / p_own + (1 - yv) * np.maximum(p_t - p_own, 0.0) / (1 - p_own)
        return out[:, None]

    def model_mean(x=None, n: int = 1):
        if x is not None:
            n = np.atleast_2d(np.asarray(x)).shape[0]
        return np.full((n, 1), p_t)

    return ReferenceModel(
        name="binary_choice", beta=spec.beta, sigma=np.array([sigma]),
        g=g, delta=delta, latent_sampler=latent_sampler,
        posterior_mean=posterior_mean, model_mean=model_mean,
        draw_covariates=draw_covariates, n_params=spec.beta.size + 1,
    )


@register_model("ordered_choice")
def ordered_choice_model(beta, sigma, thresholds, x_data, target_x) -> ReferenceModel:
    """Ordered threshold-crossing model with the expected category as target."""
    spec = ChoiceModelSpec(beta, sigma, thresholds)
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
    xb_t = float(np.atleast_1d(spec.index(target_x))[0])
    edges = np.concatenate([[-np.inf], spec.thresholds, [np.inf]])
    cats = np.arange(1, spec.n_categories + 1, dtype=float)
    tgt_lo = (edges[:-1] - xb_t) / sigma
    tgt_hi = (edges[1:] - xb_t) / sigma

    def draw_covariates(rng, size):
        gen = rng.generator()
        return x_data[gen.integers(0, x_data.shape[0], size=size)]

    def latent_sampler(x, rng, size):
        return (sigma * rng.generator().standard_normal(size))[:, None]

    def g(u, x):
        ystar = x @ spec.beta + u[:, 0]
        return (np.searchsorted(spec.thresholds, ystar, side="left") + 1).astype(float)[:, None]

    def delta(u, x):
        val = xb_t + u[:, 0]
        cat = np.searchsorted(spec.thresholds, val, side="left") + 1
        return cat.astype(float)[:, None]

    def posterior_mean(y, x):
        yv = np.asarray(y, dtype=float).reshape(-1).astype(int)
        xb = np.atleast_2d(x) @ spec.beta
        own_lo = (edges[yv - 1] - xb) / sigma
        own_hi = (edges[yv] - xb) / sigma
        mass = np.clip(np.asarray(normal_cdf(own_hi) - normal_cdf(own_lo)), 1e-300, None)
        lo = np.maximum(own_lo[:, None], tgt_lo[None, :])
        hi = np.minimum(own_hi[:, None], tgt_hi[None, :])
        inter = np.clip(np.asarray(normal_cdf(hi)) - np.asarray(normal_cdf(lo)), 0.0, None) * (hi > lo)
        return ((inter / mass[:, None]) @ cats)[:, None]

    def model_mean(x=None, n: int = 1):
        if x is not None:
            n = np.atleast_2d(np.asarray(x)).shape[0]
        probs = np.diff(np.asarray(normal_cdf(np.concatenate([tgt_lo, [tgt_hi[-1]]]))))
        return np.full((n, 1), float(cats @ probs))

    return ReferenceModel(
        name="ordered_choice", beta=spec.beta, sigma=np.array([sigma]),
        g=g, delta=delta, latent_sampler=latent_sampler,
        posterior_mean=posterior_mean, model_mean=model_mean,
        draw_covariates=draw_covariates, n_params=spec.beta.size + 1,
    )


@register_model("censored")
def censored_model(beta, sigma, x_data, h=None) -> ReferenceModel:
    """Censored-at-zero regression with target h(latent outcome)."""
    spec = ChoiceModelSpec(beta, sigma)
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))

    def draw_covariates(rng, size):
        gen = rng.generator()
        return x_data[gen.integers(0, x_data.shape[0], size=size)]

    def latent_sampler(x, rng, size):
        return (sigma * rng.generator().standard_normal(size))[:, None]

    def g(u, x):
        return np.maximum(x @ spec.beta + u[:, 0], 0.0)[:, None]

    def delta(u, x):
        ystar = x @ spec.beta + u[:, 0]
        return (ystar if h is None else h(ystar))[:, None]

    def posterior_mean(y, x):
        yv = np.asarray(y, dtype=float).reshape(-1)
        xb = np.atleast_2d(x) @ spec.beta
        out = np.empty(yv.size)
        cens = yv <= 0
        out[~cens] = yv[~cens] if h is None else h(yv[~cens])
        if cens.any():
            out[cens] = censored_cell_mean(xb[cens], sigma, h=h)
        return out[:, None]

    def model_mean(x=None, n: int = 1):
        xb = np.atleast_2d(np.asarray(x, dtype=float)) @ spec.beta
        if h is None:
            return xb[:, None]
        t, w = np.polynomial.hermite.hermgauss(128)
        vals = h(xb[:, None] + math.sqrt(2.0) * sigma * t[None, :])
        return (vals @ w / math.sqrt(math.pi))[:, None]

    return ReferenceModel(
        name="censored", beta=spec.beta, sigma=np.array([sigma]),
        g=g, delta=delta, latent_sampler=latent_sampler,
        posterior_mean=posterior_mean, model_mean=model_mean,
        draw_covariates=draw_covariates, n_params=spec.beta.size + 1,
    )
