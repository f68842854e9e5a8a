"""Generic reference-model machinery.

A :class:`ReferenceModel` bundles the structural map g, the target map
delta, the parametric latent law (sampler + log-density), the moment
function psi that pins the estimated parameters, and, when available,
closed-form conditional expectation maps.  On top of it sit the model-based
estimator (integrating delta against the fitted latent law), the posterior
average estimator (averaging conditional expectations given each
observation), and a simulation-based surrogate for models without closed
forms.  Concrete models are registered by key so the CLI and the robustness
analytics can build them uniformly.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .stats_core import KernelSpec, RngStream, normal_cdf, normal_pdf

__all__ = [
    "ReferenceModel",
    "PosteriorLaw",
    "model_based_estimate",
    "posterior_average_estimate",
    "sim_posterior_fit",
    "nonlinear_effect",
    "simulate_reference",
    "make_model",
    "register_model",
    "MODEL_REGISTRY",
]


@dataclass(frozen=True)
class ReferenceModel:
    """A parametric latent-variable model with an attached target.

    All callables are vectorized over a leading sample axis: ``u`` has shape
    (n, d_u), ``x`` (n, d_x) or None for models without covariates, ``y``
    (n, d_y).  ``delta`` returns (n,) or (n, q) for q-dimensional targets;
    closed-form maps, when present, must match its shape.
    """

    name: str
    beta: np.ndarray
    sigma: np.ndarray
    g: Callable
    delta: Callable
    latent_sampler: Callable  # (x, rng, size) -> u
    log_f: Callable | None = None
    psi: Callable | None = None  # (y, x) -> (n, m)
    posterior_mean: Callable | None = None  # (y, x) -> E[delta | y, x]
    model_mean: Callable | None = None  # (x) -> E[delta | x]
    psi_cond_mean: Callable | None = None  # (x) -> E[psi | x]
    posterior_expect: Callable | None = None  # (fn, y, x) -> E[fn(U) | y, x]
    prior_expect: Callable | None = None  # (fn, x) -> E[fn(U) | x]
    influence_h: Callable | None = None  # (y, x) -> (n, p) influence of param estimates
    draw_covariates: Callable | None = None  # (rng, size) -> x
    with_params: Callable | None = None  # (theta) -> ReferenceModel at new params
    n_params: int = 0

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([np.atleast_1d(self.beta), np.atleast_1d(self.sigma)])

    def has_covariates(self) -> bool:
        return self.draw_covariates is not None


@dataclass(frozen=True)
class PosteriorLaw:
    """Conditional-expectation map of the target given an observation."""

    representation: str  # "closed_form" | "simulated"
    cond_mean: Callable  # (y, x) -> (n,) or (n, q)
    train_r2: float | None = None

    @staticmethod
    def from_model(model: ReferenceModel) -> "PosteriorLaw":
        if model.posterior_mean is None:
            raise ValueError(f"model {model.name!r} has no closed-form posterior mean")
        return PosteriorLaw("closed_form", model.posterior_mean)


def simulate_reference(model: ReferenceModel, draws: int, rng: RngStream, x=None):
    """Draw (u, x, y) jointly under the reference model.

    Covariates come from the model's covariate sampler (or are None); the
    latent draws follow the parametric law given covariates, and outcomes
    apply the structural map.
    """
    if x is None and model.draw_covariates is not None:
        x = model.draw_covariates(rng.substream(rng.stream_id * 2 + 1), draws)
    u = model.latent_sampler(x, rng.substream(rng.stream_id * 2 + 2), draws)
    y = model.g(u, x)
    return u, x, y


def model_based_estimate(model: ReferenceModel, data, draws: int = 1000, rng: RngStream | None = None):
    """Monte Carlo version of the fitted-model average of the target.

    For each observed covariate row, averages delta over fresh latent draws
    from the reference law; without covariates a single batch of ``draws``
    latent draws is used.  Returns (estimate, mc_standard_error).
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    rng = rng or RngStream(0, 0)
    y_data, x_data = data if isinstance(data, tuple) else (data, None)
    if x_data is None:
        u = model.latent_sampler(None, rng, draws)
        vals = np.atleast_1d(model.delta(u, None))
        est = vals.mean(axis=0)
        se = vals.std(axis=0, ddof=1) / math.sqrt(draws)
        return est, se
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
    n = x_data.shape[0]
    x_rep = np.repeat(x_data, draws, axis=0)
    u = model.latent_sampler(x_rep, rng, n * draws)
    vals = np.atleast_1d(model.delta(u, x_rep))
    per_obs = vals.reshape(n, draws, -1).mean(axis=1)
    est = per_obs.mean(axis=0)
    se = vals.reshape(n * draws, -1).std(axis=0, ddof=1) / math.sqrt(n * draws)
    est = est if est.size > 1 else float(est[0])
    return est, se if np.size(se) > 1 else float(np.atleast_1d(se)[0])


def posterior_average_estimate(model: ReferenceModel, data, posterior: PosteriorLaw | None = None):
    """Average of the conditional expectation of the target over the sample."""
    posterior = posterior or PosteriorLaw.from_model(model)
    y_data, x_data = data if isinstance(data, tuple) else (data, None)
    vals = np.atleast_1d(posterior.cond_mean(y_data, x_data))
    out = vals.mean(axis=0)
    return float(out) if np.size(out) == 1 else out


def sim_posterior_fit(
    model: ReferenceModel,
    data,
    draws: int = 10_000,
    spec: KernelSpec | None = None,
    rng: RngStream | None = None,
    max_pairs: int = 200_000,
) -> PosteriorLaw:
    """Fit a regression surrogate for the posterior mean by simulation.

    Draw latent/outcome pairs under the reference law (per observed
    covariate row when the model has covariates), then regress the target
    values on the simulated observables with a Nadaraya-Watson smoother on
    standardized coordinates.  The returned law carries the training R^2;
    queries outside the simulated range fall back to the nearest simulated
    neighbor with a warning.
    """
    if draws < 100:
        raise ValueError("need at least 100 simulation draws")
    rng = rng or RngStream(0, 0)
    y_data, x_data = data if isinstance(data, tuple) else (data, None)
    if x_data is None:
        n_pairs = min(draws, max_pairs)
        u = model.latent_sampler(None, rng, n_pairs)
        x_sim = None
        y_sim = model.g(u, None)
    else:
        x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
        per = max(100, min(draws, max_pairs // x_data.shape[0]))
        x_sim = np.repeat(x_data, per, axis=0)
        u = model.latent_sampler(x_sim, rng, x_sim.shape[0])
        y_sim = model.g(u, x_sim)
    targets = np.atleast_1d(model.delta(u, x_sim))
    if targets.ndim == 1:
        targets = targets[:, None]
    feats = _features(y_sim, x_sim)
    scale = feats.std(axis=0, ddof=0)
    scale[scale == 0] = 1.0
    feats_s = feats / scale
    n_tr, d = feats_s.shape
    # Undersmoothed bandwidth keeps smoothing bias below Monte Carlo noise.
    h = (0.5 if spec is None or spec.bandwidth == "silverman" else 1.0) * (
        1.06 * n_tr ** (-1.0 / (4 + d)) if spec is None or spec.bandwidth == "silverman" else float(spec.bandwidth)
    )
    lo, hi = feats.min(axis=0), feats.max(axis=0)

    def cond_mean(y_q, x_q):
        q = _features(y_q, None if x_q is None else np.atleast_2d(np.asarray(x_q, dtype=float)))
        out = np.empty((q.shape[0], targets.shape[1]))
        outside = np.any((q < lo) | (q > hi), axis=1)
        qs = q / scale
        chunk = max(1, int(4_000_000 // max(n_tr, 1)))
        for i in range(0, qs.shape[0], chunk):
            d2 = ((qs[i : i + chunk, None, :] - feats_s[None, :, :]) ** 2).sum(axis=2)
            kw = np.exp(-0.5 * d2 / h**2)
            tot = kw.sum(axis=1)
            good = tot > 1e-300
            block = np.empty((kw.shape[0], targets.shape[1]))
            block[good] = (kw[good] @ targets) / tot[good][:, None]
            if np.any(~good):
                nn = np.argmin(d2[~good], axis=1)
                block[~good] = targets[nn]
            out[i : i + chunk] = block
        if outside.any():
            warnings.warn(
                f"{int(outside.sum())} query points outside the simulated range; "
                "nearest-neighbor fallback applied",
                RuntimeWarning,
            )
            d2 = ((qs[outside, None, :] - feats_s[None, :, :]) ** 2).sum(axis=2)
            out[outside] = targets[np.argmin(d2, axis=1)]
        return out[:, 0] if out.shape[1] == 1 else out

    fitted = cond_mean(y_sim, x_sim)
    fitted = np.atleast_2d(fitted.T).T if fitted.ndim == 1 else fitted
    resid = targets - (fitted[:, None] if fitted.ndim == 1 else fitted)
    tot_var = targets.var(axis=0, ddof=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = float(np.nanmean(1.0 - resid.var(axis=0, ddof=0) / np.where(tot_var > 0, tot_var, np.nan)))
    return PosteriorLaw("simulated", cond_mean, train_r2=r2)


def _features(y, x) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x is None:
        return y
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([y, x])


def nonlinear_effect(
    model: ReferenceModel,
    data,
    value_at_reference: float,
    influence: Callable | None,
    rng: RngStream | None = None,
    draws: int = 2000,
) -> float:
    """Linearized posterior correction of a functional of the latent law.

    Returns value_at_reference + mean_i E[influence(U) | Y_i, X_i] -
    E[influence(U) | X_i].  A zero influence (None) returns the reference
    value; linear functionals reduce to the posterior average estimator.
    Conditional expectations use the model's closed-form expectation hooks.
    """
    if influence is None:
        return float(value_at_reference)
    if model.posterior_expect is None or model.prior_expect is None:
        raise ValueError(f"model {model.name!r} lacks conditional-expectation hooks")
    y_data, x_data = data if isinstance(data, tuple) else (data, None)
    post = np.asarray(model.posterior_expect(influence, y_data, x_data), dtype=float)
    prior = np.asarray(model.prior_expect(influence, x_data), dtype=float)
    return float(value_at_reference + post.mean() - prior.mean())


# ---------------------------------------------------------------------------
# Model registry
# ---------------------------------------------------------------------------

MODEL_REGISTRY: dict[str, Callable] = {}


def register_model(key: str):
    def deco(fn):
        MODEL_REGISTRY[key] = fn
        return fn
    return deco


def make_model(key: str, **kwargs) -> ReferenceModel:
    try:
        builder = MODEL_REGISTRY[key]
    except KeyError:
        raise KeyError(f"unknown model key {key!r}; known: {sorted(MODEL_REGISTRY)}") from None
    return builder(**kwargs)


def _gh_nodes(n: int = 96):
    t, w = np.polynomial.hermite.hermgauss(n)
    return t, w / math.sqrt(math.pi)


@register_model("fixed_effects")
def fixed_effects_model(
    mu: float = 0.0,
    var_alpha: float = 1.0,
    var_eps: float = 1.0,
    J: int = 5,
    target: tuple = ("cdf", 0.0),
    noise_known: bool = False,
) -> ReferenceModel:
    """Normal fixed-effects model with a unit-level latent effect.

    The latent vector per unit is (alpha, eps_1..eps_J); the observation is
    the J-vector of outcomes.  Targets:

    - ("cdf", a) or ("cdf", grid): indicators 1{alpha <= a};
    - ("moment", p): alpha^p for p in {1, 2, 3};
    - ("custom", fn): arbitrary vectorized fn(alpha) with no closed forms.
    """
    if var_alpha <= 0 or var_eps < 0:
        raise ValueError("need var_alpha > 0 and var_eps >= 0")
    sd_a, sd_e = math.sqrt(var_alpha), math.sqrt(var_eps)
    rho = var_alpha / (var_alpha + var_eps / J)
    s_post = math.sqrt(var_alpha * (1.0 - rho))

    def latent_sampler(x, rng, size):
        gen = rng.generator()
        out = np.empty((size, 1 + J))
        out[:, 0] = mu + sd_a * gen.standard_normal(size)
        out[:, 1:] = sd_e * gen.standard_normal((size, J))
        return out

    def g(u, x):
        return u[:, :1] + u[:, 1:]

    kind = target[0]
    if kind == "cdf":
        grid = np.atleast_1d(np.asarray(target[1], dtype=float))

        def delta(u, x):
            return (u[:, :1] <= grid[None, :]).astype(float)

        def posterior_mean(y, x):
            m = mu + rho * (np.asarray(y, dtype=float).mean(axis=1) - mu)
            return normal_cdf((grid[None, :] - m[:, None]) / s_post)

        def model_mean(x=None, n: int = 1):
            return np.tile(normal_cdf((grid - mu) / sd_a), (n, 1))

    elif kind == "moment":
        p = int(target[1])
        if p not in (1, 2, 3):
            raise ValueError("moment targets support p in {1, 2, 3}")
        grid = None

        def delta(u, x):
            return u[:, :1] ** p

        def posterior_mean(y, x):
            m = mu + rho * (np.asarray(y, dtype=float).mean(axis=1) - mu)
            if p == 1:
                out = m
            elif p == 2:
                out = m**2 + s_post**2
            else:
                out = m**3 + 3.0 * m * s_post**2
            return out[:, None]

        def model_mean(x=None, n: int = 1):
            vals = {1: mu, 2: mu**2 + var_alpha, 3: mu**3 + 3 * mu * var_alpha}
            return np.full((n, 1), vals[p])

    elif kind == "custom":
        fn = target[1]
        grid = None

        def delta(u, x):
            return np.atleast_1d(fn(u[:, 0]))

        posterior_mean = None
        model_mean = None
    else:
        raise ValueError(f"unknown fixed-effects target {kind!r}")

    if noise_known or J == 1:
        # sigma_eps known: estimated parameters are (mu, var_alpha)
        def psi(y, x):
            yb = np.asarray(y, dtype=float).mean(axis=1)
            return np.column_stack([yb - mu, (yb - mu) ** 2 - var_alpha - var_eps / J])

        def influence_h(y, x):
            return psi(y, x)

        n_params = 2
    else:
        def psi(y, x):
            arr = np.asarray(y, dtype=float)
            yb = arr.mean(axis=1)
            s2 = ((arr - yb[:, None]) ** 2).sum(axis=1) / (J - 1)
            return np.column_stack(
                [yb - mu, (yb - mu) ** 2 - var_alpha - var_eps / J, s2 - var_eps]
            )

        def influence_h(y, x):
            p = psi(y, x)
            return np.column_stack([p[:, 0], p[:, 1] - p[:, 2] / J, p[:, 2]])

        n_params = 3

    gh_t, gh_w = _gh_nodes()

    def posterior_expect(fn, y, x):
        m = mu + rho * (np.asarray(y, dtype=float).mean(axis=1) - mu)
        a = m[:, None] + math.sqrt(2.0) * s_post * gh_t[None, :]
        return fn(a) @ gh_w

    def prior_expect(fn, x):
        a = mu + math.sqrt(2.0) * sd_a * gh_t
        return np.array([fn(a) @ gh_w])

    def log_f(u, x):
        za = (u[:, 0] - mu) / sd_a
        ze = u[:, 1:] / sd_e
        return -0.5 * (za**2 + (ze**2).sum(axis=1)) - math.log(sd_a) - J * math.log(sd_e)

    def with_params(theta):
        return fixed_effects_model(
            mu=float(theta[0]), var_alpha=float(theta[1]),
            var_eps=var_eps if n_params == 2 else float(theta[2]),
            J=J, target=target, noise_known=noise_known,
        )

    def psi_cond_mean(x, n: int = 1):
        return np.zeros((n, n_params))

    return ReferenceModel(
        name="fixed_effects",
        beta=np.array([mu, var_alpha, var_eps]),
        sigma=np.zeros(0),
        g=g, delta=delta, latent_sampler=latent_sampler, log_f=log_f, psi=psi,
        posterior_mean=posterior_mean,
        model_mean=(lambda x=None, n=1: model_mean(x, n)) if model_mean is not None else None,
        psi_cond_mean=psi_cond_mean,
        posterior_expect=posterior_expect, prior_expect=prior_expect,
        influence_h=influence_h, with_params=with_params, n_params=n_params,
    )


@register_model("fixed_effects_hetero")
def fixed_effects_hetero_model(
    var_mu: float,
    noise_vars: np.ndarray,
    weights: np.ndarray | None = None,
    prior_mean: float = 0.0,
    target: tuple = ("cdf", 0.0),
) -> ReferenceModel:
    """Unit-level effects observed once with known heteroskedastic noise.

    The covariate is the known noise variance of the unit, drawn from its
    (weighted) empirical distribution; the latent effect is normal with the
    fitted variance, independent of the noise level.
    """
    if var_mu <= 0:
        raise ValueError("var_mu must be positive")
    noise_vars = np.asarray(noise_vars, dtype=float)
    weights = np.ones_like(noise_vars) if weights is None else np.asarray(weights, dtype=float)
    probs = weights / weights.sum()
    sd_mu = math.sqrt(var_mu)
    grid = np.atleast_1d(np.asarray(target[1], dtype=float))
    if target[0] != "cdf":
        raise ValueError("heteroskedastic model supports cdf targets")

    def draw_covariates(rng, size):
        gen = rng.generator()
        idx = gen.choice(noise_vars.size, size=size, p=probs)
        return noise_vars[idx][:, None]

    # The measurement noise is part of the latent vector so that g is a
    # deterministic map: u = (effect, standardized noise).
    def latent_sampler(x, rng, size):
        gen = rng.generator()
        out = np.empty((size, 2))
        out[:, 0] = prior_mean + sd_mu * gen.standard_normal(size)
        out[:, 1] = gen.standard_normal(size)
        return out

    def g(u, x):
        return (u[:, 0] + np.sqrt(x[:, 0]) * u[:, 1])[:, None]

    def delta(u, x):
        return (u[:, :1] <= grid[None, :]).astype(float)

    def posterior_mean(y, x):
        yv = np.asarray(y, dtype=float).reshape(-1)
        xv = np.asarray(x, dtype=float).reshape(-1)
        rho = var_mu / (var_mu + xv)
        m = prior_mean + rho * (yv - prior_mean)
        s = np.sqrt(var_mu * (1.0 - rho))
        return normal_cdf((grid[None, :] - m[:, None]) / s[:, None])

    def model_mean(x=None, n: int = 1):
        row = normal_cdf((grid - prior_mean) / sd_mu)
        if x is not None:
            n = np.atleast_2d(np.asarray(x)).shape[0]
        return np.tile(row, (n, 1))

    def psi(y, x):
        yv = np.asarray(y, dtype=float).reshape(-1)
        xv = np.asarray(x, dtype=float).reshape(-1)
        return np.column_stack([yv - prior_mean, (yv - prior_mean) ** 2 - var_mu - xv])

    def psi_cond_mean(x, n: int = 1):
        if x is not None:
            n = np.atleast_2d(np.asarray(x)).shape[0]
        return np.zeros((n, 2))

    def influence_h(y, x):
        return psi(y, x)

    def with_params(theta):
        return fixed_effects_hetero_model(
            var_mu=float(theta[1]), noise_vars=noise_vars, weights=weights,
            prior_mean=float(theta[0]), target=target,
        )

    return ReferenceModel(
        name="fixed_effects_hetero",
        beta=np.array([prior_mean, var_mu]),
        sigma=np.zeros(0),
        g=g, delta=delta, latent_sampler=latent_sampler, psi=psi,
        posterior_mean=posterior_mean, model_mean=model_mean,
        psi_cond_mean=psi_cond_mean, influence_h=influence_h,
        draw_covariates=draw_covariates, with_params=with_params, n_params=2,
    )


@register_model("linear_regression")
def linear_regression_model(
    beta: np.ndarray,
    sigma: float,
    x_data: np.ndarray,
) -> ReferenceModel:
    """Linear regression with a normal error law; target U^2 * vech(xx').

    The structural map is invertible in the error, so the posterior of U
    given (y, x) is a point mass and the posterior average of the target is
    the observed squared-residual outer product.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    x_data = np.atleast_2d(np.asarray(x_data, dtype=float))
    d = x_data.shape[1]
    iu = np.triu_indices(d)

    def vech_xx(x):
        return (x[:, :, None] * x[:, None, :])[:, iu[0], iu[1]]

    def draw_covariates(rng, size):
        gen = rng.generator()
        idx = gen.integers(0, x_data.shape[0], size=size)
        return x_data[idx]

    def latent_sampler(x, rng, size):
        return (sigma * rng.generator().standard_normal(size))[:, None]

    def g(u, x):
        return (x @ beta + u[:, 0])[:, None]

    def delta(u, x):
        return u[:, :1] ** 2 * vech_xx(x)

    def posterior_mean(y, x):
        resid = np.asarray(y, dtype=float).reshape(-1) - x @ beta
        return resid[:, None] ** 2 * vech_xx(x)

    def model_mean(x=None, n: int = 1):
        if x is None:
            raise ValueError("linear regression target needs covariates")
        return sigma**2 * vech_xx(np.atleast_2d(np.asarray(x, dtype=float)))

    return ReferenceModel(
        name="linear_regression",
        beta=beta, sigma=np.array([sigma]),
        g=g, delta=delta, latent_sampler=latent_sampler,
        posterior_mean=posterior_mean, model_mean=model_mean,
        draw_covariates=draw_covariates, n_params=beta.size + 1,
    )
