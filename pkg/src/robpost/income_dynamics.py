"""Permanent-transitory decomposition of a balanced outcome panel.

Y_it = eta_it + eps_it with eta a random walk and eps serially independent.
The covariance structure identifies all variance parameters from T >= 3
periods by equally-weighted minimum distance on the autocovariances, which
is linear in the parameters.  Under the fitted Gaussian reference the joint
law of (Y, eta_t, eps_t) is normal, so posterior means are linear solves
and posterior distribution functions are normal mixtures, invertible for
quantiles.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import brentq

from .framework import ReferenceModel, register_model
from .stats_core import RngStream, normal_cdf, normal_quantile

__all__ = [
    "PtParams",
    "estimate_pt",
    "posterior_component_cdf",
    "posterior_component_moments",
    "quantile_difference_curve",
    "pt_informativeness",
    "simulate_pt_panel",
    "PSID_LIKE_CALIBRATION",
]

#: Synthetic panel calibration in the ballpark of household log-earnings
#: residual panels (T biennial periods, moderate permanent growth, sizable
#: transitory noise).
PSID_LIKE_CALIBRATION = {
    "n": 792,
    "T": 6,
    "var_eta1": 0.08,
    "var_v": 0.04,
    "var_eps": 0.15,
}


@dataclass(frozen=True)
class PtParams:
    """Variance parameters of the permanent-transitory model."""

    var_eta1: float
    var_v: np.ndarray  # innovations, periods 2..T
    var_eps: np.ndarray  # transitory variances, periods 1..T

    def __post_init__(self) -> None:
        object.__setattr__(self, "var_v", np.asarray(self.var_v, dtype=float))
        object.__setattr__(self, "var_eps", np.asarray(self.var_eps, dtype=float))
        if self.var_eta1 < 0 or np.any(self.var_v < 0) or np.any(self.var_eps < 0):
            raise ValueError("variance parameters must be nonnegative")
        if self.var_v.size != self.T - 1:
            raise ValueError("var_v must have one entry per period after the first")
        if np.any(self.var_y() <= 0):
            raise ValueError("implied outcome variances must be positive")

    @property
    def T(self) -> int:
        return self.var_eps.size

    def var_eta(self) -> np.ndarray:
        return self.var_eta1 + np.concatenate([[0.0], np.cumsum(self.var_v)])

    def var_y(self) -> np.ndarray:
        return self.var_eta() + self.var_eps

    def cov_y(self) -> np.ndarray:
        ve = self.var_eta()
        t = self.T
        cov = ve[np.minimum.outer(np.arange(t), np.arange(t))]
        return cov + np.diag(self.var_eps)

    @cached_property
    def _conditioning(self) -> dict:
        """Solve the joint-normal conditioning once: per-component weights
        a_t with E[comp_t | Y] = a_t'Y and residual sds (data independent)."""
        t = self.T
        ve = self.var_eta()
        sigma = self.cov_y()
        cov_eta = ve[np.minimum.outer(np.arange(t), np.arange(t))]  # Cov(eta_t, Y_s)
        cov_eps = np.diag(self.var_eps)
        try:
            a_eta = np.linalg.solve(sigma, cov_eta.T).T  # rows: weights for eta_t
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular outcome covariance") from exc
        a_eps = np.linalg.solve(sigma, cov_eps.T).T
        s2_eta = ve - np.einsum("ts,st->t", a_eta, cov_eta.T)
        s2_eps = self.var_eps - np.einsum("ts,st->t", a_eps, cov_eps.T)
        return {
            "a_eta": a_eta,
            "a_eps": a_eps,
            "sd_eta": np.sqrt(np.maximum(s2_eta, 0.0)),
            "sd_eps": np.sqrt(np.maximum(s2_eps, 0.0)),
        }

    def posterior_weights(self, component: str) -> tuple[np.ndarray, np.ndarray]:
        cond = self._conditioning
        if component == "eta":
            return cond["a_eta"], cond["sd_eta"]
        if component == "eps":
            return cond["a_eps"], cond["sd_eps"]
        raise ValueError(f"component must be 'eta' or 'eps', got {component!r}")


def _as_balanced(panel) -> np.ndarray:
    arr = np.asarray(panel, dtype=float)
    if arr.ndim != 2:
        raise ValueError("panel must be a rectangular (units x periods) array")
    return arr


def estimate_pt(panel) -> PtParams:
    """Equally-weighted minimum distance on the full autocovariance matrix.

    The model covariance is linear in (var_eta1, var_v_2.., var_eps_1..), so
    the fit is a least-squares solve over the vech of the empirical
    autocovariances; negative solutions are truncated at zero with a
    warning flag attached via the returned object's `truncated` attribute.
    """
    arr = _as_balanced(panel)
    n, t = arr.shape
    if t < 3:
        raise ValueError("need at least 3 periods to identify the covariance structure")
    if n < t + 1:
        raise ValueError("too few units to estimate the autocovariances")
    centered = arr - arr.mean(axis=0, keepdims=True)
    emp = centered.T @ centered / n
    if np.linalg.eigvalsh(emp).min() < -1e-10:
        warnings.warn("empirical autocovariance matrix is not PSD", RuntimeWarning)
    iu = np.triu_indices(t)
    # theta = (var_eta1, var_v_2..T, var_eps_1..T)
    p = 1 + (t - 1) + t
    design = np.zeros((iu[0].size, p))
    for row, (i, j) in enumerate(zip(*iu)):
        lo = min(i, j)
        design[row, 0] = 1.0
        design[row, 1 : 1 + lo] = 1.0  # innovations up to min(t, s)
        if i == j:
            design[row, t + i] = 1.0
    theta, *_ = np.linalg.lstsq(design, emp[iu], rcond=None)
    truncated = bool(np.any(theta < 0))
    theta = np.maximum(theta, 0.0)
    params = PtParams(float(theta[0]), theta[1:t], theta[t:])
    object.__setattr__(params, "truncated", truncated)
    return params


def posterior_component_moments(panel, params: PtParams, component: str):
    """Posterior means (n, T) and the data-independent posterior sds (T,)."""
    arr = _as_balanced(panel)
    if arr.shape[1] != params.T:
        raise ValueError("panel periods do not match the parameter set")
    a, sd = params.posterior_weights(component)
    return arr @ a.T, sd


def posterior_component_cdf(panel, params: PtParams, component: str, t: int, a) -> np.ndarray | float:
    """Posterior average distribution function of one latent component.

    Averages Phi((a - m_it) / s_t) over units, with m_it the joint-normal
    posterior mean of the component at period t and s_t its (unit-invariant)
    posterior standard deviation.
    """
    means, sds = posterior_component_moments(panel, params, component)
    m, s = means[:, t], sds[t]
    if s <= 0:
        raise ValueError("degenerate posterior: component fully revealed")
    a_arr = np.asarray(a, dtype=float)
    out = normal_cdf((np.atleast_1d(a_arr)[None, :] - m[:, None]) / s).mean(axis=0)
    return float(out[0]) if a_arr.ndim == 0 else out


def _invert_mixture_cdf(m: np.ndarray, s: float, tau: float) -> float:
    lo = float(m.min() - 6 * s)
    hi = float(m.max() + 6 * s)

    def f(a):
        return float(np.mean(normal_cdf((a - m) / s))) - tau

    for _ in range(60):
        if f(lo) < 0 and f(hi) > 0:
            break
        lo -= 4 * s
        hi += 4 * s
    return brentq(f, lo, hi, xtol=1e-8)


def quantile_difference_curve(panel, params: PtParams, component: str, taus) -> np.ndarray:
    """Posterior-minus-model quantiles of a latent component, averaged over t.

    The model quantile at tau is the fitted normal quantile of the
    component; the posterior quantile inverts the posterior average
    distribution function by bisection.
    """
    taus = np.asarray(taus, dtype=float)
    means, sds = posterior_component_moments(panel, params, component)
    var_comp = params.var_eta() if component == "eta" else params.var_eps
    diffs = np.zeros((params.T, taus.size))
    z = np.asarray(normal_quantile(taus))
    for t in range(params.T):
        model_q = math.sqrt(var_comp[t]) * z
        for k, tau in enumerate(taus):
            post_q = _invert_mixture_cdf(means[:, t], sds[t], float(tau))
            diffs[t, k] = post_q - model_q[k]
    return diffs.mean(axis=0)


def pt_informativeness(
    params: PtParams,
    taus,
    draws: int = 50_000,
    rng: RngStream | None = None,
    t: int | None = None,
) -> dict:
    """Posterior informativeness per component across quantile cutoffs.

    Delegates to the generic informativeness machinery with indicator
    targets at the model quantiles of each component, at period ``t``
    (middle period by default).
    """
    from .robustness import informativeness_r2

    rng = rng or RngStream(0, 0)
    taus = np.asarray(taus, dtype=float)
    t = params.T // 2 if t is None else t
    out = {"taus": taus}
    for comp in ("eta", "eps"):
        var_comp = (params.var_eta() if comp == "eta" else params.var_eps)[t]
        grid = math.sqrt(var_comp) * np.asarray(normal_quantile(taus))
        model = perm_transitory_model(params=params, component=comp, t=t, grid=grid)
        out[comp] = np.atleast_1d(informativeness_r2(model, draws=draws, rng=rng.substream(hash(comp) % 2**32)))
    return out


# ---------------------------------------------------------------------------
# Reference-model registration and synthetic panels
# ---------------------------------------------------------------------------

@register_model("perm_transitory")
def perm_transitory_model(
    params: PtParams,
    component: str = "eta",
    t: int | None = None,
    grid=0.0,
) -> ReferenceModel:
    """Gaussian permanent-transitory model with indicator targets.

    The latent vector stacks (eta_1..T, eps_1..T); the observation is their
    sum per period.  Targets are 1{component_t <= a} over the cutoff grid.
    """
    t_idx = params.T // 2 if t is None else int(t)
    grid_arr = np.atleast_1d(np.asarray(grid, dtype=float))
    T = params.T
    a_w, sds = params.posterior_weights(component)
    a_t, s_t = a_w[t_idx], float(sds[t_idx])
    var_comp = (params.var_eta() if component == "eta" else params.var_eps)[t_idx]
    sd_comp = math.sqrt(var_comp)
    comp_col = t_idx if component == "eta" else T + t_idx
    iu = np.triu_indices(T)
    model_cov_vech = params.cov_y()[iu]

    def latent_sampler(x, rng, size):
        gen = rng.generator()
        v = math.sqrt(params.var_eta1) * gen.standard_normal((size, 1))
        if T > 1:
            steps = np.sqrt(params.var_v)[None, :] * gen.standard_normal((size, T - 1))
            eta = np.cumsum(np.column_stack([v, steps]), axis=1)
        else:
            eta = v
        eps = np.sqrt(params.var_eps)[None, :] * gen.standard_normal((size, T))
        return np.column_stack([eta, eps])

    def g(u, x):
        return u[:, :T] + u[:, T:]

    def delta(u, x):
        return (u[:, comp_col : comp_col + 1] <= grid_arr[None, :]).astype(float)

    def posterior_mean(y, x):
        m = np.asarray(y, dtype=float) @ a_t
        return normal_cdf((grid_arr[None, :] - m[:, None]) / s_t)

    def model_mean(x=None, n: int = 1):
        return np.tile(normal_cdf(grid_arr / sd_comp), (n, 1))

    def psi(y, x):
        # First moments (the residualization pins the period means to zero)
        # plus the full autocovariance vech that the minimum-distance step fits.
        arr = np.asarray(y, dtype=float)
        return np.column_stack([arr, arr[:, iu[0]] * arr[:, iu[1]] - model_cov_vech[None, :]])

    def psi_cond_mean(x, n: int = 1):
        return np.zeros((n, T + iu[0].size))

    return ReferenceModel(
        name="perm_transitory",
        beta=np.concatenate([[params.var_eta1], params.var_v, params.var_eps]),
        sigma=np.zeros(0),
        g=g, delta=delta, latent_sampler=latent_sampler, psi=psi,
        posterior_mean=posterior_mean, model_mean=model_mean,
        psi_cond_mean=psi_cond_mean,
        n_params=2 * T,
    )


def simulate_pt_panel(
    rng: RngStream,
    n: int | None = None,
    params: PtParams | None = None,
    eps_dist: str = "normal",
    mixture_share: float = 0.1,
    mixture_scale: float = 5.0,
) -> np.ndarray:
    """Simulate a balanced (n, T) panel from the permanent-transitory model.

    ``eps_dist="scale_mixture"`` replaces the Gaussian transitory (and
    permanent-innovation) shocks by a two-component normal scale mixture
    with the same variance and excess kurtosis, the leptokurtic alternative.
    """
    cal = PSID_LIKE_CALIBRATION
    n = cal["n"] if n is None else n
    if params is None:
        T = cal["T"]
        params = PtParams(cal["var_eta1"], np.full(T - 1, cal["var_v"]), np.full(T, cal["var_eps"]))
    T = params.T
    gen = rng.generator()

    def shocks(var_vec, size):
        base = gen.standard_normal(size)
        if eps_dist == "normal":
            out = base
        elif eps_dist == "scale_mixture":
            hi = gen.random(size) < mixture_share
            s_hi = mixture_scale
            # normalize total variance to one
            s_lo = math.sqrt(max((1.0 - mixture_share * s_hi**2) / (1.0 - mixture_share), 1e-12))
            out = base * np.where(hi, math.sqrt(s_hi**2), s_lo)
        else:
            raise ValueError(f"unknown eps_dist {eps_dist!r}")
        return out * np.sqrt(var_vec)

    eta1 = shocks(params.var_eta1, (n, 1))
    steps = shocks(params.var_v[None, :], (n, T - 1)) if T > 1 else np.zeros((n, 0))
    eta = np.cumsum(np.column_stack([eta1, steps]), axis=1)
    eps = shocks(params.var_eps[None, :], (n, T))
    return eta + eps
