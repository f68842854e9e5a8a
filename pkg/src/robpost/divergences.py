"""Convex divergence families used to define misspecification neighborhoods.

Each family supplies the generator phi (convex, phi(1)=0, phi'(1)=0 after the
usual derivative normalization), its derivatives, and the tilting function
rho(t) = argmax_{r>=0} [rt - phi(r)], i.e. the inverse of phi' extended by 0
below the range of phi' and +inf above it.  An optional quadratic
regularization nu adds nu*(r-1)^2 to the generator, which keeps rho finite on
all of R for families with bounded tilts.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["DivergenceSpec"]

_FAMILIES = ("chi2", "kl", "hellinger", "cressie_read")


@dataclass(frozen=True)
class DivergenceSpec:
    """A phi-divergence: family, optional Cressie-Read power, regularization."""

    family: str = "chi2"
    power: float | None = None
    regularization: float = 0.0

    def __post_init__(self) -> None:
        if self.family not in _FAMILIES:
            raise ValueError(f"unknown divergence family {self.family!r}")
        if self.family == "cressie_read":
            if self.power is None or self.power in (0.0, -1.0):
                raise ValueError("cressie_read needs a power not in {0, -1}")
        elif self.power is not None:
            raise ValueError("power only applies to the cressie_read family")
        if self.regularization < 0:
            raise ValueError("regularization must be nonnegative")

    # -- base family pieces ------------------------------------------------

    @property
    def base_curvature(self) -> float:
        if self.family == "chi2":
            return 2.0
        if self.family == "kl":
            return 1.0
        if self.family == "hellinger":
            return 0.5
        return 1.0  # cressie_read: phi''(r) = r^(power-1), so phi''(1) = 1

    @property
    def curvature(self) -> float:
        """phi''(1), including the regularization contribution."""
        return self.base_curvature + 2.0 * self.regularization

    def _base_phi(self, r: np.ndarray) -> np.ndarray:
        if self.family == "chi2":
            return (r - 1.0) ** 2
        if self.family == "kl":
            out = np.where(r > 0, r * np.log(np.where(r > 0, r, 1.0)) - r + 1.0, 1.0)
            return np.where(r == 0, 1.0, out)
        if self.family == "hellinger":
            return (np.sqrt(r) - 1.0) ** 2
        lam = self.power
        return (r ** (lam + 1.0) - r - lam * (r - 1.0)) / (lam * (lam + 1.0))

    def _base_dphi(self, r: np.ndarray) -> np.ndarray:
        if self.family == "chi2":
            return 2.0 * (r - 1.0)
        if self.family == "kl":
            return np.log(r)
        if self.family == "hellinger":
            return 1.0 - 1.0 / np.sqrt(r)
        lam = self.power
        return (r**lam - 1.0) / lam

    def _base_rho(self, t: np.ndarray) -> np.ndarray:
        """Inverse of the base phi' with the 0 / +inf extensions."""
        if self.family == "chi2":
            return np.maximum(0.0, 1.0 + 0.5 * t)
        if self.family == "kl":
            return np.exp(np.minimum(t, 700.0))
        if self.family == "hellinger":
            safe = np.where(t < 1.0, 1.0 - t, 1.0)
            return np.where(t < 1.0, safe**-2.0, np.inf)
        lam = self.power
        base = 1.0 + lam * t
        safe = np.where(base > 0, base, 1.0)
        if lam > 0:
            return np.where(base > 0, safe ** (1.0 / lam), 0.0)
        return np.where(base > 0, safe ** (1.0 / lam), np.inf)

    # -- public surface ----------------------------------------------------

    @property
    def t_max(self) -> float:
        """Supremum of tilts with finite rho (inf once exceeded)."""
        if self.regularization > 0:
            return np.inf
        if self.family == "hellinger":
            return 1.0
        if self.family == "cressie_read" and self.power < 0:
            return -1.0 / self.power
        return np.inf

    def phi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = self._base_phi(r) + self.regularization * (r - 1.0) ** 2
        return out if out.ndim else float(out)

    def dphi(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        out = self._base_dphi(r) + 2.0 * self.regularization * (r - 1.0)
        return out if out.ndim else float(out)

    def rho(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.regularization == 0.0:
            out = self._base_rho(t)
            return out if out.ndim else float(out)
        out = self._rho_regularized(t)
        return out if out.ndim else float(out)

    def _rho_regularized(self, t: np.ndarray) -> np.ndarray:
        """Solve dphi(r) = t elementwise for the regularized generator.

        dphi is strictly increasing in r, so a safeguarded Newton iteration
        from the base-family inverse converges monotonically.
        """
        nu = self.regularization
        t = np.atleast_1d(np.asarray(t, dtype=float))
        r = np.clip(self._base_rho(np.clip(t, -1e12, self.t_max_base() - 1e-12)), 1e-12, 1e12)
        # crude but safe fallback bracket from the quadratic term alone
        r = np.where(np.isfinite(r), r, np.maximum(1.0 + t / (2.0 * nu), 1e-12))
        for _ in range(100):
            g = self._base_dphi(r) + 2.0 * nu * (r - 1.0) - t
            if np.all(np.abs(g) <= 1e-13 * (1.0 + np.abs(t))):
                break
            h = self._base_d2phi(r) + 2.0 * nu
            step = g / h
            r = np.maximum(r - step, r * 0.1)
        # boundary: rho clips at 0 when even r -> 0 leaves dphi above t
        lim = self._dphi_at_zero() if nu == 0 else -np.inf
        return np.where(t <= lim, 0.0, r)

    def t_max_base(self) -> float:
        if self.family == "hellinger":
            return 1.0
        if self.family == "cressie_read" and self.power is not None and self.power < 0:
            return -1.0 / self.power
        return np.inf

    def _dphi_at_zero(self) -> float:
        if self.family == "chi2":
            return -2.0
        if self.family == "cressie_read" and self.power > 0:
            return -1.0 / self.power
        return -np.inf  # kl, hellinger, cressie_read power<0: rho>0 always

    def _base_d2phi(self, r: np.ndarray) -> np.ndarray:
        if self.family == "chi2":
            return np.full_like(np.asarray(r, dtype=float), 2.0)
        if self.family == "kl":
            return 1.0 / r
        if self.family == "hellinger":
            return 0.5 * r**-1.5
        return np.asarray(r, dtype=float) ** (self.power - 1.0)

    def drho(self, t) -> np.ndarray:
        """Derivative of rho; 0 on clipped regions, 1/phi''(rho(t)) inside."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(self.rho(t), dtype=float)
        inside = (r > 0) & np.isfinite(r)
        d2 = np.where(inside, self._base_d2phi(np.where(inside, r, 1.0)) + 2.0 * self.regularization, np.inf)
        out = np.where(inside, 1.0 / d2, 0.0)
        return out if out.ndim else float(out)

    def phi_rho(self, t) -> np.ndarray:
        """phi(rho(t)), with rho(t)=0 regions evaluating to phi(0)."""
        t = np.asarray(t, dtype=float)
        r = np.asarray(self.rho(t), dtype=float)
        out = np.where(np.isfinite(r), self.phi(np.where(np.isfinite(r), r, 1.0)), np.inf)
        return out if out.ndim else float(out)

    @staticmethod
    def parse(token: str) -> "DivergenceSpec":
        """Parse CLI tokens: chi2 | kl | hellinger | cressie-read:<p>."""
        token = token.strip().lower()
        if token.startswith(("cressie-read:", "cressie_read:")):
            return DivergenceSpec("cressie_read", power=float(token.split(":", 1)[1]))
        name = token.replace("-", "_")
        return DivergenceSpec(name)
