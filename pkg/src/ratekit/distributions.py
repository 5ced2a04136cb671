"""Count-distribution kernels: Poisson and negative binomial probability
mass functions in the mean-dispersion form, their central moments, mean-one
mixing distributions, and seeded samplers.

The negative binomial is parameterized by its mean ``lam`` and dispersion
``alpha`` so that Var(N) = lam + alpha * lam**2.  ``alpha = 0`` is the exact
Poisson limit, handled by a dedicated branch rather than a small-alpha
approximation.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln

# Dispersion below this is routed to the exact Poisson branch: the
# gamma-Poisson mixture representation degenerates numerically long before
# it does analytically.
ALPHA_POISSON_CUTOFF = 1e-12


class DistributionError(ValueError):
    """Invalid distribution parameters or arguments."""


@dataclass(frozen=True)
class NbParams:
    """Negative binomial parameters: mean ``lam`` > 0, dispersion ``alpha`` >= 0."""

    lam: float
    alpha: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.lam) or self.lam <= 0.0:
            raise DistributionError(f"lam must be a finite positive real, got {self.lam}")
        if not np.isfinite(self.alpha) or self.alpha < 0.0:
            raise DistributionError(f"alpha must be a finite nonnegative real, got {self.alpha}")

    @property
    def variance(self) -> float:
        return self.lam * (1.0 + self.alpha * self.lam)

    @property
    def is_poisson(self) -> bool:
        return self.alpha < ALPHA_POISSON_CUTOFF


class MixingKind(str, Enum):
    DEGENERATE_ONE = "degenerate-one"
    GAMMA_MEAN_ONE = "gamma-mean-one"
    LOGNORMAL_MEAN_ONE = "lognormal-mean-one"


@dataclass(frozen=True)
class MixingDist:
    """Mean-one mixing distribution for multiplicative random effects.

    ``variance`` is the distribution's defining variance parameter:

    * degenerate-one: must be 0; the point mass at 1.
    * gamma-mean-one: Var(theta) = variance; theta ~ Gamma(1/v, rate 1/v).
    * lognormal-mean-one: ``variance`` is the log-scale parameter s2 of
      theta ~ Lognormal(-s2/2, s2).  The actual Var(theta) = exp(s2) - 1
      is exposed separately as :attr:`var_theta`.
    """

    kind: MixingKind
    variance: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.variance) or self.variance < 0.0:
            raise DistributionError(f"variance must be nonnegative, got {self.variance}")
        if self.kind == MixingKind.DEGENERATE_ONE and self.variance != 0.0:
            raise DistributionError("degenerate-one mixing requires variance 0")
        # variance 0 means the point mass at 1 regardless of declared kind
        if self.variance == 0.0:
            object.__setattr__(self, "kind", MixingKind.DEGENERATE_ONE)

    @staticmethod
    def degenerate() -> "MixingDist":
        return MixingDist(MixingKind.DEGENERATE_ONE, 0.0)

    @staticmethod
    def gamma(variance: float) -> "MixingDist":
        if variance == 0.0:
            return MixingDist.degenerate()
        return MixingDist(MixingKind.GAMMA_MEAN_ONE, variance)

    @staticmethod
    def lognormal(sigma2: float) -> "MixingDist":
        if sigma2 == 0.0:
            return MixingDist.degenerate()
        return MixingDist(MixingKind.LOGNORMAL_MEAN_ONE, sigma2)

    @property
    def var_theta(self) -> float:
        """Actual variance of theta (differs from ``variance`` for lognormal)."""
        if self.kind == MixingKind.LOGNORMAL_MEAN_ONE:
            return float(np.expm1(self.variance))
        return self.variance

    @property
    def mean_square(self) -> float:
        """E[theta^2] = 1 + Var(theta)."""
        return 1.0 + self.var_theta

    def sample(self, size, rng: np.random.Generator) -> np.ndarray:
        """Draw ``size`` values of theta from the stream ``rng``."""
        if self.kind == MixingKind.DEGENERATE_ONE:
            return np.ones(size)
        if self.kind == MixingKind.GAMMA_MEAN_ONE:
            c = 1.0 / self.variance
            return rng.gamma(shape=c, scale=1.0 / c, size=size)
        s2 = self.variance
        return rng.lognormal(mean=-0.5 * s2, sigma=np.sqrt(s2), size=size)


def poisson_log_pmf(n, lam):
    """log P(N = n) for N ~ Poisson(lam); vectorized over n and lam."""
    n = np.asarray(n)
    lam = np.asarray(lam, dtype=float)
    if np.any(n < 0):
        raise DistributionError("counts must be nonnegative")
    return n * np.log(lam) - lam - gammaln(n + 1.0)


def nb_log_pmf_arrays(n, lam, alpha: float):
    """Vectorized NB log-pmf with common dispersion ``alpha``.

    Computed through log-gamma functions (never factorial products);
    ``alpha`` below the Poisson cutoff takes the exact Poisson branch.
    """
    n = np.asarray(n)
    lam = np.asarray(lam, dtype=float)
    if np.any(n < 0):
        raise DistributionError("counts must be nonnegative")
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0.0):
        raise DistributionError("lam must be finite and positive")
    if alpha < ALPHA_POISSON_CUTOFF:
        return n * np.log(lam) - lam - gammaln(n + 1.0)
    r = 1.0 / alpha
    u = alpha * lam
    return (
        gammaln(n + r)
        - gammaln(r)
        - gammaln(n + 1.0)
        - (r + n) * np.log1p(u)
        + n * np.log(lam)
        + n * np.log(alpha)
    )


def log_pmf(n: int, p: NbParams) -> float:
    """log P(N = n) for N ~ NB(lam, alpha); exact Poisson at alpha = 0."""
    if n < 0 or int(n) != n:
        raise DistributionError(f"n must be a nonnegative integer, got {n}")
    if p.is_poisson:
        return float(poisson_log_pmf(int(n), p.lam))
    return float(nb_log_pmf_arrays(int(n), p.lam, p.alpha))


def nb_central_moment(p: NbParams, order: int) -> float:
    """Central moment E[(N - lam)^order] of NB(lam, alpha), order in {2, 3, 4}."""
    lam, a = p.lam, p.alpha
    v = lam * (1.0 + a * lam)
    if order == 2:
        return v
    if order == 3:
        return v * (1.0 + 2.0 * a * lam)
    if order == 4:
        return v * (1.0 + 3.0 * lam + 6.0 * a * lam + 3.0 * a * lam**2 + 6.0 * a**2 * lam**2)
    raise DistributionError(f"order must be in {{2, 3, 4}}, got {order}")


def nb_survival_series(lam, alpha: float, tol: float = 1e-12, max_terms: int = 10**6):
    """Tail probabilities P(N >= j+1), j = 0, 1, ..., until every entry < tol.

    Returns an array of shape (J, len(lam)).  Uses the pmf recurrence
    pmf(n+1) = pmf(n) * (n + 1/alpha) / (n+1) * (alpha lam / (1 + alpha lam)),
    which also covers the Poisson limit ratio lam / (n+1).
    """
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    if alpha < ALPHA_POISSON_CUTOFF:
        ratio_num = lam
        geometric = None
    else:
        geometric = alpha * lam / (1.0 + alpha * lam)

    if alpha < ALPHA_POISSON_CUTOFF:
        pmf = np.exp(-lam)
    else:
        pmf = np.exp(-(1.0 / alpha) * np.log1p(alpha * lam))
    surv = 1.0 - pmf
    rows = []
    j = 0
    while j < max_terms:
        rows.append(surv.copy())
        if np.all(surv < tol):
            break
        if geometric is None:
            pmf = pmf * ratio_num / (j + 1.0)
        else:
            pmf = pmf * (j + 1.0 / alpha) / (j + 1.0) * geometric
        surv = surv - pmf
        np.clip(surv, 0.0, None, out=surv)
        j += 1
    else:
        raise DistributionError(
            f"tail series did not fall below {tol} within {max_terms} terms"
        )
    return np.asarray(rows)


def sample_poisson(lam, rng: np.random.Generator, size=None):
    lam = np.asarray(lam, dtype=float)
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0.0):
        raise DistributionError("lam must be finite and positive")
    return rng.poisson(lam, size=size)


def sample_nb(p: NbParams, rng: np.random.Generator, size=None):
    """Draw from NB(lam, alpha) via the gamma-Poisson mixture:
    theta ~ Gamma(1/alpha, rate 1/alpha), then Poisson(lam * theta)."""
    if p.is_poisson:
        return rng.poisson(p.lam, size=size)
    c = 1.0 / p.alpha
    theta = rng.gamma(shape=c, scale=1.0 / c, size=size)
    return rng.poisson(p.lam * theta)
