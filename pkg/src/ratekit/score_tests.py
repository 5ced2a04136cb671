"""Score tests for the existence of a bonus-malus system, i.e. for the
nullity of the shared random effect's variance.

Two tests are provided:

* :func:`pinquet_statistic` - the classical overdispersion-based score test
  computed from a fitted Poisson regression.  It has power against any
  extra-Poisson variation, including purely serial-independent
  overdispersion, so a rejection does not by itself justify experience
  rating.
* :func:`nb_score_test` - the score test computed from a fitted negative
  binomial regression.  Because the NB null already absorbs observation
  level overdispersion, a rejection here points specifically at dependence
  through a policyholder-level shared effect.

:func:`bm_existence_report` runs both and flags the disagreement case
(Pinquet rejects, NB does not).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .distributions import nb_survival_series
from .glm import GlmFit, fit_nb_glm, fit_poisson_glm, nb_alpha_score_per_obs
from .panel import ClaimPanel, PolicyRecord, linear_predictor_flat

# Below this fitted dispersion the information series is numerically
# invalid (alpha^-4 amplification of a cancelling tail sum); such fits are
# routed to the degenerate Pinquet fallback like the exact boundary.
ALPHA_DEGENERATE = 1e-6

SERIES_TAIL_TOL = 1e-12
SERIES_MAX_TERMS = 10**6


class ScoreTestError(RuntimeError):
    """Numerically invalid test (nonpositive variance, series failure)."""


@dataclass
class InfoComponents:
    """Information blocks for the NB-based score statistic.

    ``i_sw`` stacks the regression block (identically zero) and the
    dispersion cross term last; ``i_ww`` is block diagonal with the
    regression information X' W X and the dispersion information in the
    last diagonal entry.
    """

    i_ss: float
    i_sw: np.ndarray
    i_ww: np.ndarray
    effective_variance: float

    def to_dict(self) -> dict:
        return {
            "i_ss": float(self.i_ss),
            "i_sw": [float(v) for v in self.i_sw],
            "i_ww": [[float(v) for v in row] for row in self.i_ww],
            "effective_variance": float(self.effective_variance),
        }


@dataclass
class ScoreTestResult:
    statistic: float
    p_value_one_sided: float
    numerator: float
    denominator: float
    per_policy_contributions: np.ndarray
    test: str = "pinquet"
    info: Optional[InfoComponents] = None
    degenerate_alpha: bool = False

    def reject_at(self, level: float = 0.05) -> bool:
        """One-sided decision: reject iff statistic >= upper 1-level quantile."""
        return bool(self.statistic >= norm.ppf(1.0 - level))

    def to_dict(self, level: float = 0.05) -> dict:
        doc = {
            "test": self.test,
            "statistic": float(self.statistic),
            "p_value": float(self.p_value_one_sided),
            "reject_at": {"level": level, "reject": self.reject_at(level)},
            "components": {
                "numerator": float(self.numerator),
                "denominator": float(self.denominator),
            },
        }
        if self.info is not None:
            doc["components"]["info"] = self.info.to_dict()
        if self.degenerate_alpha:
            doc["degenerate_alpha"] = True
        return doc

    def to_json(self, level: float = 0.05, **kwargs) -> str:
        return json.dumps(self.to_dict(level), **kwargs)


def _as_flat_lambda(panel: ClaimPanel, lambda_hat) -> np.ndarray:
    if isinstance(lambda_hat, np.ndarray) and lambda_hat.ndim == 1:
        flat = lambda_hat.astype(float)
    else:
        flat = np.concatenate([np.asarray(block, dtype=float) for block in lambda_hat])
    if flat.size != panel.n_obs:
        raise ScoreTestError(
            f"lambda_hat has {flat.size} entries, panel has {panel.n_obs} observations"
        )
    if np.any(flat <= 0.0) or np.any(~np.isfinite(flat)):
        raise ScoreTestError("lambda_hat must be strictly positive and finite")
    return flat


def pinquet_statistic(panel: ClaimPanel, lambda_hat) -> ScoreTestResult:
    """Overdispersion score statistic from a Poisson fit.

    numerator   = sum_i [ (sum_t (N_it - lam_it))^2 - sum_t N_it ]
    denominator = sqrt( 2 sum_i (sum_t lam_it)^2 )

    Asymptotically standard normal under the no-effect null; the null is
    rejected in the upper tail.
    """
    lam = _as_flat_lambda(panel, lambda_hat)
    y = panel.counts.astype(float)
    resid_sum = panel.policy_sums(y - lam)
    count_sum = panel.policy_sums(y)
    lam_sum = panel.policy_sums(lam)
    contributions = resid_sum**2 - count_sum
    denom_sq = 2.0 * math.fsum((lam_sum**2).tolist())
    if denom_sq <= 0.0:
        raise ScoreTestError("zero denominator: all fitted rates vanish")
    numerator = math.fsum(contributions.tolist())
    denominator = math.sqrt(denom_sq)
    stat = numerator / denominator
    return ScoreTestResult(
        statistic=stat,
        p_value_one_sided=float(norm.sf(stat)),
        numerator=numerator,
        denominator=denominator,
        per_policy_contributions=contributions,
        test="pinquet",
    )


def _nb_contribution_terms(counts: np.ndarray, lam: np.ndarray, alpha: float):
    """The squared-residual and correction pieces of one policy's score."""
    c = 1.0 + alpha * lam
    first = np.sum((counts - lam) / c) ** 2
    second = np.sum((counts * c**2 - alpha**2 * counts * lam**2 - alpha * lam**2) / c**2)
    return first, second


def nb_score_contribution(record: PolicyRecord, beta_hat, alpha_hat: float) -> float:
    """One policy's score for the shared-effect variance at the NB null.

    Equals (1/2)[(d/dv log f)^2 + d^2/dv^2 log f] at v = 1, where f is the
    policy's joint NB density with every mean scaled by v.
    """
    if alpha_hat < 0.0:
        raise ScoreTestError(f"alpha_hat must be nonnegative, got {alpha_hat}")
    lam = np.exp(record.covariates @ np.asarray(beta_hat, dtype=float))
    first, second = _nb_contribution_terms(record.counts.astype(float), lam, alpha_hat)
    return 0.5 * (first - second)


def _per_policy_contributions(panel: ClaimPanel, lam: np.ndarray, alpha: float) -> np.ndarray:
    y = panel.counts.astype(float)
    c = 1.0 + alpha * lam
    resid_sum = panel.policy_sums((y - lam) / c)
    correction = panel.policy_sums((y * c**2 - alpha**2 * y * lam**2 - alpha * lam**2) / c**2)
    return 0.5 * (resid_sum**2 - correction)


def nb_information_components(panel: ClaimPanel, beta_hat, alpha_hat: float) -> InfoComponents:
    """Expected-information blocks for the shared-effect score at the NB null.

    All per-policy sums are accumulated with compensated summation; the
    dispersion information uses the survival-series representation of
    E[-d^2 l / d alpha^2], truncated when the tail falls below 1e-12.
    """
    if alpha_hat <= 0.0:
        raise ScoreTestError("information components require alpha_hat > 0")
    beta_hat = np.asarray(beta_hat, dtype=float)
    x = panel.design_matrix
    lam = linear_predictor_flat(panel, beta_hat)
    c = 1.0 + alpha_hat * lam
    p = x.shape[1]

    # variance-score information: per policy,
    #   (1/4)[ sum_t 2 lam^2 (1+alpha) / c^2 + 4 sum_{t<t'} (lam/c)(lam'/c') ]
    # using lam (1+alpha lam)/c^2 = lam/c for the cross factor.
    diag_term = panel.policy_sums(2.0 * lam**2 * (1.0 + alpha_hat) / c**2)
    g = lam / c
    g_sum = panel.policy_sums(g)
    g_sq_sum = panel.policy_sums(g**2)
    cross = 2.0 * (g_sum**2 - g_sq_sum)  # 4 * sum_{t<t'} g_t g_t'
    i_ss = 0.25 * math.fsum((diag_term + cross).tolist())

    # cross information with (beta, alpha): beta block exactly zero
    i_s_alpha = 0.5 * math.fsum((lam**2 / c**2).tolist())
    i_sw = np.zeros(p + 1)
    i_sw[p] = i_s_alpha

    # regression information X' W X, W = lam / (1 + alpha lam)
    i_bb = x.T @ ((lam / c)[:, None] * x)

    # dispersion information via the tail series
    surv = nb_survival_series(lam, alpha_hat, tol=SERIES_TAIL_TOL, max_terms=SERIES_MAX_TERMS)
    j = np.arange(surv.shape[0], dtype=float)
    weights = (1.0 / alpha_hat + j) ** -2.0
    series_per_obs = weights @ surv
    i_aa_per_obs = alpha_hat**-4.0 * (
        series_per_obs - alpha_hat * lam / (lam + 1.0 / alpha_hat)
    )
    i_aa = math.fsum(i_aa_per_obs.tolist())
    if i_aa <= 0.0:
        raise ScoreTestError(f"dispersion information is nonpositive: {i_aa}")

    i_ww = np.zeros((p + 1, p + 1))
    i_ww[:p, :p] = i_bb
    i_ww[p, p] = i_aa

    effective = i_ss - i_s_alpha**2 / i_aa
    if effective <= 0.0:
        raise ScoreTestError(
            f"effective variance is nonpositive: i_ss={i_ss}, "
            f"i_s_alpha={i_s_alpha}, i_aa={i_aa}"
        )
    return InfoComponents(i_ss=i_ss, i_sw=i_sw, i_ww=i_ww, effective_variance=effective)


def nb_score_test(panel: ClaimPanel, fit: GlmFit) -> ScoreTestResult:
    """Shared-effect score test at the fitted NB null.

    statistic = sum_i T_i(beta_hat, alpha_hat) / sqrt(effective variance).

    A fit on the equidispersion boundary (alpha_hat ~ 0) degenerates the NB
    information; the Pinquet statistic is reported in its place with
    ``degenerate_alpha`` set.
    """
    if fit.family != "negbin":
        raise ScoreTestError(f"nb_score_test needs a negbin fit, got {fit.family!r}")
    if not fit.converged:
        raise ScoreTestError("nb_score_test requires a converged fit")

    if fit.alpha < ALPHA_DEGENERATE:
        lam = linear_predictor_flat(panel, fit.beta)
        fallback = pinquet_statistic(panel, lam)
        fallback.test = "nb-score"
        fallback.degenerate_alpha = True
        return fallback

    lam = linear_predictor_flat(panel, fit.beta)
    contributions = _per_policy_contributions(panel, lam, fit.alpha)
    info = nb_information_components(panel, fit.beta, fit.alpha)
    numerator = math.fsum(contributions.tolist())
    denominator = math.sqrt(info.effective_variance)
    stat = numerator / denominator
    return ScoreTestResult(
        statistic=stat,
        p_value_one_sided=float(norm.sf(stat)),
        numerator=numerator,
        denominator=denominator,
        per_policy_contributions=contributions,
        test="nb-score",
        info=info,
    )


@dataclass
class BmExistenceReport:
    """Both tests on one panel, with the disagreement flag raised when the
    Poisson-based test rejects but the NB-based test does not (the signature
    of overdispersion without serial dependence)."""

    pinquet: ScoreTestResult
    nb_score: ScoreTestResult
    level: float
    pinquet_reject: bool
    nb_reject: bool
    disagreement: bool

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "pinquet": self.pinquet.to_dict(self.level),
            "nb_score": self.nb_score.to_dict(self.level),
            "pinquet_reject": self.pinquet_reject,
            "nb_reject": self.nb_reject,
            "disagreement": self.disagreement,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def bm_existence_report(panel: ClaimPanel, level: float = 0.05) -> BmExistenceReport:
    """Fit both nulls, run both tests, and compare their decisions."""
    pois = fit_poisson_glm(panel)
    lam = linear_predictor_flat(panel, pois.beta)
    pin = pinquet_statistic(panel, lam)

    nb_fit = fit_nb_glm(panel)
    nb = nb_score_test(panel, nb_fit)

    pin_reject = pin.reject_at(level)
    nb_reject = nb.reject_at(level)
    return BmExistenceReport(
        pinquet=pin,
        nb_score=nb,
        level=level,
        pinquet_reject=pin_reject,
        nb_reject=nb_reject,
        disagreement=pin_reject and not nb_reject,
    )


def nb_dispersion_score(panel: ClaimPanel, beta_hat, alpha_hat: float) -> float:
    """Total d/d alpha of the NB log-likelihood (used by oracle tests)."""
    lam = linear_predictor_flat(panel, np.asarray(beta_hat, dtype=float))
    return float(np.sum(nb_alpha_score_per_obs(panel.counts.astype(float), lam, alpha_hat)))
