"""Maximum-likelihood fitting of the fixed-effect claim-frequency models:
Poisson regression and negative binomial regression with a log link.

Both fits use Newton iterations with step halving; the NB dispersion is
updated jointly with the regression coefficients on the log scale, with a
floor that maps to an exact zero (Poisson submodel) in the reported fit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .panel import ClaimPanel

MAX_ITERATIONS = 200
LOGLIK_RTOL = 1e-10
GRADIENT_RTOL = 1e-8
ALPHA_FLOOR = 1e-12


class EstimationError(RuntimeError):
    """Design or data makes the requested fit impossible."""


@dataclass
class GlmFit:
    """Fitted fixed-effect model.

    ``alpha`` is 0 for the Poisson family and for NB fits that ended on the
    equidispersion boundary (``alpha_boundary`` True in that case).
    ``observed_information`` is the negative Hessian at the optimum: p x p
    for Poisson and boundary NB fits, (p+1) x (p+1) with the dispersion row
    last for interior NB fits.
    """

    family: str
    beta: np.ndarray
    alpha: float
    loglik: float
    iterations: int
    converged: bool
    observed_information: np.ndarray
    alpha_boundary: bool = False

    def standard_errors(self) -> np.ndarray:
        cov = self.covariance()
        if cov is None:
            return np.full(self.observed_information.shape[0], np.nan)
        return np.sqrt(np.diag(cov))

    def covariance(self):
        try:
            return np.linalg.inv(self.observed_information)
        except np.linalg.LinAlgError:
            return None

    def to_dict(self) -> dict:
        cov = self.covariance()
        return {
            "family": self.family,
            "beta": [float(b) for b in self.beta],
            "alpha": float(self.alpha),
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "alpha_boundary": bool(self.alpha_boundary),
            "covariance": None if cov is None else [[float(v) for v in row] for row in cov],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def _check_full_rank(x: np.ndarray):
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise EstimationError("design matrix is rank deficient")


def _poisson_loglik(y, lam):
    return float(np.sum(y * np.log(lam) - lam - gammaln(y + 1.0)))


def fit_poisson_glm(panel: ClaimPanel) -> GlmFit:
    """Poisson regression MLE: maximizes sum(N log lam - lam) over beta."""
    x = panel.design_matrix
    y = panel.counts.astype(float)
    _check_full_rank(x)

    beta = np.zeros(x.shape[1])
    if np.all(y == 0.0):
        # Likelihood increases without bound as the intercept goes to -inf.
        lam = np.exp(x @ beta)
        info = x.T @ (lam[:, None] * x)
        return GlmFit("poisson", beta, 0.0, _poisson_loglik(y, lam), 0, False, info)

    # start from the mean-matched constant rate
    total = y.sum()
    beta = np.linalg.lstsq(x, np.full(y.size, np.log(total / y.size)), rcond=None)[0]

    lam = np.exp(x @ beta)
    ll = _poisson_loglik(y, lam)
    iterations = 0
    converged = False
    for iterations in range(1, MAX_ITERATIONS + 1):
        grad = x.T @ (y - lam)
        hess = x.T @ (lam[:, None] * x)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise EstimationError("singular Hessian in Poisson fit") from None
        scale = 1.0
        for _ in range(40):
            cand = beta + scale * step
            lam_cand = np.exp(x @ cand)
            ll_cand = _poisson_loglik(y, lam_cand)
            if np.isfinite(ll_cand) and ll_cand >= ll - 1e-13 * (1.0 + abs(ll)):
                break
            scale *= 0.5
        beta, lam, ll_prev, ll = cand, lam_cand, ll, ll_cand
        grad_new = x.T @ (y - lam)
        if (
            abs(ll - ll_prev) < LOGLIK_RTOL * (1.0 + abs(ll))
            and np.max(np.abs(grad_new)) < GRADIENT_RTOL * (1.0 + abs(ll))
        ):
            converged = True
            break

    info = x.T @ (lam[:, None] * x)
    return GlmFit("poisson", beta, 0.0, ll, iterations, converged, info)


# ---------------------------------------------------------------------------
# negative binomial internals
#
# The log-likelihood per observation, written to stay stable for all
# alpha >= 0 (u = alpha * lam):
#   l = sum_{j<n} log(1 + j alpha) - lgamma(n+1)
#       - (1/alpha + n) log(1+u) + n log lam
# with the alpha -> 0 limit equal to the Poisson log-likelihood.
# ---------------------------------------------------------------------------


def _count_sums(y: np.ndarray, alpha: float):
    """sum_{j<n} log(1+j a), sum_{j<n} j/(1+j a), sum_{j<n} j^2/(1+j a)^2 per obs."""
    n_max = int(y.max()) if y.size else 0
    s_log = np.zeros_like(y, dtype=float)
    s_lin = np.zeros_like(y, dtype=float)
    s_sq = np.zeros_like(y, dtype=float)
    for j in range(1, n_max):
        mask = y > j
        if not mask.any():
            break
        d = 1.0 + j * alpha
        s_log[mask] += np.log(d)
        s_lin[mask] += j / d
        s_sq[mask] += (j / d) ** 2
    return s_log, s_lin, s_sq


def _q2(u):
    """(1+u)log(1+u) - u, series for small u (cancellation guard)."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = np.abs(u) < 1e-4
    us = u[small]
    out[small] = us**2 * (0.5 + us * (1.0 / 6.0 + us * (-1.0 / 12.0 + us / 20.0)))
    ub = u[~small]
    out[~small] = (1.0 + ub) * np.log1p(ub) - ub
    return out


def _q3(u):
    """2u + 3u^2 - 2(1+u)^2 log(1+u), series for small u."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    small = np.abs(u) < 1e-3
    us = u[small]
    out[small] = us**3 * (-2.0 / 3.0 + us * (1.0 / 6.0 - us / 15.0))
    ub = u[~small]
    out[~small] = 2.0 * ub + 3.0 * ub**2 - 2.0 * (1.0 + ub) ** 2 * np.log1p(ub)
    return out


def nb_loglik_parts(y: np.ndarray, lam: np.ndarray, alpha: float):
    """Per-observation NB log-likelihood terms (stable alpha form)."""
    if alpha <= 0.0:
        return y * np.log(lam) - lam - gammaln(y + 1.0)
    s_log, _, _ = _count_sums(y, alpha)
    u = alpha * lam
    return s_log - gammaln(y + 1.0) - (1.0 / alpha + y) * np.log1p(u) + y * np.log(lam)


def nb_alpha_score_per_obs(y: np.ndarray, lam: np.ndarray, alpha: float):
    """d/d alpha of the per-observation NB log-likelihood.

    At alpha = 0 this is the overdispersion score ((n-lam)^2 - n)/2.
    """
    if alpha <= 0.0:
        return 0.5 * ((y - lam) ** 2 - y)
    _, s_lin, _ = _count_sums(y, alpha)
    u = alpha * lam
    return s_lin + _q2(u) / (alpha**2 * (1.0 + u)) - y * lam / (1.0 + u)


def _nb_alpha_curvature_per_obs(y: np.ndarray, lam: np.ndarray, alpha: float):
    """d^2/d alpha^2 of the per-observation NB log-likelihood (alpha > 0)."""
    _, _, s_sq = _count_sums(y, alpha)
    u = alpha * lam
    return -s_sq + _q3(u) / (alpha**3 * (1.0 + u) ** 2) + y * lam**2 / (1.0 + u) ** 2


def nb_loglik_and_gradient(panel: ClaimPanel, beta, alpha: float):
    """NB log-likelihood and its gradient over (beta, alpha).

    Returns (loglik, grad) with grad of length p+1; the last entry is the
    dispersion derivative, evaluated by its analytic limit at alpha = 0.
    """
    if alpha < 0.0:
        raise EstimationError(f"alpha must be nonnegative, got {alpha}")
    beta = np.asarray(beta, dtype=float)
    x = panel.design_matrix
    y = panel.counts.astype(float)
    lam = np.exp(x @ beta)
    ll = float(np.sum(nb_loglik_parts(y, lam, alpha)))
    resid = (y - lam) / (1.0 + alpha * lam)
    grad_beta = x.T @ resid
    grad_alpha = float(np.sum(nb_alpha_score_per_obs(y, lam, alpha)))
    return ll, np.append(grad_beta, grad_alpha)


def _nb_hessian(x, y, lam, alpha: float):
    """Hessian blocks over (beta, alpha) for alpha > 0."""
    u = alpha * lam
    c2 = (1.0 + u) ** 2
    w_bb = lam * (1.0 + alpha * y) / c2
    h_bb = -(x.T @ (w_bb[:, None] * x))
    h_ba = -(x.T @ (lam * (y - lam) / c2))
    h_aa = float(np.sum(_nb_alpha_curvature_per_obs(y, lam, alpha)))
    top = np.hstack([h_bb, h_ba[:, None]])
    bottom = np.append(h_ba, h_aa)
    return np.vstack([top, bottom])


def _alpha_moment_start(y, lam):
    num = np.sum((y - lam) ** 2 - lam)
    den = np.sum(lam**2)
    return num / den if den > 0 else 0.0


def fit_nb_glm(panel: ClaimPanel) -> GlmFit:
    """NB regression MLE over (beta, alpha) with alpha >= 0.

    The dispersion moves on the log scale with a floor at 1e-12; a fit that
    ends pinned to the floor with a nonpositive dispersion score is reported
    as the exact Poisson submodel (alpha = 0, alpha_boundary = True).
    """
    pois = fit_poisson_glm(panel)
    x = panel.design_matrix
    y = panel.counts.astype(float)
    if np.all(y == 0.0):
        fit = GlmFit(
            "negbin", pois.beta, 0.0, pois.loglik, 0, False,
            pois.observed_information, alpha_boundary=True,
        )
        return fit

    lam0 = np.exp(x @ pois.beta)
    alpha0 = max(_alpha_moment_start(y, lam0), 1e-4)

    beta = pois.beta.copy()
    log_alpha = np.log(alpha0)
    log_floor = np.log(ALPHA_FLOOR)
    p = x.shape[1]

    def objective(b, la):
        return nb_loglik_and_gradient(panel, b, np.exp(la))

    ll, grad = objective(beta, log_alpha)
    iterations = 0
    converged = False
    floor_hits = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        alpha = np.exp(log_alpha)
        lam = np.exp(x @ beta)
        hess = _nb_hessian(x, y, lam, alpha)
        # chain rule to u = log alpha
        grad_u = grad.copy()
        grad_u[p] = alpha * grad[p]
        hess_u = hess.copy()
        hess_u[:p, p] *= alpha
        hess_u[p, :p] *= alpha
        hess_u[p, p] = alpha**2 * hess[p, p] + alpha * grad[p]

        step = None
        ridge = 0.0
        for _ in range(8):
            try:
                chol = np.linalg.cholesky(-(hess_u - ridge * np.eye(p + 1)))
                step = np.linalg.solve(-(hess_u - ridge * np.eye(p + 1)), grad_u)
                break
            except np.linalg.LinAlgError:
                ridge = max(2.0 * ridge, 1e-6 * (1.0 + np.max(np.abs(hess_u))))
        if step is None:
            # fall back to alternating profile updates
            step = np.zeros(p + 1)
            try:
                step[:p] = np.linalg.solve(-hess[:p, :p], grad[:p])
            except np.linalg.LinAlgError:
                raise EstimationError("singular Hessian in NB fit") from None
            if hess_u[p, p] < 0:
                step[p] = -grad_u[p] / hess_u[p, p]

        scale = 1.0
        improved = False
        for _ in range(40):
            cand_beta = beta + scale * step[:p]
            cand_la = max(log_alpha + scale * step[p], log_floor)
            ll_cand, grad_cand = objective(cand_beta, cand_la)
            if np.isfinite(ll_cand) and ll_cand >= ll - 1e-13 * (1.0 + abs(ll)):
                improved = True
                break
            scale *= 0.5
        if not improved:
            break
        ll_prev = ll
        beta, log_alpha, ll, grad = cand_beta, cand_la, ll_cand, grad_cand

        if log_alpha <= log_floor + 1e-9:
            floor_hits += 1
            if grad[p] <= 0.0 and floor_hits >= 2:
                break
        else:
            floor_hits = 0

        grad_check = grad.copy()
        grad_check[p] = np.exp(log_alpha) * grad[p]
        if (
            abs(ll - ll_prev) < LOGLIK_RTOL * (1.0 + abs(ll))
            and np.max(np.abs(grad_check)) < GRADIENT_RTOL * (1.0 + abs(ll))
        ):
            converged = True
            break

    alpha = float(np.exp(log_alpha))
    at_boundary = log_alpha <= log_floor + 1e-9 and grad[p] <= 0.0
    if at_boundary:
        # exact Poisson submodel
        return GlmFit(
            "negbin", pois.beta, 0.0, pois.loglik, iterations, pois.converged,
            pois.observed_information, alpha_boundary=True,
        )

    lam = np.exp(x @ beta)
    info = -_nb_hessian(x, y, lam, alpha)
    return GlmFit("negbin", beta, alpha, ll, iterations, converged, info)


def glm_fit_from_dict(doc: dict) -> GlmFit:
    """Rebuild a GlmFit from its JSON document (covariance not restored)."""
    beta = np.asarray(doc["beta"], dtype=float)
    info = np.eye(beta.size)
    return GlmFit(
        family=doc["family"],
        beta=beta,
        alpha=float(doc.get("alpha", 0.0)),
        loglik=float(doc["loglik"]),
        iterations=int(doc.get("iterations", 0)),
        converged=bool(doc["converged"]),
        observed_information=info,
        alpha_boundary=bool(doc.get("alpha_boundary", False)),
    )
