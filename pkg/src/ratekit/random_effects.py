"""Maximum-likelihood fitting of shared-random-effect claim models.

The conditional law per period is Poisson or negative binomial with mean
theta_i * lam_it; the policyholder effect theta_i is mean-one gamma or
lognormal.  The marginal likelihood integrates theta out per policy:

* Poisson conditional with gamma mixing has a closed form (the joint
  gamma-Poisson marginal).
* Every other combination uses adaptive Gauss-Hermite quadrature on
  eta = log(theta), centered and scaled at each policy's posterior mode.

The outer optimizer is quasi-Newton (L-BFGS-B) on (beta, log alpha,
log sigma2) with analytic gradients computed as posterior expectations on
the same quadrature grid.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import digamma, gammaln, logsumexp

from .distributions import ALPHA_POISSON_CUTOFF
from .glm import (
    EstimationError,
    fit_nb_glm,
    fit_poisson_glm,
    nb_alpha_score_per_obs,
    nb_loglik_parts,
)
from .panel import ClaimPanel

VARIANCE_FLOOR = 1e-12
DEFAULT_NODES = 32
_LOG_FLOOR = np.log(VARIANCE_FLOOR)


class QuadratureError(RuntimeError):
    """Non-finite quadrature contribution; message carries node diagnostics."""


@dataclass
class ReFit:
    """Fitted shared-random-effect model.

    ``sigma2`` is the mixing distribution's variance parameter: Var(theta)
    for gamma mixing, the log-scale parameter for lognormal mixing (in which
    case Var(theta) = exp(sigma2) - 1 is reported as ``var_theta``).
    """

    conditional: str            # "poisson" | "negbin"
    re_dist: str                # "gamma" | "lognormal"
    beta: np.ndarray
    alpha: float
    sigma2: float
    loglik: float
    converged: bool
    iterations: int
    quadrature_nodes: int
    sigma2_boundary: bool = False
    alpha_boundary: bool = False

    @property
    def family(self) -> str:
        return "poisson-re" if self.conditional == "poisson" else "nb-re"

    @property
    def var_theta(self) -> float:
        if self.re_dist == "lognormal":
            return float(np.expm1(self.sigma2))
        return float(self.sigma2)

    def to_dict(self, covariance=None) -> dict:
        return {
            "family": self.family,
            "conditional": self.conditional,
            "re_dist": self.re_dist,
            "beta": [float(b) for b in self.beta],
            "alpha": float(self.alpha),
            "sigma2": float(self.sigma2),
            "var_theta": float(self.var_theta),
            "loglik": float(self.loglik),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "quadrature_nodes": int(self.quadrature_nodes),
            "covariance": covariance,
        }

    def to_json(self, covariance=None, **kwargs) -> str:
        return json.dumps(self.to_dict(covariance), **kwargs)


def _validate(conditional: str, re_dist: str):
    if conditional not in ("poisson", "negbin"):
        raise EstimationError(f"unknown conditional {conditional!r}")
    if re_dist not in ("gamma", "lognormal"):
        raise EstimationError(f"unknown re_dist {re_dist!r}")


def _stirling_norm(c: float) -> float:
    """c log c - c - lgamma(c), stable for every c > 0."""
    if c > 1e4:
        return 0.5 * np.log(c / (2.0 * np.pi)) - 1.0 / (12.0 * c) + 1.0 / (360.0 * c**3)
    return c * np.log(c) - c - gammaln(c)


def _conditional_parts(y, mu, alpha: float):
    if alpha < ALPHA_POISSON_CUTOFF:
        return y * np.log(mu) - mu - gammaln(y + 1.0)
    return nb_loglik_parts(y, mu, alpha)


def _closed_form_poisson_gamma(panel: ClaimPanel, lam, v: float):
    """Per-policy log marginal for the Poisson conditional, gamma mixing."""
    y = panel.counts.astype(float)
    c = 1.0 / v
    sn = panel.policy_sums(y)
    sl = panel.policy_sums(lam)
    base = panel.policy_sums(y * np.log(lam) - gammaln(y + 1.0))
    # lgamma(c + sn) - lgamma(c) summed as integer steps keeps large c exact
    max_sn = int(sn.max())
    gam_ratio = np.zeros_like(sn)
    if max_sn > 0 and c > 1e6:
        for j in range(max_sn):
            mask = sn > j
            gam_ratio[mask] += np.log(c + j)
    else:
        gam_ratio = gammaln(c + sn) - gammaln(c)
    norm = _stirling_norm(c) + c  # c log c - lgamma(c)
    return base + norm + gam_ratio - (c + sn) * (np.log(c) + np.log1p(sl / (c * 1.0)))


def _closed_form_gradient(panel: ClaimPanel, x, lam, v: float):
    """(per-policy loglik, grad beta, grad v) for the closed form."""
    y = panel.counts.astype(float)
    c = 1.0 / v
    sn = panel.policy_sums(y)
    sl = panel.policy_sums(lam)
    post_mean = (c + sn) / (c + sl)
    resid = y - post_mean[panel.policy_index] * lam
    grad_beta = x.T @ resid
    # d/dc of each policy's log marginal
    max_sn = int(sn.max())
    psi_ratio = np.zeros_like(sn)
    if max_sn > 0 and c > 1e6:
        for j in range(max_sn):
            mask = sn > j
            psi_ratio[mask] += 1.0 / (c + j)
    else:
        psi_ratio = digamma(c + sn) - digamma(c)
    bracket = psi_ratio - np.log1p(sl / c) + (sl - sn) / (c + sl)
    grad_v = -(c**2) * float(np.sum(bracket))
    return grad_beta, grad_v


def _log_mix_density(eta, v: float, kind: str):
    """log density of eta = log theta under the mean-one mixing law."""
    if kind == "gamma":
        c = 1.0 / v
        return _stirling_norm(c) + c - c * (np.expm1(eta) - eta)
    s2 = v
    z = eta + 0.5 * s2
    return -0.5 * np.log(2.0 * np.pi * s2) - z**2 / (2.0 * s2)


def _mix_dlog(eta, v: float, kind: str):
    """d/d eta of the log mixing density."""
    if kind == "gamma":
        c = 1.0 / v
        return c - c * np.exp(eta)
    return -(eta + 0.5 * v) / v


def _mix_d2log(eta, v: float, kind: str):
    if kind == "gamma":
        return -(1.0 / v) * np.exp(eta)
    return np.full_like(np.asarray(eta, dtype=float), -1.0 / v)


def _mix_dlog_dv(eta, v: float, kind: str):
    """d/dv of the log mixing density at fixed eta."""
    if kind == "gamma":
        c = 1.0 / v
        bracket = (np.log(c) + 1.0 - digamma(c)) - (np.expm1(eta) - eta) - 1.0
        return -(c**2) * bracket
    s2 = v
    z = eta + 0.5 * s2
    return -0.5 / s2 - z / (2.0 * s2) + z**2 / (2.0 * s2**2)


class _QuadratureWorkspace:
    """Caches node layout and per-policy mode guesses across objective calls."""

    def __init__(self, panel: ClaimPanel, n_nodes: int):
        self.panel = panel
        z, w = np.polynomial.hermite.hermgauss(n_nodes)
        self.z = z
        self.logw_plus_z2 = np.log(w) + z**2
        self.n_nodes = n_nodes
        self.mode = np.zeros(panel.n_policies)

    def reset_modes(self):
        self.mode[:] = 0.0


def _find_modes(ws: _QuadratureWorkspace, lam, alpha: float, v: float, kind: str):
    """Vectorized Newton for the per-policy maximizer of the eta integrand."""
    panel = ws.panel
    y = panel.counts.astype(float)
    eta = ws.mode.copy()
    for _ in range(60):
        mu = lam * np.exp(eta[panel.policy_index])
        if alpha < ALPHA_POISSON_CUTOFF:
            score_obs = y - mu
            curv_obs = -mu
        else:
            c1 = 1.0 + alpha * mu
            score_obs = (y - mu) / c1
            curv_obs = -mu * (1.0 + alpha * y) / c1**2
        g = panel.policy_sums(score_obs) + _mix_dlog(eta, v, kind)
        h = panel.policy_sums(curv_obs) + _mix_d2log(eta, v, kind)
        step = np.clip(g / (-h), -2.0, 2.0)
        eta += step
        if np.max(np.abs(step)) < 1e-12:
            break
    ws.mode[:] = eta
    mu = lam * np.exp(eta[panel.policy_index])
    if alpha < ALPHA_POISSON_CUTOFF:
        curv_obs = -mu
    else:
        c1 = 1.0 + alpha * mu
        curv_obs = -mu * (1.0 + alpha * y) / c1**2
    curvature = panel.policy_sums(curv_obs) + _mix_d2log(eta, v, kind)
    return eta, curvature


def _quadrature_loglik(
    ws: _QuadratureWorkspace, x, lam, alpha: float, v: float, kind: str,
    want_gradient: bool, n_beta: int, want_alpha: bool,
):
    """Adaptive GH loglik per policy, optionally with the gradient stack."""
    panel = ws.panel
    y = panel.counts.astype(float)
    eta0, curvature = _find_modes(ws, lam, alpha, v, kind)
    scale = 1.0 / np.sqrt(-curvature)
    # nodes: (k, m)
    nodes = eta0[:, None] + np.sqrt(2.0) * scale[:, None] * ws.z[None, :]
    mu = lam[:, None] * np.exp(nodes[panel.policy_index, :])
    parts = _conditional_parts(y[:, None], mu, alpha)
    idx = panel.policy_index
    a_vals = np.zeros((panel.n_policies, ws.n_nodes))
    np.add.at(a_vals, idx, parts)  # sum conditional parts per policy
    a_vals += _log_mix_density(nodes, v, kind)
    weighted = ws.logw_plus_z2[None, :] + a_vals
    lse = logsumexp(weighted, axis=1)
    per_policy = 0.5 * np.log(2.0) + np.log(scale) + lse
    if not np.all(np.isfinite(per_policy)):
        bad = int(np.argmax(~np.isfinite(per_policy)))
        raise QuadratureError(
            f"non-finite quadrature for policy ordinal {bad}: "
            f"mode={eta0[bad]:.6g}, scale={scale[bad]:.6g}, "
            f"node values={a_vals[bad]}"
        )
    if not want_gradient:
        return per_policy, None

    post = np.exp(weighted - lse[:, None])  # (k, m) posterior node weights
    w_obs = post[idx, :]                    # (n_obs, m)
    if alpha < ALPHA_POISSON_CUTOFF:
        mean_score = y[:, None] - mu
    else:
        mean_score = (y[:, None] - mu) / (1.0 + alpha * mu)
    eff_score = np.sum(w_obs * mean_score, axis=1)
    grad_beta = x.T @ eff_score

    pieces = [grad_beta]
    if want_alpha:
        a_score = nb_alpha_score_per_obs(y[:, None], mu, alpha)
        pieces.append(np.array([np.sum(w_obs * a_score)]))
    dv = _mix_dlog_dv(nodes, v, kind)
    grad_v = np.sum(post * dv)
    pieces.append(np.array([grad_v]))
    return per_policy, np.concatenate(pieces)


def marginal_loglik(
    panel: ClaimPanel,
    conditional: str,
    re_dist: str,
    beta,
    alpha: float = 0.0,
    sigma2: float = 0.0,
    n_nodes: int = DEFAULT_NODES,
) -> float:
    """Marginal log-likelihood with the shared effect integrated out."""
    ll, _ = marginal_loglik_and_gradient(
        panel, conditional, re_dist, beta, alpha, sigma2, n_nodes, want_gradient=False
    )
    return ll


def marginal_loglik_and_gradient(
    panel: ClaimPanel,
    conditional: str,
    re_dist: str,
    beta,
    alpha: float = 0.0,
    sigma2: float = 0.0,
    n_nodes: int = DEFAULT_NODES,
    want_gradient: bool = True,
    workspace: _QuadratureWorkspace | None = None,
):
    """Marginal log-likelihood and its gradient over (beta[, alpha], sigma2).

    The gradient is the posterior expectation of the complete-data score on
    the adapted quadrature grid; for the closed-form Poisson-gamma marginal
    it is exact.
    """
    _validate(conditional, re_dist)
    if sigma2 < 0.0:
        raise EstimationError(f"sigma2 must be nonnegative, got {sigma2}")
    if alpha < 0.0:
        raise EstimationError(f"alpha must be nonnegative, got {alpha}")
    beta = np.asarray(beta, dtype=float)
    x = panel.design_matrix
    y = panel.counts.astype(float)
    lam = np.exp(x @ beta)
    want_alpha = conditional == "negbin"

    if sigma2 == 0.0:
        parts = _conditional_parts(y, lam, alpha if want_alpha else 0.0)
        ll = float(np.sum(parts))
        if not want_gradient:
            return ll, None
        if want_alpha:
            resid = (y - lam) / (1.0 + alpha * lam)
            grad = np.concatenate([
                x.T @ resid,
                [float(np.sum(nb_alpha_score_per_obs(y, lam, alpha)))],
                [np.nan],  # sigma2 derivative is one-sided at 0; not provided
            ])
        else:
            grad = np.concatenate([x.T @ (y - lam), [np.nan]])
        return ll, grad

    if conditional == "poisson" and re_dist == "gamma":
        per_policy = _closed_form_poisson_gamma(panel, lam, sigma2)
        ll = float(np.sum(per_policy))
        if not want_gradient:
            return ll, None
        grad_beta, grad_v = _closed_form_gradient(panel, x, lam, sigma2)
        return ll, np.concatenate([grad_beta, [grad_v]])

    ws = workspace or _QuadratureWorkspace(panel, n_nodes)
    per_policy, grad = _quadrature_loglik(
        ws, x, lam, alpha, sigma2, re_dist, want_gradient, x.shape[1], want_alpha
    )
    return float(np.sum(per_policy)), grad


def _moment_start_sigma2(panel: ClaimPanel, lam, re_dist: str) -> float:
    """Cross-product moment estimate of Var(theta), mapped to the fitted scale."""
    y = panel.counts.astype(float)
    resid = y - lam
    s_resid = panel.policy_sums(resid)
    s_resid2 = panel.policy_sums(resid**2)
    s_lam = panel.policy_sums(lam)
    s_lam2 = panel.policy_sums(lam**2)
    num = float(np.sum(s_resid**2 - s_resid2))
    den = float(np.sum(s_lam**2 - s_lam2))
    var_theta = num / den if den > 0 else 0.05
    var_theta = float(np.clip(var_theta, 1e-3, 3.0))
    if re_dist == "lognormal":
        return float(np.log1p(var_theta))
    return var_theta


def fit_shared_re(
    panel: ClaimPanel,
    conditional: str,
    re_dist: str,
    n_nodes: int = DEFAULT_NODES,
    start: dict | None = None,
    max_iterations: int = 300,
) -> ReFit:
    """Maximize the marginal likelihood over (beta[, alpha], sigma2).

    Variance parameters move on the log scale with a floor at 1e-12;
    estimates pinned to the floor are reported as exact zeros when the
    zero-variance submodel matches their likelihood.
    """
    _validate(conditional, re_dist)
    want_alpha = conditional == "negbin"

    if start is not None:
        beta0 = np.asarray(start["beta"], dtype=float)
        alpha0 = float(start.get("alpha", 0.05)) if want_alpha else 0.0
        sigma20 = float(start["sigma2"])
        base_ll = None
    else:
        base = fit_nb_glm(panel) if want_alpha else fit_poisson_glm(panel)
        beta0 = base.beta
        alpha0 = max(base.alpha, 1e-3) if want_alpha else 0.0
        sigma20 = _moment_start_sigma2(panel, np.exp(panel.design_matrix @ base.beta), re_dist)
        base_ll = base.loglik

    p = panel.n_covariates
    ws = _QuadratureWorkspace(panel, n_nodes)

    def unpack(params):
        beta = params[:p]
        if want_alpha:
            return beta, float(np.exp(params[p])), float(np.exp(params[p + 1]))
        return beta, 0.0, float(np.exp(params[p]))

    def objective(params):
        beta, alpha, v = unpack(params)
        ll, grad = marginal_loglik_and_gradient(
            panel, conditional, re_dist, beta, alpha, v, n_nodes, workspace=ws
        )
        g = np.empty_like(params)
        g[:p] = grad[:p]
        if want_alpha:
            g[p] = grad[p] * alpha
            g[p + 1] = grad[p + 1] * v
        else:
            g[p] = grad[p] * v
        return -ll, -g

    x0 = np.concatenate([beta0, [np.log(alpha0)] if want_alpha else [], [np.log(max(sigma20, 1e-8))]])
    n_var = x0.size
    bounds = [(None, None)] * p + [(_LOG_FLOOR, np.log(50.0))] * (n_var - p)
    res = minimize(
        objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": max_iterations, "ftol": 1e-13, "gtol": 1e-8},
    )
    beta, alpha, sigma2 = unpack(res.x)
    loglik = -float(res.fun)

    # map floor-pinned variance parameters to exact zeros
    sigma2_boundary = False
    alpha_boundary = False
    if sigma2 <= 10.0 * VARIANCE_FLOOR:
        ll0 = marginal_loglik(panel, conditional, re_dist, beta, alpha, 0.0, n_nodes)
        if ll0 >= loglik - 1e-9 * (1.0 + abs(loglik)):
            sigma2, loglik, sigma2_boundary = 0.0, ll0, True
    if want_alpha and alpha <= 10.0 * VARIANCE_FLOOR:
        ll0 = marginal_loglik(panel, conditional, re_dist, beta, 0.0, sigma2, n_nodes)
        if ll0 >= loglik - 1e-9 * (1.0 + abs(loglik)):
            alpha, loglik, alpha_boundary = 0.0, ll0, True

    converged = bool(res.success)
    if base_ll is not None and loglik < base_ll - 1e-6 * (1.0 + abs(base_ll)):
        # the zero-variance submodel beats the located optimum: keep boundary
        converged = False
    return ReFit(
        conditional=conditional,
        re_dist=re_dist,
        beta=beta,
        alpha=alpha,
        sigma2=sigma2,
        loglik=loglik,
        converged=converged,
        iterations=int(res.nit),
        quadrature_nodes=n_nodes,
        sigma2_boundary=sigma2_boundary,
        alpha_boundary=alpha_boundary,
    )


def refit_covariance_fd(panel: ClaimPanel, fit: ReFit, step: float = 1e-5):
    """Finite-difference covariance of (beta[, alpha], sigma2) at the optimum.

    Interior parameters only; returns None when a variance sits on the
    boundary (the Hessian is one-sided there).
    """
    if fit.sigma2 == 0.0 or (fit.conditional == "negbin" and fit.alpha == 0.0):
        return None
    want_alpha = fit.conditional == "negbin"
    p = panel.n_covariates

    def pack():
        parts = [fit.beta]
        if want_alpha:
            parts.append([fit.alpha])
        parts.append([fit.sigma2])
        return np.concatenate(parts)

    def ll_at(params):
        beta = params[:p]
        if want_alpha:
            alpha, v = params[p], params[p + 1]
        else:
            alpha, v = 0.0, params[p]
        if v <= 0 or (want_alpha and alpha <= 0):
            return -np.inf
        return marginal_loglik(
            panel, fit.conditional, fit.re_dist, beta, alpha, v, fit.quadrature_nodes
        )

    x0 = pack()
    n = x0.size
    hess = np.zeros((n, n))
    hs = step * np.maximum(1.0, np.abs(x0))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n); ei[i] = hs[i]
            ej = np.zeros(n); ej[j] = hs[j]
            f_pp = ll_at(x0 + ei + ej)
            f_pm = ll_at(x0 + ei - ej)
            f_mp = ll_at(x0 - ei + ej)
            f_mm = ll_at(x0 - ei - ej)
            hess[i, j] = hess[j, i] = (f_pp - f_pm - f_mp + f_mm) / (4.0 * hs[i] * hs[j])
    try:
        return np.linalg.inv(-hess)
    except np.linalg.LinAlgError:
        return None
