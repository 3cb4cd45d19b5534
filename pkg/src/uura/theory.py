"""Theory engine: state evolution, fixed point, asymptotics and the composed
joint-decoding error prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.special import gammainc
from scipy.stats import gamma as gamma_dist

from .decision import chi_square_abscissas  # noqa: F401  (re-exported for sweeps)


class TheoryError(ValueError):
    pass


@dataclass
class SETrajectory:
    u: np.ndarray          # u^1 .. u^T
    v: np.ndarray          # v^1 .. v^T (v^1 = 1)
    flagged: bool = False  # uniqueness precondition violated

    @property
    def u_limit(self) -> float:
        return float(self.u[-1])


def _bound_mmse(u: float, eps: float, gains: np.ndarray) -> float:
    """Closed-form denoiser error term E{eps g u / ((1 - eps) g + u)} over the
    empirical gain distribution (the bound the fixed-point analysis uses)."""
    return float(np.mean(eps * gains * u / ((1.0 - eps) * gains + u)))


def _exact_mmse(u: float, eps: float, gains: np.ndarray, M: int) -> float:
    """Per-entry MMSE of the Bernoulli-Gaussian denoiser by 1-D quadrature
    over the row-energy mixture Gamma(M, u+g) / Gamma(M, u)."""

    def per_gain(g):
        shrink = g / (g + u)
        rho = shrink * u
        log_pref = np.log1p(-eps) - np.log(eps) + M * np.log1p(g / u)

        def row_mse(x):
            # x = ||r||^2
            lo = log_pref - g * x / (u * (g + u))
            pi = 1.0 / (1.0 + np.exp(np.clip(lo, -700, 700)))
            lam2 = shrink ** 2 * x
            return pi * (M * rho + lam2) - pi ** 2 * lam2

        act = integrate.quad(
            lambda x: row_mse(x) * gamma_dist.pdf(x, M, scale=g + u),
            0, gamma_dist.ppf(1 - 1e-12, M, scale=g + u), limit=200)[0]
        noi = integrate.quad(
            lambda x: row_mse(x) * gamma_dist.pdf(x, M, scale=u),
            0, gamma_dist.ppf(1 - 1e-12, M, scale=u), limit=200)[0]
        return (eps * act + (1.0 - eps) * noi) / M

    return float(np.mean([per_gain(float(g)) for g in np.atleast_1d(gains)]))


def state_evolution(sigma2: float, eps: float, gains, n0: int, J: int,
                    T: int = 50, nonlinear: str = "bound",
                    M: int | None = None) -> SETrajectory:
    """Scalar state evolution of the detector for the DFT-sampled codebook:

        u^t     = sigma2 + (2^J/n0 - 1) v^t,         v^1 = 1
        v^{t+1} = Omega_phi(u^t)

    with Omega_phi either the closed bound ("bound") or the numerically
    integrated exact denoiser MMSE ("exact", needs M).
    """
    gains = np.atleast_1d(np.asarray(gains, dtype=float))
    q = 2.0 ** J / n0
    flagged = (q - 1.0) * eps / (1.0 - eps) >= 1.0
    if nonlinear == "exact" and M is None:
        raise TheoryError("exact nonlinear step needs the antenna count M")
    us, vs = [], []
    v = 1.0
    for _ in range(T):
        u = sigma2 + (q - 1.0) * v
        us.append(u)
        vs.append(v)
        if nonlinear == "bound":
            v = _bound_mmse(u, eps, gains)
        elif nonlinear == "exact":
            v = _exact_mmse(u, eps, gains, M)
        else:
            raise TheoryError(f"unknown nonlinear mode: {nonlinear}")
    return SETrajectory(u=np.array(us), v=np.array(vs), flagged=flagged)


def fixed_point_u(sigma2: float, eps: float, n0: int, J: int) -> float:
    """Closed-form fixed point sigma2 / (1 - (2^J - n0) eps / ((1 - eps) n0)).

    Valid when (2^J/n0 - 1) eps/(1 - eps) < 1, i.e. K_a < n0."""
    q = 2.0 ** J / n0
    load = (q - 1.0) * eps / (1.0 - eps)
    if load >= 1.0:
        raise TheoryError(
            "fixed point not unique: (2^J/n0 - 1) eps/(1-eps) >= 1 "
            "(requires K_a < n0)")
    return sigma2 / (1.0 - load)


def asymptotic_pmd_pfa(M: int, alpha, beta):
    """Leading-order large-M expansions of the misdetection / false-alarm
    tails at the normalized abscissas alpha = 2a/M < 1 < beta = 2b/M:

        P_md ~ exp(-M c^2 / 2) / sqrt(2 pi M) / (1 - alpha)
        P_fa ~ exp(-M d^2 / 2) / sqrt(2 pi M) / (beta - 1)

    with c = -sqrt(2 (alpha - 1 - log alpha)), d = sqrt(2 (beta - 1 - log beta)).
    """
    alpha = np.asarray(alpha, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if np.any(alpha >= 1.0) or np.any(alpha <= 0.0):
        raise TheoryError("alpha must lie in (0, 1)")
    if np.any(beta <= 1.0):
        raise TheoryError("beta must exceed 1")
    c2 = 2.0 * (alpha - 1.0 - np.log(alpha))
    d2 = 2.0 * (beta - 1.0 - np.log(beta))
    pref = 1.0 / np.sqrt(2.0 * np.pi * M)
    p_md = pref * np.exp(-0.5 * M * c2) / (1.0 - alpha)
    p_fa = pref * np.exp(-0.5 * M * d2) / (beta - 1.0)
    return p_md, p_fa


def tradeoff_tau(M: int, a, b):
    """tau = F_2M-gap between the decision abscissas, so that
    P_md + P_fa = 1 - tau identically."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a >= b):
        raise TheoryError("need a < b")
    tau = gammainc(M, 2.0 * b) - gammainc(M, 2.0 * a)
    # tau can round to exactly 1.0 when both tails underflow
    if np.any(tau <= 0.0) or np.any(tau > 1.0):
        raise TheoryError("tau outside (0, 1]")
    return tau


def theoretical_p2(K_a: int, J: int, p_md_bar: float, p_fa_bar: float,
                   cer: float) -> float:
    """Joint-decoding error: false alarms plus wrong stitching of correctly
    detected codewords."""
    for x in (p_md_bar, p_fa_bar, cer):
        if not 0.0 <= x <= 1.0:
            raise TheoryError("probabilities must lie in [0, 1]")
    ac = K_a / 2.0 ** J
    return (1.0 - ac) * p_fa_bar + ac * (1.0 - p_md_bar) * cer
