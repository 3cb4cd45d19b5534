"""Hard decision on active codewords and the closed-form detection theory.

The decision statistic ||r_j||^2 is gamma distributed (chi-square with 2M
degrees of freedom up to scale): Gamma(M, u) on inactive rows and
Gamma(M, u + g_j) on active rows.  With the threshold
theta_j = M u (g_j + u) log(1 + g_j/u) / g_j the misdetection and false-alarm
probabilities are regularized incomplete gamma tails evaluated at 2 a_j and
2 b_j, where a_j and b_j are the chi-square abscissas normalized so that
alpha_j = 2 a_j / M < 1 < beta_j = 2 b_j / M.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc, gammaincc

from .oamp import DetectorResult


@dataclass
class ActiveCodewordList:
    """Detected codewords of one sub-slot with channel/gain estimates."""

    slot: int
    indices: np.ndarray   # one-based codeword indices, strictly increasing
    h_hat: np.ndarray     # (n, M) channel vector estimates (rows of X_hat)
    g_hat: np.ndarray     # gain estimate per index: g_row + v_hat_final

    def __len__(self) -> int:
        return len(self.indices)


@dataclass
class DetectionTheory:
    a: np.ndarray
    b: np.ndarray
    theta: np.ndarray
    p_md: np.ndarray
    p_fa: np.ndarray
    tau: np.ndarray
    p_md_bar: float
    p_fa_bar: float
    p1: float


def compute_threshold(M: int, u: float, g) -> np.ndarray:
    """Energy threshold theta = M u (g + u) log(1 + g/u) / g.

    The g -> 0 limit is M u (log(1+x)/x -> 1)."""
    g = np.asarray(g, dtype=float)
    if u <= 0:
        raise ValueError("u must be positive")
    scalar = g.ndim == 0
    g = np.atleast_1d(g)
    theta = np.empty_like(g)
    zero = g <= 0
    theta[zero] = M * u
    gs = g[~zero]
    theta[~zero] = M * u * (gs + u) * np.log1p(gs / u) / gs
    return float(theta[0]) if scalar else theta


def chi_square_abscissas(M: int, u: float, g):
    """(a_j, b_j) with b_j - a_j = (M/2) log(1 + g_j/u) exactly."""
    g = np.asarray(g, dtype=float)
    log_term = np.log1p(g / u)
    a = M * u * log_term / (2.0 * g)
    b = a + (M / 2.0) * log_term
    return a, b


def theoretical_detection_errors(M: int, u: float, g, K_a: int,
                                 J: int) -> DetectionTheory:
    """Closed-form misdetection / false-alarm probabilities and the average
    detection error P1 = (K_a/2^J) Pmd_bar + (1 - K_a/2^J) Pfa_bar."""
    g = np.atleast_1d(np.asarray(g, dtype=float))
    if np.any(g <= 0) or u <= 0 or M < 1:
        raise ValueError("need M >= 1, u > 0 and g > 0")
    a, b = chi_square_abscissas(M, u, g)
    theta = compute_threshold(M, u, g)
    lo_a = gammainc(M, 2.0 * a)
    lo_b = gammainc(M, 2.0 * b)
    p_md = lo_a
    p_fa = gammaincc(M, 2.0 * b)
    tau = lo_b - lo_a
    p_md_bar = float(np.mean(p_md))
    p_fa_bar = float(np.mean(p_fa))
    ac = K_a / 2.0 ** J
    p1 = ac * p_md_bar + (1.0 - ac) * p_fa_bar
    return DetectionTheory(a=a, b=b, theta=np.atleast_1d(theta), p_md=p_md,
                           p_fa=p_fa, tau=tau, p_md_bar=p_md_bar,
                           p_fa_bar=p_fa_bar, p1=p1)


def decide_active(result: DetectorResult, slot: int = 1, mode: str = "r_norm",
                  k_fixed: int | None = None) -> ActiveCodewordList:
    """Threshold the detector output into a sorted active-codeword list.

    mode "r_norm" (default) thresholds ||r_j||^2 with theta from
    (M, u_final, g_row); "x_norm" applies the same thresholds to ||x_hat_j||^2;
    "posterior" keeps rows with activity posterior >= 1/2.  With k_fixed the
    top-k rows by decision margin are kept instead (genie class count).
    """
    M = result.M
    theta = compute_threshold(M, result.u_final, result.g_row)
    if mode == "r_norm":
        stat = np.sum(np.abs(result.r_final) ** 2, axis=1)
        margin = stat / theta
        active = stat > theta
    elif mode == "x_norm":
        stat = np.sum(np.abs(result.X_hat) ** 2, axis=1)
        margin = stat / theta
        active = stat > theta
    elif mode == "posterior":
        margin = result.pi_final
        active = result.pi_final >= 0.5
    else:
        raise ValueError(f"unknown decision mode: {mode}")
    if k_fixed is not None:
        order = np.argsort(margin)[::-1][:k_fixed]
        rows = np.sort(order)
    else:
        rows = np.flatnonzero(active)
    return ActiveCodewordList(
        slot=slot,
        indices=rows + 1,
        h_hat=result.X_hat[rows],
        g_hat=result.g_row[rows] + result.v_hat_final)
