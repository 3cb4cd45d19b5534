"""Initialization and EM learning of the unknown parameter triple
(noise variance, per-row activity probability, per-row gain)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.stats import norm

from .codebook import Codebook

EPS_FLOOR = 1e-12
SIGMA2_FLOOR = 1e-300


@dataclass
class PriorEstimates:
    """Unknown-parameter triple learned by EM.

    sigma2 is scalar; eps and g are per-row vectors of length 2^J.
    """

    sigma2: float
    eps: np.ndarray
    g: np.ndarray
    flagged: bool = False

    def clamped(self) -> "PriorEstimates":
        eps = np.clip(self.eps, EPS_FLOOR, 1.0 - EPS_FLOOR)
        g = np.maximum(self.g, 0.0)
        s2 = max(float(self.sigma2), SIGMA2_FLOOR)
        flag = self.flagged or (s2 != self.sigma2) or np.any(eps != self.eps) \
            or np.any(g != self.g)
        return PriorEstimates(sigma2=s2, eps=eps, g=g, flagged=bool(flag))


def _sparsity_objective(c: np.ndarray, n0: int, J: int) -> np.ndarray:
    # T(c) = (1 + c^2) Phi(-c) - c phi(c)
    T = (1.0 + c ** 2) * norm.cdf(-c) - c * norm.pdf(c)
    num = 1.0 - (2.0 ** (J + 1) / n0) * T
    den = 1.0 + c ** 2 - 2.0 * T
    return num / den


@lru_cache(maxsize=None)
def initial_activity_fraction(n0: int, J: int) -> float:
    """Uniform initial activity probability from the 1-D maximization over
    c > 0, times n0 / 2^J.  Coarse grid on (0, 20] plus golden-section
    refinement to 1e-6."""
    grid = np.linspace(0.05, 20.0, 400)
    vals = _sparsity_objective(grid, n0, J)
    i = int(np.argmax(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    # golden-section on the bracket
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c1 = b - invphi * (b - a)
    c2 = a + invphi * (b - a)
    f1 = _sparsity_objective(np.array([c1]), n0, J)[0]
    f2 = _sparsity_objective(np.array([c2]), n0, J)[0]
    while b - a > 1e-6:
        if f1 > f2:
            b, c2, f2 = c2, c1, f1
            c1 = b - invphi * (b - a)
            f1 = _sparsity_objective(np.array([c1]), n0, J)[0]
        else:
            a, c1, f1 = c1, c2, f2
            c2 = a + invphi * (b - a)
            f2 = _sparsity_objective(np.array([c2]), n0, J)[0]
    best = max(f1, f2)
    eps0 = (n0 / 2.0 ** J) * best
    return float(np.clip(eps0, EPS_FLOOR, 1.0 - EPS_FLOOR))


def init_priors(Y: np.ndarray, codebook: Codebook,
                snr0: float = 100.0) -> PriorEstimates:
    """Data-driven starting point for the EM loop.

    sigma2 from the received energy assuming a signal-to-noise energy ratio
    snr0; eps uniform from the sparsity-level maximization; per-row gain from
    the matched-filter row energies of C^H Y.
    """
    n0, M = Y.shape
    N = codebook.n_codewords
    energy = float(np.linalg.norm(Y) ** 2)
    flagged = False
    sigma2 = energy / (n0 * M * (snr0 + 1.0))
    if sigma2 <= 0.0:
        sigma2 = SIGMA2_FLOOR
        flagged = True
    eps0 = initial_activity_fraction(codebook.n0, codebook.J)
    eps = np.full(N, eps0)
    R0 = codebook.apply_adjoint(Y)
    g = (codebook.n0 / (N * M)) * np.sum(np.abs(R0) ** 2, axis=1)
    return PriorEstimates(sigma2=sigma2, eps=eps, g=g, flagged=flagged).clamped()


def em_update(Y: np.ndarray, codebook: Codebook, den,
              priors: PriorEstimates) -> PriorEstimates:
    """One EM pass given the current denoiser output.

    sigma2 <- mean_m [ ||y_m - C s_hat_m||^2 / n0 ] + v_hat
    eps_j  <- pi_j
    g_j    <- ||lambda_j||^2 / M + rho_j
    """
    n0, M = Y.shape
    resid = Y - codebook.apply(den.s_hat)
    sigma2 = float(np.linalg.norm(resid) ** 2) / (n0 * M) + float(den.v_hat)
    eps = np.asarray(den.pi, dtype=float)
    g = np.sum(np.abs(den.lam) ** 2, axis=1) / M + den.rho
    return PriorEstimates(sigma2=sigma2, eps=eps, g=g).clamped()
