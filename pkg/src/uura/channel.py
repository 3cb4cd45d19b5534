"""UE topology, large-scale fading, per-sub-slot Rayleigh channels and the
noisy received signal Y = C X + Z."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codebook import Codebook


class ChannelError(ValueError):
    pass


def path_loss_db(d_km) -> np.ndarray:
    """Uplink path loss in dB at distance d (km): -128.1 - 37.6 log10(d)."""
    return -128.1 - 37.6 * np.log10(np.asarray(d_km, dtype=float))


@dataclass(frozen=True)
class Topology:
    """Cell population with an active subset and large-scale gains."""

    K_tot: int
    active_set: np.ndarray  # UE ids of the K_a active UEs
    d_km: np.ndarray        # distance per UE, (0, 0.5] km
    gains: np.ndarray       # linear large-scale gain per UE

    @property
    def K_a(self) -> int:
        return len(self.active_set)

    @property
    def active_gains(self) -> np.ndarray:
        return self.gains[self.active_set]


@dataclass(frozen=True)
class LinkBudget:
    N0: float      # noise power, linear
    P_t: float     # per-symbol transmit power, linear
    sigma2: float  # effective noise variance N0 / (n0 * P_t)


def draw_topology(K_tot: int, K_a: int, seed: int) -> Topology:
    """Distances uniform on (0, 0.5] km; active set a uniform K_a-subset."""
    if not 1 <= K_a <= K_tot:
        raise ChannelError(f"need 1 <= K_a={K_a} <= K_tot={K_tot}")
    rng = np.random.default_rng(seed)
    d = 0.5 * (1.0 - rng.random(K_tot))  # (0, 0.5]
    gains = 10.0 ** (path_loss_db(d) / 10.0)
    active = np.sort(rng.choice(K_tot, size=K_a, replace=False))
    return Topology(K_tot=K_tot, active_set=active, d_km=d, gains=gains)


def calibrate_power(topology: Topology, n0: int, N0_dbm: float,
                    target_min_snr_db: float) -> LinkBudget:
    """Scale P_t so the weakest active UE hits the target receive SNR.

    SNR_k = P_t * g_k / N0, so P_t = snr_target * N0 / min_k g_k and the
    effective noise variance is sigma2 = N0 / (n0 * P_t).
    """
    if topology.K_a < 1:
        raise ChannelError("empty active set")
    N0 = 10.0 ** (N0_dbm / 10.0)
    snr_lin = 10.0 ** (target_min_snr_db / 10.0)
    g_min = float(topology.active_gains.min())
    P_t = snr_lin * N0 / g_min
    return LinkBudget(N0=N0, P_t=P_t, sigma2=N0 / (n0 * P_t))


def draw_channels(topology: Topology, M: int, L: int, seed: int) -> np.ndarray:
    """Rayleigh block fading: (L, K_a, M) complex Gaussian, per-entry
    variance g_k for the k-th active UE, redrawn independently per sub-slot."""
    if M < 1 or L < 1:
        raise ChannelError("M and L must be >= 1")
    rng = np.random.default_rng(seed)
    g = topology.active_gains
    std = np.sqrt(g / 2.0)[None, :, None]
    shape = (L, topology.K_a, M)
    return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def state_matrix(slot_indices, H_l: np.ndarray, n_codewords: int) -> np.ndarray:
    """Ground-truth codeword state matrix X_l: row i-1 accumulates the channels
    of every UE transmitting codeword i in this sub-slot."""
    idx = np.asarray(slot_indices, dtype=np.int64)
    if idx.min() < 1 or idx.max() > n_codewords:
        raise ChannelError("codeword index out of range")
    X = np.zeros((n_codewords, H_l.shape[1]), dtype=complex)
    np.add.at(X, idx - 1, H_l)
    return X


def transmit_slot(codebook: Codebook, slot_indices, H_l: np.ndarray,
                  sigma2: float, seed: int):
    """One sub-slot of the uplink: Y = C X + Z with AWGN of variance sigma2.

    Returns (Y, X) where X is simulation metadata for oracle tests, not a
    decoder input.
    """
    X = state_matrix(slot_indices, H_l, codebook.n_codewords)
    Y = codebook.apply(X)
    if sigma2 > 0:
        rng = np.random.default_rng(seed)
        std = np.sqrt(sigma2 / 2.0)
        Y = Y + std * (rng.standard_normal(Y.shape)
                       + 1j * rng.standard_normal(Y.shape))
    return Y, X
