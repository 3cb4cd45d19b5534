"""Common codebook construction, message mapping and collision accounting.

The codebook is built from randomly selected rows of a 2^J-point DFT matrix,
scaled so that every column (codeword) has unit norm.  For this construction
C C^H = (2^J / n0) I, which lets the decoder replace generic matrix products
with FFTs of length 2^J.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

_MAGIC = b"UURACB01"


class CodebookError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    """DFT-row-sampled codebook of 2^J unit-norm codewords of length n0.

    Attributes
    ----------
    n0 : sub-slot length in symbols (number of rows of C).
    J : bits per sub-block; the codebook has 2^J columns.
    seed : seed used to draw the row selection.
    row_selection : n0 distinct DFT row indices in [0, 2^J).
    """

    n0: int
    J: int
    seed: int
    row_selection: np.ndarray = field(repr=False)

    def __post_init__(self):
        sel = np.asarray(self.row_selection, dtype=np.int64)
        if sel.shape != (self.n0,):
            raise CodebookError("row_selection must hold n0 indices")
        if len(np.unique(sel)) != self.n0:
            raise CodebookError("row_selection entries must be distinct")
        if sel.min() < 0 or sel.max() >= self.n_codewords:
            raise CodebookError("row_selection entries out of range")
        object.__setattr__(self, "row_selection", sel)

    @property
    def n_codewords(self) -> int:
        return 1 << self.J

    @property
    def gram_scale(self) -> float:
        """q = 2^J / n0, the diagonal value of C C^H for this construction."""
        return self.n_codewords / self.n0

    @cached_property
    def matrix(self) -> np.ndarray:
        """Dense n0 x 2^J codebook matrix (built on first use)."""
        N = self.n_codewords
        cols = np.arange(N)
        phase = -2j * np.pi / N * np.outer(self.row_selection, cols)
        return np.exp(phase) / np.sqrt(self.n0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """C @ X via a length-2^J FFT along the first axis."""
        F = np.fft.fft(np.asarray(X, dtype=complex), axis=0)
        return F[self.row_selection] / np.sqrt(self.n0)

    def apply_adjoint(self, Y: np.ndarray) -> np.ndarray:
        """C^H @ Y via a zero-padded inverse FFT."""
        Y = np.asarray(Y, dtype=complex)
        N = self.n_codewords
        Z = np.zeros((N,) + Y.shape[1:], dtype=complex)
        Z[self.row_selection] = Y
        return np.fft.ifft(Z, axis=0) * (N / np.sqrt(self.n0))

    def param_digest(self) -> str:
        """Content hash of the construction parameters, for run manifests."""
        import hashlib

        h = hashlib.sha256()
        h.update(struct.pack("<qqq", self.n0, self.J, self.seed))
        h.update(self.row_selection.astype("<i8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        """Persist header only; the matrix is reconstructed deterministically."""
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<qqq", self.n0, self.J, self.seed))
            f.write(self.row_selection.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as f:
            magic = f.read(len(_MAGIC))
            if magic != _MAGIC:
                raise CodebookError(f"not a codebook file: {path}")
            n0, J, seed = struct.unpack("<qqq", f.read(24))
            sel = np.frombuffer(f.read(8 * n0), dtype="<i8").astype(np.int64)
        return cls(n0=n0, J=J, seed=seed, row_selection=sel)


def build_codebook(n0: int, J: int, seed: int) -> Codebook:
    """Draw n0 distinct rows of the 2^J-point DFT matrix (seeded, uniform)."""
    if n0 < 1 or J < 1:
        raise CodebookError("n0 and J must be positive")
    if n0 > (1 << J):
        raise CodebookError(f"n0={n0} exceeds codebook size 2^{J}")
    rng = np.random.default_rng(seed)
    sel = rng.choice(1 << J, size=n0, replace=False).astype(np.int64)
    return Codebook(n0=n0, J=J, seed=seed, row_selection=sel)


def encode_message(bits, J: int, L: int) -> np.ndarray:
    """Map a b = L*J bit message to L one-based codeword indices.

    Sub-block l (big-endian bit order) becomes index 1 + value(bits[lJ:(l+1)J]).
    """
    bits = np.asarray(bits, dtype=np.int64)
    if bits.ndim != 1 or bits.size != L * J:
        raise CodebookError(f"message length {bits.size} != L*J = {L * J}")
    if np.any((bits != 0) & (bits != 1)):
        raise CodebookError("message must be binary")
    weights = 1 << np.arange(J - 1, -1, -1, dtype=np.int64)
    return bits.reshape(L, J) @ weights + 1


def demap_index(index: int, J: int) -> np.ndarray:
    """Inverse of the per-block mapping: one-based index -> J bits, big-endian."""
    if not 1 <= index <= (1 << J):
        raise CodebookError(f"index {index} out of [1, 2^{J}]")
    value = int(index) - 1
    return np.array([(value >> k) & 1 for k in range(J - 1, -1, -1)], dtype=np.int64)


def collision_probability(K_a: int, J: int, L: int) -> float:
    """Probability that an active UE shares a codeword with another UE in
    at least one sub-slot: 1 - ((1 - 2^-J)^(K_a - 1))^L."""
    if K_a < 1 or J < 1 or L < 1:
        raise CodebookError("K_a, J, L must be >= 1")
    return float(-np.expm1((K_a - 1) * L * np.log1p(-(2.0 ** -J))))
