"""
baselines.py
------------
Pilot-aided channel estimators used as benchmarks for the blind method.

The K users send known orthogonal pilots P (K x T_p); the receiver sees
  Y = H P + N
and estimates
  LS  : H_hat = Y P^H (P P^H)^-1
  MMSE: H_hat = Y P^H (P P^H + sigma^2 I_K)^-1     (i.i.d. CN(0,1) prior)
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import hadamard

from core.errors import ConfigError, DomainError, LinearAlgebraError, ShapeError
from core.math_core import cmatmul, complex_normal, hermitian

COND_LIMIT = 1e12


@dataclass
class PilotMatrix:
    P: np.ndarray       # K x T_p
    power: float        # rho^2 per pilot symbol

    @property
    def n_users(self) -> int:
        return self.P.shape[0]

    @property
    def length(self) -> int:
        return self.P.shape[1]


def make_orthogonal_pilots(K: int, T_p: int, rho2: float = 1.0) -> PilotMatrix:
    """
    First K rows of a Hadamard matrix when T_p is a power of two, otherwise
    of the T_p-point DFT matrix; scaled so every symbol has energy rho2.
    """
    if K < 1:
        raise ConfigError(f"need at least one user, got K={K}")
    if T_p < K:
        raise ConfigError(f"pilot length T_p={T_p} is shorter than K={K}")
    if rho2 <= 0:
        raise DomainError(f"rho2 must be > 0, got {rho2}")

    if T_p & (T_p - 1) == 0:
        base = hadamard(T_p).astype(complex)[:K]
    else:
        t = np.arange(T_p)
        base = np.exp(-2j * np.pi * np.outer(np.arange(K), t) / T_p)
    return PilotMatrix(base * math.sqrt(rho2), rho2)


def send_pilots(H: np.ndarray, pilots: PilotMatrix, noise_var: float,
                rng: np.random.Generator) -> np.ndarray:
    """Received pilot block Y = H P + N."""
    if H.shape[1] != pilots.n_users:
        raise ShapeError(f"H has {H.shape[1]} columns, pilots have {pilots.n_users} rows")
    return cmatmul(H, pilots.P) + complex_normal((H.shape[0], pilots.length), noise_var, rng)


def _regularized_solve(Y: np.ndarray, pilots: PilotMatrix, ridge: float) -> np.ndarray:
    P = pilots.P
    if Y.ndim != 2 or Y.shape[1] != pilots.length:
        raise ShapeError(f"Y is {Y.shape}, pilots are {P.shape}")
    gram = P @ hermitian(P) + ridge * np.eye(pilots.n_users)
    if np.linalg.cond(gram) > COND_LIMIT:
        raise LinearAlgebraError("pilot Gram matrix is singular")
    # Y P^H G^-1 = (G^-1 P Y^H)^H since G is Hermitian
    return hermitian(np.linalg.solve(gram, P @ hermitian(Y)))


def ls_estimate(Y: np.ndarray, pilots: PilotMatrix) -> np.ndarray:
    """Minimizer of ||Y - H P||_F^2."""
    return _regularized_solve(np.asarray(Y), pilots, 0.0)


def mmse_estimate(Y: np.ndarray, pilots: PilotMatrix, noise_var: float) -> np.ndarray:
    """Linear MMSE under the unit-variance Rayleigh prior."""
    if noise_var < 0:
        raise DomainError(f"noise variance must be >= 0, got {noise_var}")
    return _regularized_solve(np.asarray(Y), pilots, noise_var)
