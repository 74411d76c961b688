"""
detection.py
------------
Maximum-likelihood detection by exhaustive search, and symbol error rate.

For each slot the detector returns
  argmin_x ||y - H x||^2
over every combination of constellation points for the active users.
Hypotheses are enumerated in lexicographic order of symbol indices, so
exact ties resolve to the lexicographically smallest vector.
"""

import logging
from functools import lru_cache
from itertools import product

import numpy as np

from core.channel_sim import Constellation
from core.errors import CapacityError, DomainError, ShapeError

logger = logging.getLogger(__name__)

MAX_HYPOTHESES = 2 ** 20
SLOT_CHUNK = 16


@lru_cache(maxsize=32)
def _hypothesis_indices(order: int, n_active: int) -> np.ndarray:
    """All index vectors, shape (order ** n_active, n_active), lexicographic."""
    return np.array(list(product(range(order), repeat=n_active)), dtype=int).reshape(-1, n_active)


def _candidates(H: np.ndarray, c: Constellation, active: np.ndarray) -> tuple:
    n_active = int(active.sum())
    count = c.size ** n_active
    if count > MAX_HYPOTHESES:
        logger.warning("MLD would enumerate %d hypotheses", count)
        raise CapacityError(f"{count} hypotheses exceed the limit of {MAX_HYPOTHESES}")
    combos = _hypothesis_indices(c.size, n_active)
    # N x hypotheses
    return combos, H[:, active] @ c.points[combos].T


def mld_detect(y: np.ndarray, H: np.ndarray, c: Constellation, active=None) -> np.ndarray:
    """Symbol indices for one slot; -1 for inactive users."""
    y = np.asarray(y)
    H = np.asarray(H)
    K = H.shape[1]
    active = np.ones(K, dtype=bool) if active is None else np.asarray(active, dtype=bool)
    if y.shape != (H.shape[0],) or active.shape != (K,):
        raise ShapeError(f"y {y.shape}, H {H.shape}, active {active.shape} do not agree")

    decided = np.full(K, -1, dtype=int)
    if not active.any():
        return decided
    combos, hx = _candidates(H, c, active)
    metric = np.sum(np.abs(y[:, None] - hx) ** 2, axis=0)
    decided[active] = combos[int(np.argmin(metric))]
    return decided


def mld_detect_block(Y: np.ndarray, H: np.ndarray, c: Constellation) -> np.ndarray:
    """
    All-users-active detection for every column of Y (N x T).
    Returns K x T indices. Candidates H x are built once per block.
    """
    Y = np.asarray(Y)
    H = np.asarray(H)
    if Y.ndim != 2 or Y.shape[0] != H.shape[0]:
        raise ShapeError(f"Y {Y.shape} and H {H.shape} do not agree")
    K = H.shape[1]
    combos, hx = _candidates(H, c, np.ones(K, dtype=bool))
    hx_energy = np.sum(np.abs(hx) ** 2, axis=0)

    out = np.empty((K, Y.shape[1]), dtype=int)
    for start in range(0, Y.shape[1], SLOT_CHUNK):
        block = Y[:, start:start + SLOT_CHUNK]
        # ||y - Hx||^2 minus the per-slot constant ||y||^2
        metric = hx_energy[None, :] - 2.0 * (block.conj().T @ hx).real
        out[:, start:start + SLOT_CHUNK] = combos[np.argmin(metric, axis=1)].T
    return out


def ser(decided, truth) -> float:
    """Fraction of (slot, user) positions where the decision is wrong."""
    decided = np.asarray(decided)
    truth = np.asarray(truth)
    if decided.shape != truth.shape:
        raise DomainError(f"decisions {decided.shape} vs truth {truth.shape}")
    if decided.size == 0:
        raise DomainError("cannot score an empty block")
    return float(np.mean(decided != truth))
