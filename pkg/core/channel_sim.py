"""
channel_sim.py
--------------
Uplink link simulation: K single-antenna users, an N-antenna base station,
Rayleigh block fading.

  y_t = H x_t + n_t,   H_ij ~ CN(0, 1),   n_t ~ CN(0, sigma^2 I)

Two phases share one coherence block:
  - estimation: users transmit one by one (exactly one active per slot)
  - detection : all K users transmit every slot

SNR is per receive antenna, rho^2 / sigma^2.
"""

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from core.errors import ConfigError, DomainError, OutputError, ShapeError
from core.math_core import complex_normal

logger = logging.getLogger(__name__)

ESTIMATION = "estimation"
DETECTION = "detection"

# 2-bit Gray labels -> PAM4 level
_PAM4_GRAY = {0b00: -3.0, 0b01: -1.0, 0b11: 1.0, 0b10: 3.0}


# ── Constellations ───────────────────────────

@dataclass
class Constellation:
    """
    Symbol alphabet. points[i] is the symbol whose Gray bit label is the
    binary expansion of i (MSB first).
    """
    name: str
    points: np.ndarray
    power: float

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.size))

    @property
    def reference_index(self) -> int:
        """Highest-energy point (lowest index on ties), sent as the reference symbol."""
        return int(np.argmax(np.abs(self.points) ** 2))


def make_constellation(name: str, rho2: float = 1.0) -> Constellation:
    """Gray-mapped QPSK or 16QAM with average symbol energy rho2."""
    if rho2 <= 0:
        raise DomainError(f"rho2 must be > 0, got {rho2}")
    key = name.strip().lower().replace("-", "")
    scale = math.sqrt(rho2)

    if key == "qpsk":
        points = [
            ((1 - 2 * (i >> 1)) + 1j * (1 - 2 * (i & 1))) / math.sqrt(2)
            for i in range(4)
        ]
        return Constellation("qpsk", np.array(points) * scale, rho2)

    if key in ("qam16", "16qam"):
        points = [
            (_PAM4_GRAY[i >> 2] + 1j * _PAM4_GRAY[i & 0b11]) / math.sqrt(10)
            for i in range(16)
        ]
        return Constellation("qam16", np.array(points) * scale, rho2)

    raise ConfigError(f"unknown constellation '{name}' (expected qpsk or qam16)")


def modulate(bit_groups, c: Constellation) -> np.ndarray:
    """Map rows of bits (..., bits_per_symbol) to symbols."""
    bits = np.asarray(bit_groups)
    width = c.bits_per_symbol
    if bits.ndim == 0 or bits.shape[-1] != width:
        raise DomainError(f"{c.name} needs groups of {width} bits, got shape {bits.shape}")
    if not np.all((bits == 0) | (bits == 1)):
        raise DomainError("bit groups may only contain 0 and 1")
    weights = 1 << np.arange(width - 1, -1, -1)
    return c.points[bits.astype(int) @ weights]


def indices_to_bits(indices, c: Constellation) -> np.ndarray:
    """Gray labels of symbol indices, shape (..., bits_per_symbol)."""
    indices = np.asarray(indices, dtype=int)
    shifts = np.arange(c.bits_per_symbol - 1, -1, -1)
    return (indices[..., None] >> shifts) & 1


def demodulate_hard(y, c: Constellation):
    """Index of the nearest point; exact ties go to the lowest index."""
    y = np.asarray(y)
    dist = np.abs(y[..., None] - c.points) ** 2
    idx = np.argmin(dist, axis=-1)
    return int(idx) if idx.ndim == 0 else idx


# ── Channels ─────────────────────────────────

def snr_db_to_noise_var(snr_db: float, rho2: float = 1.0) -> float:
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    return rho2 / (10.0 ** (snr_db / 10.0))


def noise_var_to_snr_db(noise_var: float, rho2: float = 1.0) -> float:
    if noise_var == 0:
        return math.inf
    return 10.0 * math.log10(rho2 / noise_var)


@dataclass
class ChannelRealization:
    """One coherence block: H (N x K) plus the noise level it is observed at."""
    H: np.ndarray
    noise_var: float = 0.0
    rho2: float = 1.0

    @property
    def snr_db(self) -> float:
        return noise_var_to_snr_db(self.noise_var, self.rho2)


def draw_channel(N: int, K: int, rng: np.random.Generator,
                 noise_var: float = 0.0, rho2: float = 1.0) -> ChannelRealization:
    """I.i.d. CN(0, 1) Rayleigh channel."""
    if N < 1 or K < 1:
        raise DomainError(f"need N, K >= 1, got N={N}, K={K}")
    return ChannelRealization(complex_normal((N, K), 1.0, rng), noise_var, rho2)


# ── Schedules ────────────────────────────────

@dataclass
class Schedule:
    """slots[t, k] is True when user k transmits in slot t."""
    phase: str
    slots: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=bool)
        if self.slots.ndim != 2 or self.slots.shape[0] < 1:
            raise ShapeError(f"schedule mask must be T x K, got {self.slots.shape}")
        if self.phase == ESTIMATION:
            if not np.all(self.slots.sum(axis=1) == 1):
                raise DomainError("estimation slots must have exactly one active user")
            if not np.all(self.slots.any(axis=0)):
                raise DomainError("every user needs at least one estimation slot")
        elif self.phase == DETECTION:
            if not np.all(self.slots):
                raise DomainError("detection slots have every user active")
        else:
            raise DomainError(f"unknown phase '{self.phase}'")

    @property
    def n_slots(self) -> int:
        return self.slots.shape[0]

    @property
    def n_users(self) -> int:
        return self.slots.shape[1]


def estimation_schedule(K: int, repetitions: int = 4) -> Schedule:
    """Round robin, R slots per user: user t mod K owns slot t."""
    if K < 1 or repetitions < 1:
        raise DomainError(f"need K, repetitions >= 1, got {K}, {repetitions}")
    T = K * repetitions
    slots = np.zeros((T, K), dtype=bool)
    slots[np.arange(T), np.arange(T) % K] = True
    return Schedule(ESTIMATION, slots)


def reference_slots(schedule: Schedule) -> dict:
    """user -> first slot in which that user transmits alone."""
    solo = schedule.slots.sum(axis=1) == 1
    out = {}
    for t in np.flatnonzero(solo):
        k = int(np.flatnonzero(schedule.slots[t])[0])
        out.setdefault(k, int(t))
    return out


def detection_schedule(K: int, T: int) -> Schedule:
    if K < 1 or T < 1:
        raise DomainError(f"need K, T >= 1, got {K}, {T}")
    return Schedule(DETECTION, np.ones((T, K), dtype=bool))


# ── Frames ───────────────────────────────────

@dataclass
class FrameTruth:
    """What the scorer knows: the channel and sent symbol indices (-1 = silent)."""
    H: np.ndarray
    symbol_indices: np.ndarray


@dataclass
class Frame:
    tx_symbols: np.ndarray      # K x T, exact zeros where inactive
    rx_signals: np.ndarray      # N x T
    truth: FrameTruth
    schedule: Schedule
    noise_var: float


def transmit(H: np.ndarray, schedule: Schedule, symbols: np.ndarray,
             noise_var: float, rng: np.random.Generator,
             symbol_indices: np.ndarray = None) -> Frame:
    """Pass K x T symbols through H slot by slot and add CN(0, noise_var) noise."""
    H = np.asarray(H)
    symbols = np.asarray(symbols)
    N, K = H.shape
    T = schedule.n_slots
    if schedule.n_users != K or symbols.shape != (K, T):
        raise ShapeError(
            f"H is {H.shape}, schedule is {schedule.slots.shape}, symbols are {symbols.shape}"
        )
    if noise_var < 0:
        raise DomainError(f"noise variance must be >= 0, got {noise_var}")

    active = schedule.slots.T
    tx = np.where(active, symbols, 0.0 + 0.0j)
    rx = H @ tx + complex_normal((N, T), noise_var, rng)

    if symbol_indices is None:
        symbol_indices = np.full((K, T), -1, dtype=int)
    indices = np.where(active, symbol_indices, -1)
    return Frame(tx, rx, FrameTruth(H.copy(), indices), schedule, noise_var)


def draw_frame(H: np.ndarray, schedule: Schedule, c: Constellation,
               noise_var: float, rng: np.random.Generator, reference: bool = False) -> Frame:
    """
    Uniform random symbols for every active (slot, user), then transmit.
    With reference=True each user's first solo slot carries c.reference_index.
    """
    K, T = schedule.n_users, schedule.n_slots
    indices = rng.integers(0, c.size, size=(K, T))
    if reference:
        for k, t in reference_slots(schedule).items():
            indices[k, t] = c.reference_index
    return transmit(H, schedule, c.points[indices], noise_var, rng, symbol_indices=indices)


# ── Debug export ─────────────────────────────

def export_frame_csv(frame: Frame, path: str):
    """Received samples as rows of (slot, antenna, re, im)."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["slot", "antenna", "re", "im"])
            N, T = frame.rx_signals.shape
            for t in range(T):
                for n in range(N):
                    z = frame.rx_signals[n, t]
                    writer.writerow([t, n, f"{z.real:.17g}", f"{z.imag:.17g}"])
    except OSError as exc:
        raise OutputError(str(exc), path) from exc
    logger.debug("frame written to %s", path)


def import_frame_csv(path: str) -> np.ndarray:
    """Read back the N x T received matrix written by export_frame_csv."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise OutputError(str(exc), path) from exc
    if not rows:
        raise OutputError("no samples in frame file", path)
    T = 1 + max(int(r["slot"]) for r in rows)
    N = 1 + max(int(r["antenna"]) for r in rows)
    rx = np.zeros((N, T), dtype=complex)
    for r in rows:
        rx[int(r["antenna"]), int(r["slot"])] = complex(float(r["re"]), float(r["im"]))
    return rx
