"""
harness.py
----------
Experiment orchestration: SNR sweeps over the estimator set, per-block
metrics and constellation dumps for external plotting.

Every block owns its random streams, derived from (seed, point, block):
  stream 0  channel draw
  stream 1  blind estimation frame and VI training
  stream 2  pilot noise
  stream 3  detection frame
so results do not depend on the estimator set, block order or worker count.
"""

import csv
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from core.baselines import ls_estimate, make_orthogonal_pilots, mmse_estimate, send_pilots
from core.channel_sim import (
    Constellation,
    demodulate_hard,
    detection_schedule,
    draw_channel,
    draw_frame,
    estimation_schedule,
    make_constellation,
    snr_db_to_noise_var,
)
from core.config import (
    AIDED_LS,
    AIDED_MMSE,
    BLIND_VI,
    PERFECT_CSI,
    ExperimentConfig,
    display_name,
    uses_pilots,
)
from core.detection import mld_detect_block, ser
from core.errors import BlindMimoError, BlockError, ConfigError, DomainError, OutputError
from core.math_core import make_rng
from core.vi_estimator import elbo_gradcheck, fit_block

logger = logging.getLogger(__name__)

CHANNEL_STREAM = 0
BLIND_STREAM = 1
PILOT_STREAM = 2
DETECTION_STREAM = 3

CSV_COLUMNS = ("estimator", "snr_db", "mse_raw", "mse_aligned", "ser", "blocks", "wall_time_s")


# ── Metrics ──────────────────────────────────

def _same_shape(H_hat, H_true) -> tuple:
    H_hat = np.asarray(H_hat)
    H_true = np.asarray(H_true)
    if H_hat.shape != H_true.shape or H_hat.ndim != 2:
        raise DomainError(f"estimate {H_hat.shape} and channel {H_true.shape} differ")
    return H_hat, H_true


def align_channel(H_hat, H_true) -> np.ndarray:
    """
    Scale each column of H_hat by the complex scalar minimizing
    ||a_k h_hat_k - h_k||^2, which removes the per-user phase/gain ambiguity
    of blind estimates. A column keeps its original scale unless the scaled
    one has a strictly smaller residual; zero columns pass through.
    """
    H_hat, H_true = _same_shape(H_hat, H_true)
    aligned = H_hat.astype(complex)
    energy = np.sum(np.abs(H_hat) ** 2, axis=0)
    cross = np.sum(H_hat.conj() * H_true, axis=0)
    nonzero = energy > 0
    scaled = H_hat[:, nonzero] * (cross[nonzero] / energy[nonzero])
    before = np.sum(np.abs(H_hat[:, nonzero] - H_true[:, nonzero]) ** 2, axis=0)
    after = np.sum(np.abs(scaled - H_true[:, nonzero]) ** 2, axis=0)
    columns = np.flatnonzero(nonzero)[after < before]
    aligned[:, columns] = scaled[:, after < before]
    return aligned


def mse(H_hat, H_true) -> float:
    H_hat, H_true = _same_shape(H_hat, H_true)
    return float(np.sum(np.abs(H_hat - H_true) ** 2) / H_true.size)


def nearest_point_purity(points, truth_indices, c: Constellation) -> float:
    """Share of points whose nearest constellation point is their sent symbol."""
    points = np.asarray(points)
    truth = np.asarray(truth_indices)
    if points.shape != truth.shape:
        raise DomainError(f"points {points.shape} vs truth {truth.shape}")
    sent = truth >= 0
    if not sent.any():
        raise DomainError("no transmitted symbols to score")
    decided = np.asarray(demodulate_hard(points[sent], c))
    return float(np.mean(decided == truth[sent]))


def equalize(H_hat: np.ndarray, rx: np.ndarray) -> np.ndarray:
    """Per-slot least-squares symbol estimates (H^H H)^-1 H^H y, K x T."""
    solution, *_ = np.linalg.lstsq(H_hat, rx, rcond=None)
    return solution


# ── Result rows ──────────────────────────────

@dataclass
class ResultRow:
    estimator: str
    snr_db: float
    mse_raw: float
    mse_aligned: float
    ser: float
    blocks: int
    wall_time_s: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.ser <= 1.0:
            raise DomainError(f"SER {self.ser} outside [0, 1]")
        if self.mse_raw < 0 or self.mse_aligned < 0:
            raise DomainError("MSE values must be >= 0")
        if self.blocks < 1:
            raise DomainError("a result row needs at least one block")

    def csv_fields(self) -> list:
        return [
            self.estimator,
            _fmt(self.snr_db),
            _fmt(self.mse_raw),
            _fmt(self.mse_aligned),
            _fmt(self.ser),
            str(self.blocks),
            _fmt(self.wall_time_s),
        ]


def _fmt(value: float) -> str:
    return "{:.9g}".format(value)


def write_results_csv(rows: list, path: str):
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow(row.csv_fields())
    except OSError as exc:
        raise OutputError(exc.strerror or str(exc), path) from exc
    logger.info("results written to %s", path)


def read_results_csv(path: str) -> list:
    """Parse a sweep CSV back into validated ResultRows."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
                raise OutputError(f"unexpected header {reader.fieldnames}", path)
            raw_rows = list(reader)
    except OSError as exc:
        raise OutputError(exc.strerror or str(exc), path) from exc
    return [
        ResultRow(
            estimator=r["estimator"],
            snr_db=float(r["snr_db"]),
            mse_raw=float(r["mse_raw"]),
            mse_aligned=float(r["mse_aligned"]),
            ser=float(r["ser"]),
            blocks=int(r["blocks"]),
            wall_time_s=float(r["wall_time_s"]),
        )
        for r in raw_rows
    ]


# ── One block ────────────────────────────────

@dataclass
class BlockOutcome:
    estimator: str
    mse_raw: float
    mse_aligned: float
    ser: float
    seconds: float


def _block_trace_path(config: ExperimentConfig, point_index: int, block_index: int) -> str:
    # one trace per grid point, from its first block
    if not config.trace_path or block_index != 0:
        return ""
    stem, ext = os.path.splitext(config.trace_path)
    return f"{stem}_p{point_index}{ext or '.csv'}"


def _estimate(estimator: str, config: ExperimentConfig, H: np.ndarray, c: Constellation,
              noise_var: float, point_index: int, block_index: int, pilot_rx: dict) -> np.ndarray:
    """The estimator's final H_hat; the detector sees exactly this matrix."""
    seed = config.seed
    if estimator == PERFECT_CSI:
        return H.copy()

    if estimator == BLIND_VI:
        rng = make_rng(seed, point_index, block_index, BLIND_STREAM)
        schedule = estimation_schedule(config.n_users, config.est_repetitions)
        frame = draw_frame(H, schedule, c, noise_var, rng, reference=config.reference_symbol)
        vi_config = replace(config.vi_config(),
                            trace_path=_block_trace_path(config, point_index, block_index))
        return fit_block(frame, c, vi_config, rng).H_hat

    if not uses_pilots(estimator):
        raise ConfigError(f"unknown estimator '{estimator}'")
    if "Y" not in pilot_rx:
        rng = make_rng(seed, point_index, block_index, PILOT_STREAM)
        pilots = make_orthogonal_pilots(config.n_users, config.pilot_length, config.rho2)
        pilot_rx["pilots"] = pilots
        pilot_rx["Y"] = send_pilots(H, pilots, noise_var, rng)
    if estimator == AIDED_LS:
        return ls_estimate(pilot_rx["Y"], pilot_rx["pilots"])
    if estimator == AIDED_MMSE:
        return mmse_estimate(pilot_rx["Y"], pilot_rx["pilots"], noise_var)
    raise ConfigError(f"unknown estimator '{estimator}'")


def simulate_block(config: ExperimentConfig, snr_db: float, point_index: int,
                   block_index: int) -> list:
    """Run every configured estimator on one coherence block."""
    c = make_constellation(config.constellation, config.rho2)
    noise_var = snr_db_to_noise_var(snr_db, config.rho2)
    H = draw_channel(config.n_antennas, config.n_users,
                     make_rng(config.seed, point_index, block_index, CHANNEL_STREAM)).H
    detection = draw_frame(
        H, detection_schedule(config.n_users, config.t_det), c, noise_var,
        make_rng(config.seed, point_index, block_index, DETECTION_STREAM),
    )

    outcomes = []
    pilot_rx = {}
    for estimator in config.estimators:
        start = time.perf_counter()
        try:
            H_hat = _estimate(estimator, config, H, c, noise_var,
                              point_index, block_index, pilot_rx)
            decided = mld_detect_block(detection.rx_signals, H_hat, c)
            block_ser = ser(decided, detection.truth.symbol_indices)
        except ConfigError:
            raise
        except BlindMimoError as exc:
            raise BlockError(block_index, display_name(estimator), exc) from exc
        outcomes.append(BlockOutcome(
            estimator=estimator,
            mse_raw=mse(H_hat, H),
            mse_aligned=mse(align_channel(H_hat, H), H),
            ser=block_ser,
            seconds=time.perf_counter() - start,
        ))
    return outcomes


# ── Grid points and sweeps ───────────────────

def _run_blocks(config: ExperimentConfig, snr_db: float, point_index: int, on_block=None) -> list:
    indices = range(config.blocks_per_point)
    results = []
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            args = [(config, snr_db, point_index, b) for b in indices]
            for outcome in pool.map(simulate_block, *zip(*args)):
                results.append(outcome)
                if on_block:
                    on_block()
    else:
        for b in indices:
            results.append(simulate_block(config, snr_db, point_index, b))
            if on_block:
                on_block()
    return results


def run_point(config: ExperimentConfig, snr_db: float, point_index: int = 0,
              on_block=None) -> list:
    """
    One ResultRow per estimator, averaged over blocks_per_point blocks
    (reduced in block order).
    """
    blocks = _run_blocks(config, snr_db, point_index, on_block)
    rows = []
    for e, estimator in enumerate(config.estimators):
        per_block = [outcomes[e] for outcomes in blocks]
        row = ResultRow(
            estimator=display_name(estimator),
            snr_db=float(snr_db),
            mse_raw=float(np.mean([o.mse_raw for o in per_block])),
            mse_aligned=float(np.mean([o.mse_aligned for o in per_block])),
            ser=float(np.mean([o.ser for o in per_block])),
            blocks=len(per_block),
            wall_time_s=float(sum(o.seconds for o in per_block)) if config.report_wall_time else 0.0,
        )
        logger.info("%s @ %s dB: mse %.4g (aligned %.4g), ser %.4g",
                    row.estimator, _fmt(row.snr_db), row.mse_raw, row.mse_aligned, row.ser)
        rows.append(row)
    return rows


def sweep(config: ExperimentConfig, out_path: str = None, on_block=None) -> list:
    """run_point over the SNR grid; optionally written as CSV."""
    rows = []
    for point_index, snr_db in enumerate(config.snr_grid_db):
        rows.extend(run_point(config, snr_db, point_index, on_block))
    if out_path:
        write_results_csv(rows, out_path)
    return rows


# ── Constellation dumps ──────────────────────

@dataclass
class ConstellationDump:
    """
    pre  : N x T received samples (antenna n shown as "user" n)
    post : K x T equalized symbol estimates using the blind channel estimate
    truth: K x T sent symbol indices
    """
    pre: np.ndarray
    post: np.ndarray
    truth: np.ndarray
    H_hat: np.ndarray
    constellation: Constellation

    def post_purity(self) -> float:
        return nearest_point_purity(self.post, self.truth, self.constellation)

    def pre_purity(self) -> float:
        """Antenna n read directly as user n, without any equalization."""
        n = min(self.pre.shape[0], self.truth.shape[0])
        return nearest_point_purity(self.pre[:n], self.truth[:n], self.constellation)

    def rows(self) -> list:
        out = []
        for stage, values in (("pre", self.pre), ("post", self.post)):
            for t in range(values.shape[1]):
                for k in range(values.shape[0]):
                    z = values[k, t]
                    out.append([stage, str(t), str(k), _fmt(z.real), _fmt(z.imag)])
        return out


def dump_constellation(config: ExperimentConfig, snr_db: float, out_path: str = None,
                       point_index: int = 0) -> ConstellationDump:
    """
    Train the blind estimator on one block, then equalize a detection
    frame with its estimate.
    """
    c = make_constellation(config.constellation, config.rho2)
    noise_var = snr_db_to_noise_var(snr_db, config.rho2)
    H = draw_channel(config.n_antennas, config.n_users,
                     make_rng(config.seed, point_index, 0, CHANNEL_STREAM)).H
    H_hat = _estimate(BLIND_VI, config, H, c, noise_var, point_index, 0, {})
    detection = draw_frame(
        H, detection_schedule(config.n_users, config.t_det), c, noise_var,
        make_rng(config.seed, point_index, 0, DETECTION_STREAM),
    )
    dump = ConstellationDump(
        pre=detection.rx_signals,
        post=equalize(H_hat, detection.rx_signals),
        truth=detection.truth.symbol_indices,
        H_hat=H_hat,
        constellation=c,
    )
    if out_path:
        try:
            with open(out_path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["stage", "slot", "user", "re", "im"])
                writer.writerows(dump.rows())
        except OSError as exc:
            raise OutputError(exc.strerror or str(exc), out_path) from exc
        logger.info("constellation written to %s", out_path)
    return dump


# ── Gradient battery ─────────────────────────

def gradcheck(instances: int = 50, N: int = 2, K: int = 2, seed: int = 0,
              step: float = 1e-5) -> list:
    """Max relative gradient error for each of `instances` random problems."""
    if instances < 1:
        raise ConfigError(f"instances must be >= 1, got {instances}")
    errors = []
    for i in range(instances):
        rng = make_rng(seed, i)
        noise_var = float(10.0 ** rng.uniform(-2, 0))
        errors.append(elbo_gradcheck(N, K, rng, noise_var=noise_var, step=step))
    return errors

