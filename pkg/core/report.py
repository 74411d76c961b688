"""
report.py
---------
Human-readable summaries of a finished sweep.
Answers: WHICH estimator wins at each SNR, and by how much?
"""

from itertools import groupby

from core.config import ExperimentConfig
from core.harness import ResultRow


class SweepReport:
    """
    Takes the ResultRows of a sweep and ranks the estimators at every grid
    point by aligned MSE, with their SER alongside.
    """

    def __init__(self, rows: list, config: ExperimentConfig = None):
        self.rows = list(rows)
        self.config = config

    def points(self) -> list:
        """(snr_db, rows ranked by aligned MSE) in grid order."""
        ordered = []
        for snr, group in groupby(self.rows, key=lambda r: r.snr_db):
            ranked = sorted(group, key=lambda r: (r.mse_aligned, r.ser, r.estimator))
            ordered.append((snr, ranked))
        return ordered

    def best_at(self, snr_db: float, exclude=("Perfect-CSI",)) -> ResultRow:
        for snr, ranked in self.points():
            if snr == snr_db:
                candidates = [r for r in ranked if r.estimator not in exclude]
                return candidates[0] if candidates else None
        return None

    def get_full_report(self) -> str:
        lines = []
        if self.config is not None:
            c = self.config
            lines.append(f"SETUP: N={c.n_antennas} antennas, K={c.n_users} users, "
                         f"{c.constellation.upper()}, {c.blocks_per_point} blocks/point, seed {c.seed}")
            lines.append(f"BUDGET: blind {c.t_est} unlabeled slots, pilot-aided {c.pilot_length} pilot slots per block")
            lines.append("")

        for snr, ranked in self.points():
            lines.append(f"SNR {snr:g} dB")
            for i, r in enumerate(ranked, 1):
                lines.append(
                    f"  {i}. {r.estimator:<12} MSE {r.mse_aligned:.4g} "
                    f"(raw {r.mse_raw:.4g})  SER {r.ser:.4g}"
                )
            lines.append("")

        lines.append(self.get_short_summary())
        return "\n".join(lines)

    def get_short_summary(self) -> str:
        """One-liner for quick display."""
        if not self.rows:
            return "Empty sweep."
        wins = {}
        for snr, _ in self.points():
            best = self.best_at(snr)
            if best is not None:
                wins[best.estimator] = wins.get(best.estimator, 0) + 1
        if not wins:
            return f"{len(self.points())} SNR point(s), reference estimator only."
        leader = max(sorted(wins), key=wins.get)
        return (
            f"{leader} has the lowest aligned MSE at {wins[leader]} of "
            f"{len(self.points())} SNR point(s)."
        )
