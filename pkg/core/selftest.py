"""
selftest.py
-----------
Fast sanity battery behind `cli_app.py selftest`. Each check builds a tiny
problem with a known answer and reports PASS/FAIL with the observed value.
"""

import logging
from dataclasses import dataclass

import numpy as np

from core.baselines import ls_estimate, make_orthogonal_pilots, mmse_estimate, send_pilots
from core.channel_sim import draw_channel, make_constellation
from core.detection import mld_detect_block
from core.errors import BlindMimoError
from core.math_core import GaussianPosterior, make_rng
from core.vi_estimator import H_PRIOR_VAR, elbo_gradcheck, loss1, loss2

logger = logging.getLogger(__name__)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _kl_at_prior(rng) -> tuple:
    rho2 = 1.7
    l1 = loss1(GaussianPosterior(np.zeros(8), np.full(8, rho2)), rho2)
    l2 = loss2(GaussianPosterior(np.zeros(32), np.full(32, H_PRIOR_VAR)))
    worst = max(abs(float(l1)), abs(float(l2)))
    return worst <= 1e-12, f"max |KL| = {worst:.2e}"


def _kl_closed_form(rng) -> tuple:
    value = float(loss1(GaussianPosterior(np.array([1.0, 0.0]), np.array([1.0, 1.0])), 1.0))
    return abs(value - 0.5) <= 1e-12, f"loss1 = {value:.12g} (expected 0.5)"


def _gradient(rng) -> tuple:
    err = elbo_gradcheck(2, 2, rng)
    return err < 1e-4, f"max relative error {err:.2e}"


def _ls_noiseless(rng) -> tuple:
    H = draw_channel(4, 4, rng).H
    pilots = make_orthogonal_pilots(4, 8)
    H_ls = ls_estimate(send_pilots(H, pilots, 0.0, rng), pilots)
    err = float(np.max(np.abs(H_ls - H)))
    return err <= 1e-10, f"max |H_ls - H| = {err:.2e}"


def _mmse_equals_ls(rng) -> tuple:
    H = draw_channel(4, 4, rng).H
    pilots = make_orthogonal_pilots(4, 6)
    Y = send_pilots(H, pilots, 0.0, rng)
    err = float(np.max(np.abs(mmse_estimate(Y, pilots, 0.0) - ls_estimate(Y, pilots))))
    return err <= 1e-12, f"max |MMSE - LS| = {err:.2e}"


def _mld_noiseless(rng) -> tuple:
    c = make_constellation("qpsk")
    H = draw_channel(4, 4, rng).H
    indices = rng.integers(0, c.size, size=(4, 20))
    decided = mld_detect_block(H @ c.points[indices], H, c)
    wrong = int(np.sum(decided != indices))
    return wrong == 0, f"{wrong} wrong decisions out of {indices.size}"


def _constellation_energy(rng) -> tuple:
    energies = {
        name: float(np.mean(np.abs(make_constellation(name).points) ** 2))
        for name in ("qpsk", "qam16")
    }
    ok = all(abs(e - 1.0) <= 1e-12 for e in energies.values())
    return ok, ", ".join(f"{k} {v:.12g}" for k, v in energies.items())


CHECKS = [
    ("KL is zero at the prior", _kl_at_prior),
    ("loss1 closed form", _kl_closed_form),
    ("ELBO gradient vs finite differences", _gradient),
    ("LS recovers H without noise", _ls_noiseless),
    ("MMSE equals LS without noise", _mmse_equals_ls),
    ("MLD recovers symbols without noise", _mld_noiseless),
    ("unit average symbol energy", _constellation_energy),
]


def run_selftest(seed: int = 0) -> list:
    results = []
    for i, (name, check) in enumerate(CHECKS):
        try:
            passed, detail = check(make_rng(seed, i))
        except BlindMimoError as exc:
            passed, detail = False, f"raised {type(exc).__name__}: {exc}"
        logger.debug("%s: %s (%s)", name, "PASS" if passed else "FAIL", detail)
        results.append(CheckResult(name, bool(passed), detail))
    return results
