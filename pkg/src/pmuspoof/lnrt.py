"""Largest normalized residual test (LNRT) on stacked PMU measurements.

Classical bad-data processing: fit by weighted least squares, normalise each
residual by the square root of its variance ``Omega_ii`` (``Omega = S Sigma``
with ``S = I - H G^-1 H^T Sigma^-1``), drop the single worst channel above the
threshold, refit and repeat. Critical channels, whose removal would leave the
state undetermined, are never dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import UnobservableError
from .estimation import GainMatrix
from .pmu import MeasurementSet, PmuModel

log = logging.getLogger(__name__)

__all__ = ["ResidualAnalysis", "LnrtReport", "stack_measurements", "normalized_residuals", "run_lnrt"]

OMEGA_FLOOR = 1e-14
# Omega_ii / Sigma_ii is the determinant ratio of the gain after removing
# channel i, so it is zero exactly for critical channels. Round-off leaves
# values near 1e-16 there, and channels that only weak line-charging couplings
# keep from being critical land near 1e-8; redundant channels on the bundled
# systems stay above 1e-2.
CRITICAL_TOL = 1e-6


def stack_measurements(model: PmuModel, z) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Stacked measurement vector and (bus, channel index) labels, in block order."""
    z = z.z if isinstance(z, MeasurementSet) else z
    labels = [(b.bus, i) for b in model.blocks for i in range(b.m)]
    return np.concatenate([np.asarray(z[b.bus], dtype=float) for b in model.blocks]), labels


@dataclass
class ResidualAnalysis:
    v_hat: np.ndarray
    residual: np.ndarray
    omega_diag: np.ndarray
    normalized: np.ndarray
    critical: np.ndarray  # boolean, Omega_ii ~ 0


def _analyse(h, var, z, gain=None) -> ResidualAnalysis:
    """WLS fit with uncorrelated noise of variances ``var``."""
    gain = gain or GainMatrix(h.T @ (h / var[:, None]))
    v_hat = gain.solve(h.T @ (z / var))
    r = z - h @ v_hat
    # Omega = S Sigma = Sigma - H G^-1 H^T
    omega = var - np.einsum("ij,ji->i", h, gain.solve(h.T))
    critical = omega <= CRITICAL_TOL * var
    rn = r / np.sqrt(np.maximum(omega, OMEGA_FLOOR))
    rn[critical] = 0.0
    return ResidualAnalysis(v_hat, r, omega, rn, critical)


def normalized_residuals(model: PmuModel, z) -> ResidualAnalysis:
    """One-shot WLS fit and normalized residuals of the full stacked system."""
    zs, _ = stack_measurements(model, z)
    h, sigma = model.stacked()
    _check_diagonal(sigma)
    return _analyse(h, np.diag(sigma).copy(), zs)


def _check_diagonal(sigma):
    if np.count_nonzero(sigma - np.diag(np.diag(sigma))):
        raise ValueError("LNRT assumes uncorrelated (diagonal) measurement noise")


@dataclass
class LnrtReport:
    v_hat: np.ndarray
    removed_channels: list[tuple[int, int, float]] = field(default_factory=list)
    rounds: int = 0
    final_max_normalized_residual: float = 0.0
    protected: list[tuple[int, int]] = field(default_factory=list)


def _keeps_observable(h, sigma_inv_diag, keep) -> GainMatrix | None:
    hk = h[keep]
    try:
        return GainMatrix(hk.T @ (sigma_inv_diag[keep, None] * hk), "reduced gain")
    except UnobservableError:
        return None


def run_lnrt(model: PmuModel, z, threshold: float = 3.0, max_rounds: int | None = None) -> LnrtReport:
    """Iterative single-channel removal until no removable residual exceeds ``threshold``."""
    zs, labels = stack_measurements(model, z)
    h, sigma = model.stacked()
    _check_diagonal(sigma)
    s_inv = 1.0 / np.diag(sigma)
    keep = np.arange(zs.size)
    gain = GainMatrix(h.T @ (s_inv[:, None] * h), "gain matrix")
    max_rounds = zs.size if max_rounds is None else max_rounds
    report = LnrtReport(v_hat=np.zeros(model.state_dim))
    protected = set()
    while True:
        res = _analyse(h[keep], 1.0 / s_inv[keep], zs[keep], gain)
        report.v_hat = res.v_hat
        mag = np.abs(res.normalized)
        order = [i for i in np.argsort(-mag, kind="stable") if mag[i] > threshold]
        removed = False
        if report.rounds < max_rounds:
            for i in order:
                if res.critical[i]:
                    protected.add(labels[keep[i]])
                    continue
                trial = np.delete(keep, i)
                g = _keeps_observable(h, s_inv, trial)
                if g is None:
                    protected.add(labels[keep[i]])
                    continue
                bus, ch = labels[keep[i]]
                report.removed_channels.append((bus, ch, float(res.normalized[i])))
                log.debug("LNRT round %d removes bus %d channel %d (r_N=%.3g)", report.rounds + 1, bus, ch, res.normalized[i])
                keep, gain = trial, g
                report.rounds += 1
                removed = True
                break
        if not removed:
            report.final_max_normalized_residual = float(mag.max()) if mag.size else 0.0
            report.protected = sorted(protected)
            return report
