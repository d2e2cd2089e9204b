"""Closed-form ML / MAP state estimation and attacked-estimator statistics."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import UnobservableError
from .pmu import AttackScenario, MeasurementSet, PmuModel, gamma_matrix, rotate_pairs

log = logging.getLogger(__name__)

__all__ = [
    "GainMatrix",
    "EstimatorStats",
    "estimate_ml",
    "estimate_map",
    "attacked_stats",
    "bias_vector",
    "bias_gradient",
    "reduce_columns",
    "expand_state",
    "reduce_state",
]

COND_WARN = 1e12


class GainMatrix:
    """Cholesky-factored symmetric positive-definite normal matrix."""

    def __init__(self, g: np.ndarray, what: str = "gain matrix"):
        g = 0.5 * (g + g.T)
        try:
            self._cho = sla.cho_factor(g, lower=True)
        except np.linalg.LinAlgError:
            raise UnobservableError(f"{what} is not positive definite (system unobservable)") from None
        d = np.diag(self._cho[0]) ** 2
        # cheap lower bound on the condition number from the Cholesky pivots
        cond_est = d.max() / d.min()
        if cond_est > COND_WARN:
            cond = np.linalg.cond(g)
            if not np.isfinite(cond) or cond > 1e16:
                raise UnobservableError(f"{what} is numerically singular (cond {cond:.2e})")
            if cond > COND_WARN:
                warnings.warn(f"{what} is ill-conditioned (cond {cond:.2e})", RuntimeWarning, stacklevel=2)
        self.g = g

    @property
    def dim(self) -> int:
        return self.g.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._cho, rhs)

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))


@dataclass
class EstimatorStats:
    mean: np.ndarray
    covariance: np.ndarray
    bias: np.ndarray
    mse: float


def reduce_columns(h: np.ndarray, n_bus: int, ref: int) -> np.ndarray:
    """Drop the column multiplying the reference bus imaginary part."""
    return np.delete(h, n_bus + ref, axis=-1)


def reduce_state(v: np.ndarray, ref: int) -> np.ndarray:
    n = v.size // 2
    return np.delete(v, n + ref)


def expand_state(v_red: np.ndarray, ref: int) -> np.ndarray:
    n = (v_red.size + 1) // 2
    return np.insert(v_red, n + ref, 0.0)


def _zvec(z) -> dict:
    return z.z if isinstance(z, MeasurementSet) else z


def _rhs(model: PmuModel, z, ref=None) -> np.ndarray:
    z = _zvec(z)
    rhs = sum(b.h.T @ (b.sigma_inv @ z[b.bus]) for b in model.blocks)
    return rhs if ref is None else np.delete(rhs, model.n_bus + ref)


def estimate_ml(model: PmuModel, z, gain: GainMatrix | None = None) -> np.ndarray:
    """Weighted least-squares (ML) state estimate from PMU data."""
    gain = gain or GainMatrix(model.gain)
    return gain.solve(_rhs(model, z))


def estimate_map(
    model: PmuModel,
    z,
    prior_v: np.ndarray,
    prior_precision: np.ndarray,
    ref: int | None = None,
) -> np.ndarray:
    """MAP estimate with Gaussian prior ``N(prior_v, prior_precision^-1)``.

    With ``ref`` set, the state is reference-reduced: the prior lives in the
    ``2N-1`` dimensional space without the reference imaginary part, and the
    returned full-length vector carries a zero in that slot.
    """
    g = model.gain
    if ref is not None:
        g = np.delete(np.delete(g, model.n_bus + ref, 0), model.n_bus + ref, 1)
    gp = GainMatrix(g + prior_precision, "regularized gain")
    x = gp.solve(_rhs(model, z, ref) + prior_precision @ prior_v)
    return x if ref is None else expand_state(x, ref)


def _attacked_rhs(model: PmuModel, attack: AttackScenario, v: np.ndarray) -> np.ndarray:
    out = np.zeros(model.state_dim)
    for b in model.blocks:
        hv = b.h @ v
        if attack.b[b.index]:
            hv = rotate_pairs(hv, attack.delta_theta[b.index])
        out += b.h.T @ (b.sigma_inv @ hv)
    return out


def attacked_stats(model: PmuModel, attack: AttackScenario, v, gain: GainMatrix | None = None) -> EstimatorStats:
    """Mean, covariance, bias and MSE of the ML estimator fed spoofed data."""
    v = np.asarray(getattr(v, "v", v), dtype=float)
    gain = gain or GainMatrix(model.gain)
    g_inv = gain.inverse()
    rhs = np.zeros(model.state_dim)
    for b in model.blocks:
        gam = gamma_matrix(attack.delta_theta[b.index] if attack.b[b.index] else 0.0, b.n_lines)
        rhs += b.h.T @ b.sigma_inv @ gam @ b.h @ v
    mean = g_inv @ rhs
    bias = mean - v
    return EstimatorStats(mean, g_inv, bias, float(np.trace(g_inv) + bias @ bias))


def bias_vector(model: PmuModel, attack: AttackScenario, v, gain: GainMatrix | None = None) -> np.ndarray:
    """``B_ML(dtheta) v`` evaluated through one solve."""
    v = np.asarray(getattr(v, "v", v), dtype=float)
    gain = gain or GainMatrix(model.gain)
    return gain.solve(_attacked_rhs(model, attack, v)) - v


def bias_gradient(model: PmuModel, attack: AttackScenario, v, gain: GainMatrix | None = None) -> np.ndarray:
    """Gradient of ``||bias||^2`` with respect to each bus angle (zero off the attacked set)."""
    v = np.asarray(getattr(v, "v", v), dtype=float)
    gain = gain or GainMatrix(model.gain)
    bias = gain.solve(_attacked_rhs(model, attack, v)) - v
    w = gain.solve(bias)  # G^-1 bias, G symmetric
    grad = np.zeros(model.n_bus)
    for b in model.blocks:
        if not attack.b[b.index]:
            continue
        th = attack.delta_theta[b.index]
        hv = b.h @ v
        # d/dtheta of R(theta) x is R(theta + pi/2) x
        dz = rotate_pairs(hv, th + np.pi / 2)
        grad[b.index] = 2.0 * w @ (b.h.T @ (b.sigma_inv @ dz))
    return grad
