"""Joint state estimation and spoofing-angle reconstruction.

Alternating minimisation of the bilinear weighted least-squares fit

    sum_n (z_n - Gamma(gamma_n) H_n v)^T Sigma_n^-1 (z_n - Gamma(gamma_n) H_n v)
        [+ (v - v_s)^T P_s (v - v_s)]          (hybrid PMU + SCADA form)

over the state ``v`` and unit vectors ``gamma_n = [cos, sin]`` of the per-PMU
angles. The state step is linear least squares; the gamma step is a
unit-norm constrained 2-D least squares solved through its Lagrange
multiplier (a quartic secular equation), or in closed form when every
Sigma_n is diagonal with equal variances inside each (real, imag) pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateMeasurementError, InternalError
from .estimation import GainMatrix, expand_state
from .pmu import MeasurementSet, PmuModel, rotate_pairs

log = logging.getLogger(__name__)

__all__ = [
    "GammaUpdate",
    "AmConfig",
    "AmResult",
    "build_a_matrix",
    "update_state",
    "update_gamma_general",
    "update_gamma_diagonal",
    "block_cost",
    "am_objective",
    "run_am",
    "run_am_hybrid",
]

MONOTONE_SLACK = 1e-10
_E1 = np.array([1.0, 0.0])


def build_a_matrix(h: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``A`` such that ``Gamma(gamma) H v = A gamma`` for interleaved rows."""
    hv = h @ v
    a = np.empty((hv.size, 2))
    a[0::2, 0] = hv[0::2]
    a[0::2, 1] = -hv[1::2]
    a[1::2, 0] = hv[1::2]
    a[1::2, 1] = hv[0::2]
    return a


@dataclass
class GammaUpdate:
    gamma: np.ndarray
    lam: float | None = None
    cost: float | None = None


def block_cost(z: np.ndarray, a: np.ndarray, sigma_inv: np.ndarray, gamma: np.ndarray) -> float:
    r = z - a @ gamma
    return float(r @ sigma_inv @ r)


def _quartic_roots(xi: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Roots of (xi1+l)^2 (xi2+l)^2 - u1^2 (xi2+l)^2 - u2^2 (xi1+l)^2 = 0."""
    p1 = np.polynomial.Polynomial([xi[0], 1.0]) ** 2
    p2 = np.polynomial.Polynomial([xi[1], 1.0]) ** 2
    poly = p1 * p2 - u[0] ** 2 * p2 - u[1] ** 2 * p1
    c = poly.coef / poly.coef[-1]  # monic, ascending
    comp = np.zeros((4, 4))
    comp[1:, :3] = np.eye(3)
    comp[:, 3] = -c[:4]
    return np.linalg.eigvals(comp)


def _secular(lam, xi, u):
    return u[0] ** 2 / (xi[0] + lam) ** 2 + u[1] ** 2 / (xi[1] + lam) ** 2 - 1.0


def _polish(lam, xi, u, steps=3):
    for _ in range(steps):
        d1, d2 = xi[0] + lam, xi[1] + lam
        if d1 == 0 or d2 == 0:
            break
        f = u[0] ** 2 / d1**2 + u[1] ** 2 / d2**2 - 1.0
        df = -2 * u[0] ** 2 / d1**3 - 2 * u[1] ** 2 / d2**3
        if df == 0 or not np.isfinite(df):
            break
        lam = lam - f / df
    return lam


def update_gamma_general(z: np.ndarray, a: np.ndarray, sigma_inv: np.ndarray) -> GammaUpdate:
    """Minimise ``(z - A g)^T Sigma^-1 (z - A g)`` subject to ``|g| = 1``."""
    k = a.T @ sigma_inv @ a
    y = a.T @ (sigma_inv @ z)
    xi, q = np.linalg.eigh(0.5 * (k + k.T))
    xi = np.maximum(xi, 0.0)
    u = q.T @ y
    scale = max(xi.max(), np.abs(u).max())
    if scale == 0 or np.linalg.norm(u) <= 1e-14 * scale:
        raise DegenerateMeasurementError("A^T Sigma^-1 z vanishes; gamma is undetermined")
    # the secular equation is invariant under joint scaling of (xi, u, lambda)
    xs, us = xi / scale, u / scale
    roots = _quartic_roots(xs, us)
    cands = [r.real for r in roots if abs(r.imag) <= 1e-8 * (1 + abs(r.real))]
    if not cands:
        lo = -xs.min()
        hi = lo + np.linalg.norm(us) + 1.0
        cands = [brentq(_secular, lo + 1e-15 * max(1.0, abs(lo)) + 1e-300, hi, args=(xs, us), xtol=1e-15)]
        log.debug("quartic filter found no real root; bracketed lambda=%g", cands[0])
    best = None
    zsz = float(z @ sigma_inv @ z)
    for lam in cands:
        lam = _polish(lam, xs, us)
        den = xs + lam
        if np.any(np.abs(den) <= 1e-12):
            continue
        g = q @ (us / den)
        nrm = np.linalg.norm(g)
        if not np.isfinite(nrm) or nrm == 0:
            continue
        g = g / nrm
        cost = zsz - 2 * y @ g + g @ k @ g
        if best is None or cost < best.cost:
            best = GammaUpdate(g, lam * scale, float(cost))
    if best is None:
        raise InternalError(f"no admissible multiplier (xi={xi}, u={u})")
    return best


def update_gamma_diagonal(z: np.ndarray, a: np.ndarray, sigma_inv: np.ndarray) -> GammaUpdate:
    """Closed form for paired-equal diagonal covariances: normalised A^T Sigma^-1 z."""
    y = a.T @ (sigma_inv @ z)
    nrm = np.linalg.norm(y)
    if nrm == 0 or not np.isfinite(nrm):
        raise DegenerateMeasurementError("A^T Sigma^-1 z vanishes; gamma is undetermined")
    return GammaUpdate(y / nrm)


def _zdict(z):
    return z.z if isinstance(z, MeasurementSet) else z


def update_state(model: PmuModel, z, gammas: dict[int, np.ndarray], gain: GainMatrix | None = None) -> np.ndarray:
    """Exact minimiser in ``v`` for fixed gammas (keyed by bus id)."""
    z = _zdict(z)
    rhs = np.zeros(model.state_dim)
    for b in model.blocks:
        g = gammas.get(b.bus, _E1)
        # (Gamma H)^T Sigma^-1 z = H^T Gamma^T Sigma^-1 z ; Gamma^T = Gamma(-angle)
        rhs += b.h.T @ rotate_pairs(b.sigma_inv @ z[b.bus], [g[0], -g[1]])
    if gain is None:
        gain = GainMatrix(_gain_am(model, gammas), "G_AM")
    return gain.solve(rhs)


def _gain_am(model: PmuModel, gammas) -> np.ndarray:
    g = np.zeros((model.state_dim, model.state_dim))
    for b in model.blocks:
        gam = gammas.get(b.bus, _E1)
        gh = np.vstack([rotate_pairs(col, gam) for col in b.h.T]).T
        g += gh.T @ b.sigma_inv @ gh
    return g


def am_objective(model: PmuModel, z, v: np.ndarray, gammas) -> float:
    z = _zdict(z)
    total = 0.0
    for b in model.blocks:
        r = z[b.bus] - rotate_pairs(b.h @ v, gammas.get(b.bus, _E1))
        total += r @ b.sigma_inv @ r
    return float(total)


@dataclass
class AmConfig:
    tolerance: float = 0.01
    max_iter: int = 200
    covariance_mode: str = "auto"  # auto | diagonal | general
    attacked_threshold_deg: float = 3.0


@dataclass
class AmResult:
    v_hat: np.ndarray
    delta_theta_hat: np.ndarray  # per bus index, radians; zero where no PMU
    gammas: dict[int, np.ndarray]
    objective_trace: list[float]
    iterations: int
    converged: bool
    pmu_buses: list[int] = field(default_factory=list)

    def angles_deg(self, bus_ids) -> dict[int, float]:
        pos = {b: k for k, b in enumerate(bus_ids)}
        return {b: float(np.degrees(self.delta_theta_hat[pos[b]])) for b in self.pmu_buses}

    def flagged(self, bus_ids, threshold_deg: float = 3.0) -> list[int]:
        return [b for b, d in self.angles_deg(bus_ids).items() if abs(d) > threshold_deg]


def _wrap(theta: float) -> float:
    return np.pi if theta <= -np.pi else theta


def _choose_update(model: PmuModel, mode: str):
    if mode not in ("auto", "diagonal", "general"):
        raise ValueError(f"unknown covariance_mode {mode!r}")
    if mode == "auto":
        mode = "diagonal" if all(b.is_paired_diagonal for b in model.blocks) else "general"
    if mode == "diagonal" and not all(b.is_paired_diagonal for b in model.blocks):
        raise ValueError("diagonal gamma update requires paired-equal diagonal covariances")
    return mode, (update_gamma_diagonal if mode == "diagonal" else update_gamma_general)


def _run(model, z, config: AmConfig, ref=None, prior=None):
    """Shared alternating loop; ``prior`` is (v_s, P_s) or None.

    With ``ref`` set, the imaginary part of that bus is pinned to zero, which
    removes the common-rotation ambiguity of PMU-only data.
    """
    z = _zdict(z)
    mode, upd = _choose_update(model, config.covariance_mode)
    nb = model.n_bus
    gammas = {b.bus: _E1.copy() for b in model.blocks}

    if prior is not None:
        v_s, p_s = prior
        v_s = np.asarray(v_s, dtype=float)
        p_s = np.asarray(p_s, dtype=float)

    def solve_v(fixed_gain):
        rhs = np.zeros(model.state_dim)
        for b in model.blocks:
            g = gammas[b.bus]
            rhs += b.h.T @ rotate_pairs(b.sigma_inv @ z[b.bus], [g[0], -g[1]])
        if ref is not None:
            rhs = np.delete(rhs, nb + ref)
        if prior is not None:
            rhs = rhs + p_s @ v_s
        gain = fixed_gain or _factor(gammas)
        x = gain.solve(rhs)
        return x if ref is None else expand_state(x, ref)

    def _factor(gm):
        g = _gain_am(model, gm)
        if ref is not None:
            g = np.delete(np.delete(g, nb + ref, 0), nb + ref, 1)
        if prior is not None:
            g = g + p_s
        return GainMatrix(g, "G_AM")

    def objective(v):
        f = am_objective(model, z, v, gammas)
        if prior is not None:
            d = (v if ref is None else np.delete(v, nb + ref)) - v_s
            f += float(d @ p_s @ d)
        return f

    # rotations cancel inside the quadratic form for paired-diagonal covariances
    fixed = _factor(gammas) if mode == "diagonal" else None
    v = solve_v(fixed)
    prev = objective(v)
    trace = [prev]
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        for b in model.blocks:
            a = build_a_matrix(b.h, v)
            gammas[b.bus] = upd(z[b.bus], a, b.sigma_inv).gamma
        mid = objective(v)
        if mid > prev + MONOTONE_SLACK * max(1.0, abs(prev)):
            raise InternalError(f"gamma sweep increased the objective ({prev!r} -> {mid!r})")
        v = solve_v(fixed)
        cur = objective(v)
        if cur > mid + MONOTONE_SLACK * max(1.0, abs(mid)):
            raise InternalError(f"state update increased the objective ({mid!r} -> {cur!r})")
        trace.append(cur)
        if abs(cur - prev) <= config.tolerance * abs(cur):
            converged = True
            break
        prev = cur
    dtheta = np.zeros(nb)
    for b in model.blocks:
        g = gammas[b.bus]
        dtheta[b.index] = _wrap(float(np.arctan2(g[1], g[0])))
    return AmResult(v, dtheta, gammas, trace, it, converged, model.pmu_buses)


def run_am(model: PmuModel, z, config: AmConfig | None = None, ref: int | None = None, **kw) -> AmResult:
    """PMU-only alternating minimisation, started from gamma_n = [1, 0].

    Rotating the whole state by some angle and every gamma by its negative
    leaves the fit unchanged, so without ``ref`` the returned state is only
    defined up to a common rotation. Passing the reference bus index fixes the
    phase by holding that bus's imaginary part at zero.
    """
    config = config or AmConfig(**kw)
    return _run(model, z, config, ref=ref)


def run_am_hybrid(
    model: PmuModel,
    z,
    prior_v: np.ndarray,
    prior_precision: np.ndarray,
    config: AmConfig | None = None,
    ref: int | None = None,
    **kw,
) -> AmResult:
    """Alternating minimisation with a Gaussian state prior (e.g. from SCADA).

    With ``ref`` (reference bus index) the prior and the state update live in
    the reference-reduced space; ``v_hat`` is returned full length.
    """
    config = config or AmConfig(**kw)
    return _run(model, z, config, ref=ref, prior=(prior_v, prior_precision))
