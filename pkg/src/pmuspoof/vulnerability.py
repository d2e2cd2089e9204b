"""Most-vulnerable PMU search: maximise the attack-induced ML bias.

The bias of the ML estimator under attack is linear in the unit vectors
``gamma_n = [cos dtheta_n, sin dtheta_n]``::

    bias = sum_n P_n (gamma_n - e1),   P_n = G^-1 H_n^T Sigma_n^-1 A_n(v)

so after precomputing one 2N x 2 matrix per PMU every objective and gradient
evaluation is a handful of small matrix-vector products.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .am import build_a_matrix
from .estimation import GainMatrix
from .pmu import PmuModel

log = logging.getLogger(__name__)

__all__ = [
    "BiasModel",
    "VulnerabilityResult",
    "maximize_bias_fixed_set",
    "find_vulnerable_optimal",
    "find_vulnerable_greedy",
    "grid_scan_1d",
]

ARMIJO = 1e-4
SHRINK = 0.5
PG_TOL = 1e-7
MAX_ITER = 500
INIT_LABELS = ("zero", "-max", "+max")


class BiasModel:
    """Precomputed per-PMU bias directions for a fixed model and state."""

    def __init__(self, model: PmuModel, v, gain: GainMatrix | None = None):
        v = np.asarray(getattr(v, "v", v), dtype=float)
        gain = gain or GainMatrix(model.gain)
        self.model = model
        self.v = v
        self.n_bus = model.n_bus
        self.bus_ids = model.bus_ids
        self.p = {}
        for b in model.blocks:
            a = build_a_matrix(b.h, v)
            self.p[b.index] = gain.solve(b.h.T @ (b.sigma_inv @ a))

    def bias(self, delta_theta: np.ndarray, indices=None) -> np.ndarray:
        """Bias for a full-length angle vector (only ``indices`` contribute)."""
        if indices is None:
            indices = [k for k in self.p if delta_theta[k] != 0]
        out = np.zeros(2 * self.n_bus)
        for k in indices:
            th = delta_theta[k]
            out += self.p[k] @ np.array([math.cos(th) - 1.0, math.sin(th)])
        return out

    def objective(self, delta_theta: np.ndarray) -> float:
        return float(np.linalg.norm(self.bias(delta_theta)))


def _as_bounds(bounds, n_bus: int) -> np.ndarray:
    b = np.asarray(bounds, dtype=float)
    return np.full(n_bus, float(b)) if b.ndim == 0 else b


def _ascend(bm: BiasModel, idx: list[int], lo, hi, x0, offset=None, max_iter=MAX_ITER):
    """Projected gradient ascent of ``||offset + sum_j P_j (gamma_j - e1)||``."""
    p = [bm.p[k] for k in idx]
    off = np.zeros(2 * bm.n_bus) if offset is None else offset

    def evaluate(x):
        r = off.copy()
        for pj, xj in zip(p, x):
            r += pj @ np.array([math.cos(xj) - 1.0, math.sin(xj)])
        nrm = float(np.linalg.norm(r))
        if nrm == 0.0:
            return 0.0, np.zeros_like(x)
        g = np.array([(r @ (pj @ np.array([-math.sin(xj), math.cos(xj)]))) / nrm for pj, xj in zip(p, x)])
        return nrm, g

    x = np.clip(np.asarray(x0, dtype=float), lo, hi)
    f, g = evaluate(x)
    for _ in range(max_iter):
        if np.linalg.norm(np.clip(x + g, lo, hi) - x) <= PG_TOL:
            break
        t = 1.0
        while True:
            x_new = np.clip(x + t * g, lo, hi)
            f_new, g_new = evaluate(x_new)
            if f_new >= f + ARMIJO * (g @ (x_new - x)):
                break
            t *= SHRINK
            if t < 1e-12:
                return x, f
        x, f, g = x_new, f_new, g_new
    return x, f


def grid_scan_1d(bm: BiasModel, k: int, bound: float, step_deg: float = 0.05, offset=None):
    """Exhaustive scan of one angle over ``[-bound, bound]`` (radians)."""
    n = int(round(2 * math.degrees(bound) / step_deg)) + 1
    th = np.linspace(-bound, bound, n)
    off = np.zeros(2 * bm.n_bus) if offset is None else offset
    vals = np.linalg.norm(off[:, None] + bm.p[k] @ np.vstack([np.cos(th) - 1.0, np.sin(th)]), axis=0)
    j = int(np.argmax(vals))
    return float(th[j]), float(vals[j])


def maximize_bias_fixed_set(
    model: PmuModel | BiasModel,
    v,
    b: np.ndarray,
    bounds,
    init: np.ndarray,
    offset: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Local maximiser of the bias norm over the box defined by ``b``.

    ``init`` and the returned angle vector are full length (radians); entries
    outside the attacked set are zero.
    """
    bm = model if isinstance(model, BiasModel) else BiasModel(model, v)
    b = np.asarray(b, dtype=int)
    dmax = _as_bounds(bounds, bm.n_bus) * b
    idx = [int(k) for k in np.flatnonzero(b)]
    missing = [bm.bus_ids[k] for k in idx if k not in bm.p]
    if missing:
        raise ValueError(f"attacked buses {missing} carry no PMU")
    out = np.zeros(bm.n_bus)
    if not idx:
        return out, float(np.linalg.norm(offset)) if offset is not None else 0.0
    x, f = _ascend(bm, idx, -dmax[idx], dmax[idx], np.asarray(init, dtype=float)[idx], offset)
    out[idx] = x
    return out, f


@dataclass
class VulnerabilityResult:
    attacked_buses: list[int]
    delta_theta_star: np.ndarray  # full length, radians
    objective: float
    log: list[dict] = field(default_factory=list)

    def objective_for(self, buses) -> float | None:
        key = tuple(sorted(buses))
        for rec in self.log:
            if tuple(sorted(rec["buses"])) == key:
                return rec["objective"]
        return None


def _best_of_inits(bm, idx, dmax, offset=None, grid_step=None):
    lo, hi = -dmax[idx], dmax[idx]
    if grid_step is not None and len(idx) == 1:
        th, _ = grid_scan_1d(bm, idx[0], hi[0], grid_step, offset)
        x, f = _ascend(bm, idx, lo, hi, np.array([th]), offset)
        return x, f, "grid"
    best = None
    for label, x0 in zip(INIT_LABELS, (np.zeros(len(idx)), lo, hi)):
        x, f = _ascend(bm, idx, lo, hi, x0, offset)
        if best is None or f > best[1]:
            best = (x, f, label)
    return best


def find_vulnerable_optimal(
    model: PmuModel,
    v,
    n_p: int,
    bounds,
    max_combinations: int = 10**6,
    bias_model: BiasModel | None = None,
) -> VulnerabilityResult:
    """Exhaustive search over every set of ``n_p`` PMU buses."""
    bm = bias_model or BiasModel(model, v)
    pmus = sorted(bm.p, key=lambda k: bm.bus_ids[k])
    if not 1 <= n_p <= len(pmus):
        raise ValueError(f"n_p must lie in [1, {len(pmus)}]")
    count = math.comb(len(pmus), n_p)
    if count > max_combinations:
        raise ValueError(f"{count} combinations exceed the cap of {max_combinations}")
    dmax = _as_bounds(bounds, bm.n_bus)
    records = []
    best = None
    for combo in itertools.combinations(pmus, n_p):
        idx = list(combo)
        x, f, label = _best_of_inits(bm, idx, dmax)
        buses = [bm.bus_ids[k] for k in idx]
        records.append({"buses": buses, "objective": f, "delta_theta": x.tolist(), "init": label})
        if best is None or f > best[1]:
            best = (idx, f, x)
    idx, f, x = best
    dt = np.zeros(bm.n_bus)
    dt[idx] = x
    return VulnerabilityResult([bm.bus_ids[k] for k in idx], dt, f, records)


def find_vulnerable_greedy(
    model: PmuModel,
    v,
    n_p: int,
    bounds,
    grid_step_deg: float | None = None,
    bias_model: BiasModel | None = None,
) -> VulnerabilityResult:
    """Greedy search: fix the buses and angles already chosen, add one at a time.

    ``grid_step_deg`` switches the one-dimensional subproblems to an exact grid
    scan (polished by local ascent).
    """
    bm = bias_model or BiasModel(model, v)
    pmus = sorted(bm.p, key=lambda k: bm.bus_ids[k])
    if n_p < 2:
        raise ValueError("greedy search needs n_p >= 2 (use the optimal search for one bus)")
    if n_p > len(pmus):
        raise ValueError(f"n_p={n_p} exceeds the {len(pmus)} PMU buses")
    dmax = _as_bounds(bounds, bm.n_bus)
    step = grid_step_deg

    first = find_vulnerable_optimal(model, v, 1, dmax, bias_model=bm)
    records = [{"stage": 1, **rec} for rec in first.log]
    chosen = [bm.bus_ids.index(first.attacked_buses[0])]
    dt = first.delta_theta_star.copy()
    objective = first.objective
    for stage in range(2, n_p + 1):
        offset = bm.bias(dt, chosen)
        best = None
        for k in pmus:
            if k in chosen:
                continue
            x, f, label = _best_of_inits(bm, [k], dmax, offset, step)
            records.append(
                {"stage": stage, "buses": [bm.bus_ids[j] for j in chosen + [k]], "objective": f,
                 "delta_theta": [float(dt[j]) for j in chosen] + [float(x[0])], "init": label}
            )
            if best is None or f > best[1]:
                best = (k, f, float(x[0]))
        k, objective, th = best
        chosen.append(k)
        dt[k] = th
    return VulnerabilityResult([bm.bus_ids[k] for k in chosen], dt, objective, records)
