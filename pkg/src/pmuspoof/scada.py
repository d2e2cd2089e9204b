"""SCADA-only nonlinear state estimation, used as a prior for hybrid AM.

Measurements are bus voltage magnitudes and active/reactive branch flows at
both ends. The state is rectangular and reference-reduced: the imaginary part
of the reference bus is held at zero and dropped, which fixes the phase that
magnitude and power data cannot see.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ConvergenceError, UnobservableError
from .estimation import GainMatrix, expand_state, reduce_state
from .netcase import AdmittanceModel, NetworkCase

log = logging.getLogger(__name__)

__all__ = [
    "KINDS",
    "ScadaMeasurement",
    "ScadaMeasurementSet",
    "ScadaPrior",
    "h_and_jacobian",
    "estimate_scada",
    "select_channels",
    "simulate_scada",
]

KINDS = ("v_mag", "p_flow_from", "q_flow_from", "p_flow_to", "q_flow_to")
DEFAULT_SIGMA = {"v_mag": 0.01, "p_flow_from": 0.02, "q_flow_from": 0.02, "p_flow_to": 0.02, "q_flow_to": 0.02}


@dataclass(frozen=True)
class ScadaMeasurement:
    """One SCADA channel.

    ``location`` is a bus id for ``v_mag`` and a 0-based in-service branch
    position (row of the admittance model) for the flow kinds.
    """

    kind: str
    location: int
    value: float
    sigma: float


@dataclass
class ScadaMeasurementSet:
    entries: list[ScadaMeasurement] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    @property
    def values(self) -> np.ndarray:
        return np.array([e.value for e in self.entries], dtype=float)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([e.sigma for e in self.entries], dtype=float)

    def validate(self, case: NetworkCase, adm: AdmittanceModel) -> None:
        for e in self.entries:
            if e.kind not in KINDS:
                raise ConfigError(f"unknown SCADA measurement kind {e.kind!r}")
            if not e.sigma > 0:
                raise ConfigError(f"SCADA sigma must be positive ({e.kind} at {e.location})")
            if e.kind == "v_mag":
                if e.location not in case.bus_index:
                    raise ConfigError(f"v_mag at unknown bus {e.location}")
            elif not 0 <= e.location < adm.n_branch:
                raise ConfigError(f"{e.kind} at unknown branch position {e.location}")

    def with_values(self, values) -> "ScadaMeasurementSet":
        return ScadaMeasurementSet(
            [ScadaMeasurement(e.kind, e.location, float(x), e.sigma) for e, x in zip(self.entries, values)]
        )

    def to_json(self) -> str:
        return json.dumps({"entries": [asdict(e) for e in self.entries]}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScadaMeasurementSet":
        try:
            doc = json.loads(text)
            entries = [
                ScadaMeasurement(str(e["kind"]), int(e["location"]), float(e["value"]), float(e["sigma"]))
                for e in doc["entries"]
            ]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed SCADA measurement document: {exc}") from None
        return cls(entries)


@dataclass
class ScadaPrior:
    v_s_hat: np.ndarray  # reference-reduced, length 2N-1
    sigma_s: np.ndarray
    precision: np.ndarray  # J^T Sigma_e^-1 J at v_s_hat
    converged: bool
    final_mismatch: float
    iterations: int
    ref: int

    @property
    def v_full(self) -> np.ndarray:
        return expand_state(self.v_s_hat, self.ref)


def _split(entries, case):
    idx = case.bus_index
    out = {k: ([], []) for k in KINDS}  # (row positions, locations)
    for row, e in enumerate(entries):
        loc = idx[e.location] if e.kind == "v_mag" else e.location
        out[e.kind][0].append(row)
        out[e.kind][1].append(loc)
    return out


def h_and_jacobian(case: NetworkCase, adm: AdmittanceModel, v_red: np.ndarray, meas, ref: int | None = None):
    """Measurement function and its analytic Jacobian in the reduced state.

    ``meas`` is a :class:`ScadaMeasurementSet` or a plain list of entries.
    """
    entries = meas.entries if isinstance(meas, ScadaMeasurementSet) else list(meas)
    ref = case.slack_index if ref is None else ref
    nb = case.n_bus
    v = expand_state(np.asarray(v_red, dtype=float), ref)
    if not np.all(np.isfinite(v)):
        raise ValueError("state has non-finite entries")
    vc = v[:nb] + 1j * v[nb:]
    m = len(entries)
    h = np.zeros(m)
    jac = np.zeros((m, 2 * nb))
    groups = _split(entries, case)

    rows, buses = groups["v_mag"]
    if rows:
        b = np.array(buses)
        mag = np.abs(vc[b])
        if np.any(mag == 0):
            raise ValueError("voltage magnitude is zero; v_mag is not differentiable there")
        h[rows] = mag
        jac[rows, b] = v[b] / mag
        jac[rows, nb + b] = v[nb + b] / mag

    for end, y_rows, ends in (("from", adm.y_from, adm.f_idx), ("to", adm.y_to, adm.t_idx)):
        rp, lp = groups[f"p_flow_{end}"]
        rq, lq = groups[f"q_flow_{end}"]
        lines = sorted(set(lp) | set(lq))
        if not lines:
            continue
        lines_a = np.array(lines)
        y = y_rows[lines_a]
        k = ends[lines_a]
        cur = y @ vc
        s = vc[k] * np.conj(cur)
        sel = np.zeros((len(lines), nb))
        sel[np.arange(len(lines)), k] = 1.0
        # S = V_k conj(I); dS/de = conj(I) e_k + V_k conj(Y); dS/df = j conj(I) e_k - j V_k conj(Y)
        ds_de = np.conj(cur)[:, None] * sel + vc[k][:, None] * np.conj(y)
        ds_df = 1j * (np.conj(cur)[:, None] * sel - vc[k][:, None] * np.conj(y))
        pos = {l: i for i, l in enumerate(lines)}
        for rws, locs, part in ((rp, lp, np.real), (rq, lq, np.imag)):
            if not rws:
                continue
            ii = [pos[l] for l in locs]
            h[rws] = part(s[ii])
            jac[rws, :nb] = part(ds_de[ii])
            jac[rws, nb:] = part(ds_df[ii])
    return h, np.delete(jac, nb + ref, axis=1)


def simulate_scada(
    case: NetworkCase,
    adm: AdmittanceModel,
    v,
    template: ScadaMeasurementSet,
    seed=None,
    noise_scale: float = 1.0,
    ref: int | None = None,
) -> ScadaMeasurementSet:
    """Fill a channel template with ``h(v) + w``; ``v`` is full length with zero reference angle."""
    ref = case.slack_index if ref is None else ref
    v = np.asarray(getattr(v, "v", v), dtype=float)
    if abs(v[case.n_bus + ref]) > 1e-9 * max(1.0, abs(v[ref])):
        raise ValueError("state must have a zero reference-bus imaginary part")
    h, _ = h_and_jacobian(case, adm, reduce_state(v, ref), template, ref)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = rng.standard_normal(len(template)) * template.sigmas
    return template.with_values(h + noise_scale * w)


def estimate_scada(
    case: NetworkCase,
    adm: AdmittanceModel,
    meas: ScadaMeasurementSet,
    tol: float = 1e-8,
    max_iter: int = 50,
    ref: int | None = None,
) -> ScadaPrior:
    """Gauss-Newton weighted least squares from a flat start."""
    ref = case.slack_index if ref is None else ref
    meas.validate(case, adm)
    nb = case.n_bus
    n_state = 2 * nb - 1
    if len(meas) < n_state:
        raise UnobservableError(f"{len(meas)} SCADA measurements cannot determine {n_state} states")
    z = meas.values
    w = 1.0 / meas.sigmas**2
    x = np.concatenate([np.ones(nb), np.zeros(nb - 1)])
    growing = 0
    prev = math.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        h, j = h_and_jacobian(case, adm, x, meas, ref)
        r = z - h
        mismatch = float(r @ (w * r))
        growing = growing + 1 if mismatch > prev else 0
        if growing >= 5:
            raise ConvergenceError("SCADA Gauss-Newton diverged", mismatch=mismatch, iterations=it)
        prev = mismatch
        dx = _gn_step(j, r, w)
        x = x + dx
        if np.max(np.abs(dx)) <= tol:
            converged = True
            break
    if not converged:
        log.warning("SCADA Gauss-Newton stopped after %d iterations without converging", it)
    h, j = h_and_jacobian(case, adm, x, meas, ref)
    r = z - h
    prec = j.T @ (w[:, None] * j)
    prec = 0.5 * (prec + prec.T)
    sigma_s = GainMatrix(prec, "SCADA gain").inverse()
    return ScadaPrior(x, 0.5 * (sigma_s + sigma_s.T), prec, converged, float(r @ (w * r)), it, ref)


def _gn_step(j, r, w):
    try:
        return GainMatrix(j.T @ (w[:, None] * j), "SCADA gain").solve(j.T @ (w * r))
    except UnobservableError:
        # the rectangular Jacobian can lose rank at the exact flat start
        # (d|V|/dV_i vanishes there); take the minimum-norm step instead
        sw = np.sqrt(w)
        return np.linalg.lstsq(sw[:, None] * j, sw * r, rcond=None)[0]


def select_channels(
    case: NetworkCase,
    adm: AdmittanceModel,
    fraction: float,
    seed=None,
    sigma_vmag: float = 0.01,
    sigma_flow: float = 0.02,
    check: bool = True,
) -> ScadaMeasurementSet:
    """Seeded sample of ``ceil(fraction * count)`` channels from every kind.

    Values are left as NaN; fill them with :func:`simulate_scada`.
    """
    if not 0 < fraction <= 1:
        raise ConfigError("SCADA fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    pools = {"v_mag": list(case.bus_ids)}
    for k in KINDS[1:]:
        pools[k] = list(range(adm.n_branch))
    entries = []
    for kind in KINDS:
        pool = pools[kind]
        count = math.ceil(fraction * len(pool))
        pick = sorted(rng.choice(len(pool), size=count, replace=False).tolist())
        sigma = sigma_vmag if kind == "v_mag" else sigma_flow
        entries += [ScadaMeasurement(kind, int(pool[i]), math.nan, sigma) for i in pick]
    out = ScadaMeasurementSet(entries)
    if check:
        _check_observable(case, adm, out)
    return out


def _check_observable(case, adm, meas):
    nb = case.n_bus
    n_state = 2 * nb - 1
    if len(meas) < n_state:
        raise UnobservableError(f"SCADA selection has {len(meas)} channels for {n_state} states; reseed or raise the fraction")
    # probe the Jacobian at a generic near-flat point so structural rank shows up
    probe = np.random.default_rng(0)
    x = np.concatenate([1.0 + 0.05 * probe.standard_normal(nb), 0.1 * probe.standard_normal(nb - 1)])
    _, j = h_and_jacobian(case, adm, x, meas)
    if np.linalg.matrix_rank(j) < n_state:
        raise UnobservableError("SCADA selection is unobservable; reseed or raise the fraction")
