"""PMU measurement model, spoofing rotations and measurement simulation.

Every PMU block stores its rows as interleaved (real, imag) pairs: first the
bus voltage, then the current entering each incident in-service branch at
this bus, in branch order. The spoofing operator of a block is therefore a
block-diagonal stack of identical 2x2 rotations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CaseFormatError, UnobservableError
from .netcase import AdmittanceModel, NetworkCase

__all__ = [
    "PmuPlacement",
    "PmuBlock",
    "PmuModel",
    "AttackScenario",
    "MeasurementSet",
    "parse_placement",
    "build_pmu_model",
    "gamma_matrix",
    "rotate_pairs",
    "real_expansion",
    "simulate_measurements",
]


@dataclass(frozen=True)
class PmuPlacement:
    """Binary PMU-location vector ``a`` over bus indices."""

    a: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=int)
        if not np.isin(a, (0, 1)).all():
            raise ValueError("placement entries must be 0 or 1")
        object.__setattr__(self, "a", a)

    @classmethod
    def from_buses(cls, case: NetworkCase, bus_ids) -> "PmuPlacement":
        idx = case.bus_index
        a = np.zeros(case.n_bus, dtype=int)
        for b in bus_ids:
            if b not in idx:
                raise CaseFormatError(f"placement references unknown bus {b}")
            a[idx[b]] = 1
        return cls(a)

    @property
    def indices(self) -> list[int]:
        return [int(k) for k in np.flatnonzero(self.a)]

    def with_buses(self, case: NetworkCase, add=(), remove=()) -> "PmuPlacement":
        a = self.a.copy()
        idx = case.bus_index
        for b in add:
            a[idx[b]] = 1
        for b in remove:
            a[idx[b]] = 0
        return PmuPlacement(a)


def parse_placement(text: str) -> list[int]:
    """Bus ids, one per line; blank lines and ``#`` comments are ignored."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise CaseFormatError(f"bad bus id {line!r}", lineno) from None
    if len(set(out)) != len(out):
        raise CaseFormatError("duplicate bus id in placement")
    return out


def real_expansion(c: np.ndarray) -> np.ndarray:
    """2 x 2N real pair acting on ``[v_r; v_i]`` for a complex row ``c``."""
    return np.block([[c.real, -c.imag], [c.imag, c.real]])


def gamma_matrix(delta_theta: float, n_lines: int) -> np.ndarray:
    """Block-diagonal rotation with ``1 + n_lines`` copies of R(delta_theta)."""
    c, s = np.cos(delta_theta), np.sin(delta_theta)
    return np.kron(np.eye(1 + n_lines), np.array([[c, -s], [s, c]]))


def rotate_pairs(x: np.ndarray, gamma) -> np.ndarray:
    """Apply Gamma(gamma) to an interleaved vector without forming the matrix.

    ``gamma`` is either an angle or a ``[cos, sin]`` pair.
    """
    g = np.atleast_1d(np.asarray(gamma, dtype=float))
    c, s = (np.cos(g[0]), np.sin(g[0])) if g.size == 1 else (g[0], g[1])
    re, im = x[0::2], x[1::2]
    out = np.empty_like(x, dtype=float)
    out[0::2] = c * re - s * im
    out[1::2] = s * re + c * im
    return out


@dataclass(eq=False)
class PmuBlock:
    bus: int  # bus id
    index: int  # bus position in the case
    h: np.ndarray
    sigma: np.ndarray
    channels: list[tuple]

    @property
    def m(self) -> int:
        return self.h.shape[0]

    @property
    def n_lines(self) -> int:
        return self.m // 2 - 1

    @cached_property
    def sigma_inv(self) -> np.ndarray:
        return np.linalg.inv(self.sigma)

    @cached_property
    def is_paired_diagonal(self) -> bool:
        """True when Sigma is diagonal with equal variances inside each pair."""
        s = self.sigma
        d = np.diag(s)
        if np.max(np.abs(s - np.diag(d))) > 1e-12 * np.max(np.abs(d)):
            return False
        return bool(np.all(np.abs(d[0::2] - d[1::2]) <= 1e-12 * np.abs(d[0::2])))


@dataclass(eq=False)
class PmuModel:
    n_bus: int
    bus_ids: list[int]
    blocks: list[PmuBlock]
    placement: PmuPlacement = field(repr=False)

    @property
    def pmu_buses(self) -> list[int]:
        return [b.bus for b in self.blocks]

    @property
    def state_dim(self) -> int:
        return 2 * self.n_bus

    def block(self, bus_id: int) -> PmuBlock:
        for b in self.blocks:
            if b.bus == bus_id:
                return b
        raise KeyError(f"no PMU at bus {bus_id}")

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked regression matrix and block-diagonal covariance."""
        h = np.vstack([b.h for b in self.blocks])
        m = h.shape[0]
        sigma = np.zeros((m, m))
        r = 0
        for b in self.blocks:
            sigma[r : r + b.m, r : r + b.m] = b.sigma
            r += b.m
        return h, sigma

    @cached_property
    def gain(self) -> np.ndarray:
        g = sum(b.h.T @ b.sigma_inv @ b.h for b in self.blocks)
        return 0.5 * (g + g.T)

    def with_noise(self, sigma_v: float, sigma_i: float) -> "PmuModel":
        blocks = [
            PmuBlock(b.bus, b.index, b.h, _diag_sigma(b.n_lines, sigma_v, sigma_i), b.channels)
            for b in self.blocks
        ]
        return PmuModel(self.n_bus, self.bus_ids, blocks, self.placement)

    def subset(self, bus_ids) -> "PmuModel":
        keep = set(bus_ids)
        blocks = [b for b in self.blocks if b.bus in keep]
        a = np.zeros(self.n_bus, dtype=int)
        a[[b.index for b in blocks]] = 1
        return PmuModel(self.n_bus, self.bus_ids, blocks, PmuPlacement(a))

    def check_observable(self, cond_max: float = 1e14) -> None:
        if not self.blocks:
            raise UnobservableError("no PMUs")
        cond = np.linalg.cond(self.gain)
        if not np.isfinite(cond) or cond > cond_max:
            raise UnobservableError(f"gain matrix is singular (condition number {cond:.3e})")


def _diag_sigma(n_lines: int, sigma_v: float, sigma_i: float) -> np.ndarray:
    return np.diag([sigma_v**2] * 2 + [sigma_i**2] * (2 * n_lines))


def build_pmu_model(
    case: NetworkCase,
    adm: AdmittanceModel,
    placement: PmuPlacement,
    sigma_v: float = 0.01,
    sigma_i: float = 0.02,
    sigmas: dict[int, np.ndarray] | None = None,
) -> PmuModel:
    """Regression matrices ``H_n`` and covariances for every PMU bus.

    ``sigmas`` optionally maps a bus id to a full positive-definite covariance
    replacing the default diagonal one.
    """
    nb = adm.n_bus
    if placement.a.size != nb or case.n_bus != nb:
        raise ValueError(f"placement has {placement.a.size} entries, network has {nb} buses")
    if sigma_v <= 0 or sigma_i <= 0:
        raise ValueError("noise standard deviations must be positive")
    ids = case.bus_ids
    blocks = []
    for n in placement.indices:
        sel = np.zeros(nb, dtype=complex)
        sel[n] = 1.0
        rows = [real_expansion(sel)]
        channels: list[tuple] = [("V", ids[n])]
        for l, is_from in adm.incident(n):
            row = adm.y_from[l] if is_from else adm.y_to[l]
            rows.append(real_expansion(row))
            k = adm.t_idx[l] if is_from else adm.f_idx[l]
            channels.append(("I", ids[n], ids[k], l))
        h = np.vstack(rows)
        n_lines = len(channels) - 1
        sigma = _diag_sigma(n_lines, sigma_v, sigma_i)
        if sigmas and ids[n] in sigmas:
            sigma = np.asarray(sigmas[ids[n]], dtype=float)
            if sigma.shape != (h.shape[0],) * 2:
                raise ValueError(f"covariance for bus {ids[n]} must be {h.shape[0]}x{h.shape[0]}")
            np.linalg.cholesky(sigma)  # raises if not positive definite
        blocks.append(PmuBlock(ids[n], n, h, sigma, channels))
    return PmuModel(nb, ids, blocks, placement)


@dataclass(frozen=True, eq=False)
class AttackScenario:
    """Attacked-set indicator ``b``, angles and bounds (radians), per bus index."""

    b: np.ndarray
    delta_theta: np.ndarray
    delta_theta_max: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b, dtype=int)
        dt = np.asarray(self.delta_theta, dtype=float)
        dmax = np.asarray(self.delta_theta_max, dtype=float)
        if not (b.shape == dt.shape == dmax.shape):
            raise ValueError("attack vectors must have equal length")
        if np.any(dmax < 0):
            raise ValueError("angle bounds must be non-negative")
        if np.any(np.abs(dt) > dmax * b + 1e-12):
            raise ValueError("attack angle outside its bound or on an unattacked bus")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "delta_theta", dt)
        object.__setattr__(self, "delta_theta_max", dmax)

    @classmethod
    def none(cls, n_bus: int) -> "AttackScenario":
        z = np.zeros(n_bus)
        return cls(z.astype(int), z, z)

    @classmethod
    def from_degrees(cls, bus_ids, angles: dict[int, float], max_deg: float | None = None):
        """Attack from ``{bus id: angle in degrees}``; bounds default to 180 deg."""
        pos = {b: k for k, b in enumerate(bus_ids)}
        n = len(pos)
        b = np.zeros(n, dtype=int)
        dt = np.zeros(n)
        for bus, deg in angles.items():
            if bus not in pos:
                raise ValueError(f"attack on unknown bus {bus}")
            b[pos[bus]] = 1
            dt[pos[bus]] = np.radians(deg)
        dmax = np.radians(180.0 if max_deg is None else max_deg) * b
        return cls(b, dt, dmax)

    def check_placement(self, placement: PmuPlacement) -> None:
        if np.any(self.b > placement.a):
            raise ValueError("attacked buses must carry a PMU")


@dataclass(eq=False)
class MeasurementSet:
    z: dict[int, np.ndarray]  # bus id -> interleaved channel values
    attacked: bool = False
    channels: dict[int, list] | None = None

    def to_json(self) -> str:
        pmus = []
        for bus, z in self.z.items():
            rec = {"bus": bus, "values": [float(x) for x in z]}
            if self.channels:
                rec["channels"] = [list(map(_jsonable, c)) for c in self.channels[bus]]
            pmus.append(rec)
        return json.dumps({"attacked": self.attacked, "pmus": pmus}, indent=1)

    @classmethod
    def from_json(cls, text: str, model: PmuModel | None = None) -> "MeasurementSet":
        try:
            doc = json.loads(text)
            z = {int(r["bus"]): np.asarray(r["values"], dtype=float) for r in doc["pmus"]}
            channels = {int(r["bus"]): [tuple(c) for c in r["channels"]] for r in doc["pmus"] if "channels" in r}
        except (KeyError, TypeError, ValueError) as exc:
            raise CaseFormatError(f"malformed measurement document: {exc}") from None
        ms = cls(z, bool(doc.get("attacked", False)), channels or None)
        if model is not None:
            ms.check(model)
        return ms

    def check(self, model: PmuModel) -> None:
        for blk in model.blocks:
            if blk.bus not in self.z:
                raise ValueError(f"missing measurements for PMU at bus {blk.bus}")
            if self.z[blk.bus].shape != (blk.m,):
                raise ValueError(f"bus {blk.bus}: expected {blk.m} values, got {self.z[blk.bus].shape}")
            if not np.all(np.isfinite(self.z[blk.bus])):
                raise ValueError(f"bus {blk.bus}: non-finite measurement")


def _jsonable(x):
    return x.item() if isinstance(x, np.generic) else x


def simulate_measurements(
    model: PmuModel,
    v,
    attack: AttackScenario | None = None,
    seed=None,
    noise_scale: float = 1.0,
) -> MeasurementSet:
    """Draw ``z_n = Gamma_n H_n v + w_n`` for every PMU.

    ``seed`` may be an int or a ``numpy.random.Generator``; ``noise_scale=0``
    gives noiseless data.
    """
    v = np.asarray(getattr(v, "v", v), dtype=float)
    if v.shape != (model.state_dim,):
        raise ValueError(f"state has length {v.shape}, model expects {model.state_dim}")
    if attack is not None:
        attack.check_placement(model.placement)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = {}
    for blk in model.blocks:
        zt = blk.h @ v
        if attack is not None and attack.b[blk.index]:
            zt = gamma_matrix(attack.delta_theta[blk.index], blk.n_lines) @ zt
        w = np.linalg.cholesky(blk.sigma) @ rng.standard_normal(blk.m)
        z[blk.bus] = zt + noise_scale * w
    attacked = attack is not None and bool(np.any(attack.delta_theta != 0))
    return MeasurementSet(z, attacked, {b.bus: b.channels for b in model.blocks})
