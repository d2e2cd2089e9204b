"""Network case files, the branch pi-model admittances, and AC power flow.

Two case encodings are accepted:

* a MATPOWER-style matrix text (``baseMVA = ...; bus = [...]; branch = [...];
  gen = [...];``, optionally with the ``mpc.`` prefix, ``%`` comments and rows
  separated by newlines or ``;``), and
* a JSON document ``{"baseMVA": .., "bus": [{..}], "branch": [..], "gen": [..]}``
  whose record keys are the dataclass field names below.

Demands and shunts are stored in MW / MVAr as written in the file; the
``*_pu`` helpers convert to per unit.
"""

from __future__ import annotations

import dataclasses
import json
import math
import re
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np

from .errors import CaseFormatError, ConvergenceError

__all__ = [
    "BusType",
    "Bus",
    "Branch",
    "Gen",
    "NetworkCase",
    "AdmittanceModel",
    "VoltageProfile",
    "parse_case",
    "emit_case",
    "case_to_json",
    "build_admittance",
    "solve_power_flow",
    "power_injections",
    "branch_flows",
    "load_profile",
    "save_profile",
]


class BusType(IntEnum):
    PQ = 1
    PV = 2
    SLACK = 3


@dataclass(frozen=True)
class Bus:
    id: int
    type: BusType
    pd: float = 0.0
    qd: float = 0.0
    gs: float = 0.0
    bs: float = 0.0
    vm: float = 1.0
    va: float = 0.0  # degrees


@dataclass(frozen=True)
class Branch:
    f: int
    t: int
    r: float
    x: float
    b: float = 0.0
    tap: float = 1.0
    shift: float = 0.0  # degrees
    status: int = 1


@dataclass(frozen=True)
class Gen:
    bus: int
    pg: float = 0.0
    qg: float = 0.0
    vg: float = 1.0
    status: int = 1


@dataclass(frozen=True)
class NetworkCase:
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...] = ()
    name: str = field(default="", compare=False)

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise CaseFormatError(f"duplicate bus id(s) {dup}")
        n_slack = sum(b.type == BusType.SLACK for b in self.buses)
        if n_slack == 0:
            raise CaseFormatError("no slack bus")
        if n_slack > 1:
            raise CaseFormatError("multiple slack buses")
        known = set(ids)
        for k, br in enumerate(self.branches):
            for end in (br.f, br.t):
                if end not in known:
                    raise CaseFormatError(f"branch {k + 1} references unknown bus {end}")
            if br.r < 0:
                raise CaseFormatError(f"branch {k + 1} has negative resistance")
        for g in self.gens:
            if g.bus not in known:
                raise CaseFormatError(f"generator references unknown bus {g.bus}")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    @property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @property
    def slack_index(self) -> int:
        return next(k for k, b in enumerate(self.buses) if b.type == BusType.SLACK)

    @property
    def active_branches(self) -> tuple[Branch, ...]:
        return tuple(br for br in self.branches if br.status)

    @property
    def active_gens(self) -> tuple[Gen, ...]:
        return tuple(g for g in self.gens if g.status)

    @property
    def n_branch(self) -> int:
        return len(self.active_branches)

    def demand_pu(self, load_scale: float = 1.0) -> np.ndarray:
        """Complex per-unit demand per bus, scaled by ``load_scale``."""
        return load_scale * np.array([complex(b.pd, b.qd) for b in self.buses]) / self.base_mva

    def shunt_pu(self) -> np.ndarray:
        return np.array([complex(b.gs, b.bs) for b in self.buses]) / self.base_mva

    def scaled(self, load_scale: float) -> "NetworkCase":
        """Copy with every bus demand multiplied by ``load_scale``."""
        buses = tuple(
            dataclasses.replace(b, pd=b.pd * load_scale, qd=b.qd * load_scale) for b in self.buses
        )
        return dataclasses.replace(self, buses=buses)


# --------------------------------------------------------------------------
# parsing

_ASSIGN = re.compile(r"^(?:mpc\.)?([A-Za-z_]\w*)\s*=\s*(.*)$")
_SECTIONS = ("bus", "branch", "gen")


def _strip_comment(line: str) -> str:
    k = line.find("%")
    return line if k < 0 else line[:k]


def _numbers(chunk: str, lineno: int) -> list[float]:
    out = []
    for tok in chunk.replace(",", " ").split():
        try:
            out.append(float(tok))
        except ValueError:
            raise CaseFormatError(f"expected a number, got {tok!r}", lineno) from None
    return out


def _parse_matrix_text(text: str) -> tuple[float, dict[str, list[tuple[int, list[float]]]]]:
    base_mva = None
    sections: dict[str, list[tuple[int, list[float]]]] = {}
    current = None  # name of the matrix being read; "" when skipping
    closer = "]"
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if current is None:
            if line.startswith("function"):
                continue
            m = _ASSIGN.match(line)
            if not m:
                raise CaseFormatError(f"cannot parse {line!r}", lineno)
            name, rhs = m.group(1), m.group(2).strip()
            if rhs.startswith("[") or rhs.startswith("{"):
                closer = "]" if rhs[0] == "[" else "}"
                keep = name in _SECTIONS and closer == "]"
                if keep and name in sections:
                    raise CaseFormatError(f"section {name!r} defined twice", lineno)
                current = name if keep else ""
                if keep:
                    sections[name] = []
                line = rhs[1:]
            else:
                if name == "baseMVA":
                    vals = _numbers(rhs.rstrip(";"), lineno)
                    if len(vals) != 1:
                        raise CaseFormatError("baseMVA must be a single number", lineno)
                    base_mva = vals[0]
                continue
        # inside a matrix (possibly continuing on the opening line)
        done = closer in line
        if done:
            line = line[: line.index(closer)]
        if current:
            for row in line.split(";"):
                vals = _numbers(row, lineno)
                if vals:
                    sections[current].append((lineno, vals))
        if done:
            current = None
    if current is not None:
        raise CaseFormatError("unterminated matrix at end of input")
    if base_mva is None:
        raise CaseFormatError("missing baseMVA")
    return base_mva, sections


def _bus_type(code: float, lineno) -> BusType:
    try:
        return BusType(int(code))
    except ValueError:
        raise CaseFormatError(f"unsupported bus type {code:g}", lineno) from None


def _rows_to_case(base_mva, sections, name="") -> NetworkCase:
    for s in ("bus", "branch"):
        if s not in sections:
            raise CaseFormatError(f"missing section {s!r}")
    buses, branches, gens = [], [], []
    for lineno, row in sections["bus"]:
        if len(row) < 6:
            raise CaseFormatError("bus row needs at least 6 columns", lineno)
        vm = row[7] if len(row) > 7 else 1.0
        va = row[8] if len(row) > 8 else 0.0
        buses.append(Bus(int(row[0]), _bus_type(row[1], lineno), row[2], row[3], row[4], row[5], vm, va))
    for lineno, row in sections["branch"]:
        if len(row) == 5:
            tap, shift, status = 0.0, 0.0, 1
        elif len(row) >= 11:
            tap, shift, status = row[8], row[9], int(row[10])
        else:
            raise CaseFormatError("branch row needs 5 or at least 11 columns", lineno)
        branches.append(Branch(int(row[0]), int(row[1]), row[2], row[3], row[4], tap or 1.0, shift, status))
    for lineno, row in sections.get("gen", []):
        if len(row) < 6:
            raise CaseFormatError("gen row needs at least 6 columns", lineno)
        status = int(row[7]) if len(row) > 7 else 1
        gens.append(Gen(int(row[0]), row[1], row[2], row[5], status))
    return NetworkCase(base_mva, tuple(buses), tuple(branches), tuple(gens), name)


def _json_to_case(text: str, name="") -> NetworkCase:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CaseFormatError(exc.msg, exc.lineno) from None
    try:
        buses = tuple(Bus(**{**r, "type": BusType(int(r["type"]))}) for r in doc["bus"])
        branches = tuple(Branch(**{**r, "tap": r.get("tap", 1.0) or 1.0}) for r in doc["branch"])
        gens = tuple(Gen(**r) for r in doc.get("gen", []))
        base = float(doc["baseMVA"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CaseFormatError(f"bad structured case document: {exc}") from None
    return NetworkCase(base, buses, branches, gens, doc.get("name", name))


def parse_case(text: str, name: str = "") -> NetworkCase:
    """Parse either case encoding (detected from the first character)."""
    if text.lstrip().startswith("{"):
        return _json_to_case(text, name)
    base, sections = _parse_matrix_text(text)
    return _rows_to_case(base, sections, name)


def _fmt(x: float) -> str:
    return repr(float(x)) if x != int(x) else str(int(x))


def emit_case(case: NetworkCase) -> str:
    """Serialise to the matrix text format (full MATPOWER column layout)."""
    out = [f"% {case.name or 'case'}", f"baseMVA = {_fmt(case.base_mva)};", "", "bus = ["]
    for b in case.buses:
        cols = [b.id, int(b.type), b.pd, b.qd, b.gs, b.bs, 1, b.vm, b.va, 0, 1, 1.1, 0.9]
        out.append("\t" + "\t".join(_fmt(c) for c in cols) + ";")
    out += ["];", "", "gen = ["]
    for g in case.gens:
        cols = [g.bus, g.pg, g.qg, 9999, -9999, g.vg, case.base_mva, g.status, 9999, 0]
        out.append("\t" + "\t".join(_fmt(c) for c in cols) + ";")
    out += ["];", "", "branch = ["]
    for br in case.branches:
        cols = [br.f, br.t, br.r, br.x, br.b, 0, 0, 0, br.tap, br.shift, br.status, -360, 360]
        out.append("\t" + "\t".join(_fmt(c) for c in cols) + ";")
    out += ["];", ""]
    return "\n".join(out)


def case_to_json(case: NetworkCase) -> str:
    doc = {
        "name": case.name,
        "baseMVA": case.base_mva,
        "bus": [{**dataclasses.asdict(b), "type": int(b.type)} for b in case.buses],
        "branch": [dataclasses.asdict(br) for br in case.branches],
        "gen": [dataclasses.asdict(g) for g in case.gens],
    }
    return json.dumps(doc, indent=1)


# --------------------------------------------------------------------------
# admittance model


@dataclass(frozen=True, eq=False)
class AdmittanceModel:
    """Bus and branch admittances of the in-service network.

    ``y_from[l] @ V`` is the current entering branch ``l`` at its from end,
    ``y_to[l] @ V`` the current entering it at its to end.
    """

    y_bus: np.ndarray
    y_from: np.ndarray
    y_to: np.ndarray
    f_idx: np.ndarray
    t_idx: np.ndarray
    y_shunt: np.ndarray
    branch_index: dict[tuple[int, int, int], int]

    @property
    def n_bus(self) -> int:
        return self.y_bus.shape[0]

    @property
    def n_branch(self) -> int:
        return self.y_from.shape[0]

    def incident(self, n: int) -> list[tuple[int, bool]]:
        """Branches touching bus index ``n`` in branch order, with a flag that
        is True when ``n`` is the branch's from end."""
        out = []
        for l in range(self.n_branch):
            if self.f_idx[l] == n:
                out.append((l, True))
            elif self.t_idx[l] == n:
                out.append((l, False))
        return out


def build_admittance(case: NetworkCase) -> AdmittanceModel:
    idx = case.bus_index
    branches = case.active_branches
    nb, nl = case.n_bus, len(branches)
    y_from = np.zeros((nl, nb), dtype=complex)
    y_to = np.zeros((nl, nb), dtype=complex)
    f_idx = np.empty(nl, dtype=int)
    t_idx = np.empty(nl, dtype=int)
    branch_index = {}
    seen: dict[tuple[int, int], int] = {}
    for l, br in enumerate(branches):
        if br.x == 0:
            raise CaseFormatError(f"in-service branch {br.f}-{br.t} has zero reactance")
        ys = 1.0 / complex(br.r, br.x)
        ytt = ys + 0.5j * br.b
        tau = br.tap * np.exp(1j * math.radians(br.shift))
        f, t = idx[br.f], idx[br.t]
        y_from[l, f] += ytt / (tau * np.conj(tau))
        y_from[l, t] += -ys / np.conj(tau)
        y_to[l, f] += -ys / tau
        y_to[l, t] += ytt
        f_idx[l], t_idx[l] = f, t
        ordinal = seen.get((br.f, br.t), 0)
        seen[(br.f, br.t)] = ordinal + 1
        branch_index[(br.f, br.t, ordinal)] = l
    c_from = np.zeros((nl, nb))
    c_to = np.zeros((nl, nb))
    c_from[np.arange(nl), f_idx] = 1.0
    c_to[np.arange(nl), t_idx] = 1.0
    y_shunt = case.shunt_pu()
    y_bus = c_from.T @ y_from + c_to.T @ y_to + np.diag(y_shunt)
    return AdmittanceModel(y_bus, y_from, y_to, f_idx, t_idx, y_shunt, branch_index)


# --------------------------------------------------------------------------
# voltage profiles and power flow


@dataclass(frozen=True, eq=False)
class VoltageProfile:
    """Rectangular nodal voltages ``v = [v_r; v_i]`` in per unit."""

    v: np.ndarray
    iterations: int | None = None
    mismatch: float | None = None

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        if v.ndim != 1 or v.size % 2:
            raise ValueError("voltage profile must be a 1-D vector of even length")
        if not np.all(np.isfinite(v)):
            raise ValueError("voltage profile has non-finite entries")
        object.__setattr__(self, "v", v)

    @classmethod
    def from_complex(cls, vc, **kw) -> "VoltageProfile":
        vc = np.asarray(vc, dtype=complex)
        return cls(np.concatenate([vc.real, vc.imag]), **kw)

    @property
    def n_bus(self) -> int:
        return self.v.size // 2

    @property
    def complex(self) -> np.ndarray:
        n = self.n_bus
        return self.v[:n] + 1j * self.v[n:]

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.complex)

    @property
    def angle(self) -> np.ndarray:
        return np.angle(self.complex)

    def rotated(self, radians: float) -> "VoltageProfile":
        return VoltageProfile.from_complex(self.complex * np.exp(1j * radians))


def power_injections(adm: AdmittanceModel, vc: np.ndarray) -> np.ndarray:
    """Complex bus injections S = V * conj(Y V)."""
    return vc * np.conj(adm.y_bus @ vc)


def branch_flows(adm: AdmittanceModel, vc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Complex power entering each branch at its from and to ends."""
    s_from = vc[adm.f_idx] * np.conj(adm.y_from @ vc)
    s_to = vc[adm.t_idx] * np.conj(adm.y_to @ vc)
    return s_from, s_to


def _bus_roles(case: NetworkCase):
    idx = case.bus_index
    gen_buses = {}
    for g in case.active_gens:
        gen_buses.setdefault(idx[g.bus], g)
    ref = case.slack_index
    pv = [k for k, b in enumerate(case.buses) if b.type == BusType.PV and k in gen_buses]
    pq = [k for k, b in enumerate(case.buses) if k != ref and k not in pv]
    return ref, np.array(pv, dtype=int), np.array(pq, dtype=int), gen_buses


def solve_power_flow(
    case: NetworkCase,
    load_scale: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 30,
    adm: AdmittanceModel | None = None,
) -> VoltageProfile:
    """Polar Newton-Raphson power flow with loads scaled by ``load_scale``.

    Generator active outputs are held at their case values; the slack bus
    absorbs the difference. Reactive limits are not enforced.
    """
    if load_scale <= 0:
        raise ValueError("load_scale must be positive")
    adm = adm or build_admittance(case)
    y = adm.y_bus
    nb = case.n_bus
    idx = case.bus_index
    ref, pv, pq, gen_buses = _bus_roles(case)

    s_gen = np.zeros(nb, dtype=complex)
    for g in case.active_gens:
        s_gen[idx[g.bus]] += complex(g.pg, g.qg) / case.base_mva
    s_spec = s_gen - case.demand_pu(load_scale)

    vm = np.ones(nb)
    va = np.zeros(nb)
    for k, g in gen_buses.items():
        if k == ref or k in pv:
            vm[k] = g.vg
    if ref not in gen_buses:
        vm[ref] = case.buses[ref].vm
    va[ref] = math.radians(case.buses[ref].va)

    pvpq = np.concatenate([pv, pq])
    n_a, n_m = len(pvpq), len(pq)

    def mismatch(vc):
        mis = power_injections(adm, vc) - s_spec
        return np.concatenate([mis[pvpq].real, mis[pq].imag])

    vc = vm * np.exp(1j * va)
    f = mismatch(vc)
    norm = np.max(np.abs(f)) if f.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_iter:
            raise ConvergenceError(
                f"power flow did not converge in {max_iter} iterations (mismatch {norm:.3e})",
                mismatch=norm,
                iterations=it,
            )
        ibus = y @ vc
        vnorm = vc / np.abs(vc)
        ds_dvm = np.diag(vc) @ np.conj(y @ np.diag(vnorm)) + np.diag(np.conj(ibus) * vnorm)
        ds_dva = 1j * np.diag(vc) @ np.conj(np.diag(ibus) - y @ np.diag(vc))
        jac = np.block(
            [
                [ds_dva[np.ix_(pvpq, pvpq)].real, ds_dvm[np.ix_(pvpq, pq)].real],
                [ds_dva[np.ix_(pq, pvpq)].imag, ds_dvm[np.ix_(pq, pq)].imag],
            ]
        )
        dx = np.linalg.solve(jac, -f)
        va[pvpq] += dx[:n_a]
        vm[pq] += dx[n_a : n_a + n_m]
        vc = vm * np.exp(1j * va)
        f = mismatch(vc)
        norm = np.max(np.abs(f))
        it += 1
        if not np.isfinite(norm):
            raise ConvergenceError("power flow diverged", mismatch=norm, iterations=it)
    return VoltageProfile.from_complex(vc, iterations=it, mismatch=float(norm))


def save_profile(profile: VoltageProfile) -> str:
    lines = [f"layout=rect n={profile.n_bus}"]
    lines += [repr(float(x)) for x in profile.v]
    return "\n".join(lines) + "\n"


def load_profile(text: str, n_bus: int | None = None) -> VoltageProfile:
    """Read the profile text format; ``n_bus`` enforces the active case size."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise CaseFormatError("empty profile file")
    m = re.fullmatch(r"layout=rect\s+n=(\d+)", lines[0])
    if not m:
        raise CaseFormatError("profile header must read 'layout=rect n=<N>'", 1)
    declared = int(m.group(1))
    try:
        values = np.array([float(x) for x in lines[1:]])
    except ValueError as exc:
        raise CaseFormatError(f"bad profile value: {exc}") from None
    expected = 2 * (n_bus if n_bus is not None else declared)
    if values.size != expected or (n_bus is not None and declared != n_bus):
        raise CaseFormatError(
            f"profile length mismatch: expected {expected} values, got {values.size} (header n={declared})"
        )
    if not np.all(np.isfinite(values)):
        raise CaseFormatError("profile has non-finite values")
    return VoltageProfile(values)
