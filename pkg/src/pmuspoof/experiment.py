"""Monte-Carlo experiment harness shared by the command line and the tests.

An :class:`ExperimentConfig` names a case, a placement, an attack, noise
levels, load scaling and one method. :func:`run_experiment` runs every
realization with its own seed (``seed + i``), so two configs that differ only
in ``method`` see the same attacks and PMU noise.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .am import AmConfig, run_am, run_am_hybrid
from .errors import ConfigError
from .estimation import estimate_ml
from .fixtures import load_case, load_placement_ids
from .lnrt import run_lnrt
from .netcase import build_admittance, solve_power_flow
from .pmu import AttackScenario, PmuPlacement, build_pmu_model, simulate_measurements
from .scada import estimate_scada, select_channels, simulate_scada
from .vulnerability import BiasModel, find_vulnerable_greedy, find_vulnerable_optimal

log = logging.getLogger(__name__)

__all__ = ["METHODS", "ExperimentConfig", "RunSummary", "run_experiment", "compare_methods", "relative_error"]

METHODS = ("ml", "am", "am_hybrid", "lnrt", "vuln_optimal", "vuln_greedy")


@dataclass
class ExperimentConfig:
    case_path: str = "ieee14"
    placement_path: str | None = None  # defaults to case_path
    method: str = "am"
    attack: dict | None = None
    noise: dict = field(default_factory=lambda: {"sigma_v": 0.01, "sigma_i": 0.02})
    load_scale: float = 1.0
    load_profile: list | None = None
    monte_carlo: int = 1
    seed: int = 0
    tolerance: float = 0.01
    max_iter: int = 200
    covariance_mode: str = "auto"
    gauge: str = "reference"  # reference | free
    attacked_threshold_deg: float = 3.0
    lnrt_threshold: float = 3.0
    vuln: dict = field(default_factory=lambda: {"n_p": 1, "bound_deg": 70.0, "grid_step_deg": None})
    scada: dict = field(default_factory=lambda: {"fraction": 0.5, "sigma_vmag": 0.01, "sigma_flow": 0.02, "seed": 0})
    pmu_at_slack: bool = False
    drop_pmus: list = field(default_factory=list)

    def __post_init__(self):
        if self.placement_path is None:
            self.placement_path = self.case_path
        self.validate()

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {', '.join(METHODS)}")
        if self.gauge not in ("reference", "free"):
            raise ConfigError("gauge must be 'reference' or 'free'")
        if self.covariance_mode not in ("auto", "diagonal", "general"):
            raise ConfigError("covariance_mode must be auto, diagonal or general")
        if int(self.monte_carlo) < 1:
            raise ConfigError("monte_carlo must be at least 1")
        if not self.tolerance >= 0 or int(self.max_iter) < 1:
            raise ConfigError("tolerance must be >= 0 and max_iter >= 1")
        for key in ("sigma_v", "sigma_i"):
            if not float(self.noise.get(key, 0)) > 0:
                raise ConfigError(f"noise.{key} must be positive")
        if self.load_profile is not None and (not self.load_profile or any(float(s) <= 0 for s in self.load_profile)):
            raise ConfigError("load_profile must be a non-empty list of positive scales")
        if not self.load_scale > 0:
            raise ConfigError("load_scale must be positive")
        a = self.attack
        if a is not None:
            if "random" in a:
                if not 0 <= float(a["random"]) <= 1:
                    raise ConfigError("attack.random is a fraction in [0, 1]")
                lo, hi = a.get("angle_range", [-60.0, 60.0])
                if not lo <= hi:
                    raise ConfigError("attack.angle_range must be [low, high]")
            elif "buses" in a:
                if len(a["buses"]) != len(a.get("angles", [])):
                    raise ConfigError("attack.buses and attack.angles must have equal length")
            else:
                raise ConfigError("attack needs either 'buses'/'angles' or 'random'")
        if self.method.startswith("vuln"):
            n_p = int(self.vuln.get("n_p", 1))
            if n_p < 1 or (self.method == "vuln_greedy" and n_p < 2):
                raise ConfigError("vuln.n_p must be >= 1 (>= 2 for the greedy search)")
            if not 0 < float(self.vuln.get("bound_deg", 70.0)) <= 180:
                raise ConfigError("vuln.bound_deg must lie in (0, 180]")
        if self.method == "am_hybrid" and not 0 < float(self.scada.get("fraction", 0.5)) <= 1:
            raise ConfigError("scada.fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
        defaults = {f.name: (f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default)
                    for f in dataclasses.fields(cls)}
        merged = dict(defaults)
        for key, val in doc.items():
            if isinstance(defaults[key], dict) and isinstance(val, dict):
                merged[key] = {**defaults[key], **val}
            else:
                merged[key] = val
        try:
            return cls(**merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def scenario_key(self) -> tuple:
        """Fields that must agree for a paired method comparison."""
        return (self.case_path, self.placement_path, json.dumps(self.attack, sort_keys=True),
                json.dumps(self.noise, sort_keys=True), self.load_scale,
                tuple(self.load_profile or ()), self.monte_carlo, self.seed)


@dataclass
class RunSummary:
    method: str
    case: str
    relative_state_error: float
    relative_angle_error: float
    angle_table: dict  # bus id -> {"true_deg", "mean_estimate_deg"}
    wall_time: float
    realizations: list[dict] = field(default_factory=list)
    vulnerability: list[dict] = field(default_factory=list)
    traces: list[list[float]] = field(default_factory=list)
    lnrt_removals: list[list] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def record(self) -> dict:
        """Compact JSON-friendly summary."""
        return {
            "method": self.method,
            "case": self.case,
            "relative_state_error": _num(self.relative_state_error),
            "relative_angle_error": _num(self.relative_angle_error),
            "angles_deg": {str(b): row for b, row in self.angle_table.items()},
            "realizations": len(self.realizations),
            "wall_time_s": round(self.wall_time, 3),
            "vulnerable": self.vulnerability[0]["buses"] if self.vulnerability else None,
        }


def _num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def relative_error(estimate, truth) -> float:
    den = float(np.linalg.norm(truth))
    if den == 0:
        return math.nan
    return float(np.linalg.norm(np.asarray(estimate) - np.asarray(truth)) / den)


def _setup(cfg: ExperimentConfig):
    case = load_case(cfg.case_path)
    adm = build_admittance(case)
    ids = set(load_placement_ids(cfg.placement_path))
    if cfg.pmu_at_slack:
        ids.add(case.bus_ids[case.slack_index])
    missing = set(cfg.drop_pmus) - ids
    if missing:
        raise ConfigError(f"drop_pmus names buses without a PMU: {sorted(missing)}")
    ids -= set(cfg.drop_pmus)
    placement = PmuPlacement.from_buses(case, sorted(ids))
    model = build_pmu_model(case, adm, placement, sigma_v=float(cfg.noise["sigma_v"]), sigma_i=float(cfg.noise["sigma_i"]))
    return case, adm, model


def _truth(case, adm, scale):
    """Power-flow state rotated so the reference bus angle is zero."""
    prof = solve_power_flow(case, load_scale=scale, adm=adm)
    return prof.rotated(-prof.angle[case.slack_index]).v


def _draw_attack(cfg, case, model, rng) -> AttackScenario:
    a = cfg.attack
    if not a:
        return AttackScenario.none(case.n_bus)
    if "random" in a:
        pmus = model.pmu_buses
        k = int(round(float(a["random"]) * len(pmus)))
        lo, hi = a.get("angle_range", [-60.0, 60.0])
        chosen = sorted(int(b) for b in rng.choice(pmus, size=k, replace=False))
        return AttackScenario.from_degrees(case.bus_ids, {b: float(rng.uniform(lo, hi)) for b in chosen})
    return AttackScenario.from_degrees(case.bus_ids, {int(b): float(d) for b, d in zip(a["buses"], a["angles"])})


def _vulnerability(cfg, case, model, scale, v):
    vc = cfg.vuln
    bound = math.radians(float(vc.get("bound_deg", 70.0)))
    bm = BiasModel(model, v)
    n_p = int(vc.get("n_p", 1))
    if cfg.method == "vuln_optimal":
        res = find_vulnerable_optimal(model, v, n_p, bound, bias_model=bm)
        table = res.log
    else:
        res = find_vulnerable_greedy(model, v, n_p, bound, grid_step_deg=vc.get("grid_step_deg"), bias_model=bm)
        table = [r for r in res.log if r["stage"] == n_p]
    ranked = sorted(table, key=lambda r: -r["objective"])
    rows = [
        {"load_scale": scale, "rank": rank, "buses": list(rec["buses"]),
         "delta_theta_deg": _deg_list(rec["delta_theta"]), "objective": rec["objective"]}
        for rank, rec in enumerate(ranked, start=1)
    ]
    return res, rows


def _deg_list(x):
    return [math.degrees(t) for t in np.atleast_1d(x)]


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> RunSummary:
    """Run every realization of ``cfg``; write CSV artifacts when ``out_dir`` is given."""
    t0 = time.perf_counter()
    case, adm, model = _setup(cfg)
    scales = [float(s) for s in (cfg.load_profile or [cfg.load_scale])]
    ref = case.slack_index
    manifest = {"config": cfg.to_dict(), "pmu_buses": model.pmu_buses, "slack_bus": case.bus_ids[ref]}
    summary = RunSummary(cfg.method, case.name, math.nan, math.nan, {}, 0.0, manifest=manifest)

    if cfg.method.startswith("vuln"):
        for scale in scales:
            v = _truth(case, adm, scale)
            _, rows = _vulnerability(cfg, case, model, scale, v)
            summary.vulnerability.extend(rows)
        manifest["most_vulnerable"] = {str(r["load_scale"]): r["buses"] for r in summary.vulnerability if r["rank"] == 1}
        summary.wall_time = time.perf_counter() - t0
        if out_dir is not None:
            _write_outputs(summary, Path(out_dir))
        return summary

    template = None
    if cfg.method == "am_hybrid":
        sc = cfg.scada
        template = select_channels(case, adm, float(sc["fraction"]), seed=sc.get("seed", 0),
                                   sigma_vmag=float(sc["sigma_vmag"]), sigma_flow=float(sc["sigma_flow"]))
        manifest["scada_channels"] = [[e.kind, e.location] for e in template.entries]
    am_cfg = AmConfig(tolerance=cfg.tolerance, max_iter=int(cfg.max_iter), covariance_mode=cfg.covariance_mode,
                      attacked_threshold_deg=cfg.attacked_threshold_deg)
    am_ref = ref if (cfg.gauge == "reference" or cfg.method == "am_hybrid") else None

    est_deg = {b: [] for b in model.pmu_buses}
    true_deg = {b: [] for b in model.pmu_buses}
    for scale in scales:
        v = _truth(case, adm, scale)
        for i in range(int(cfg.monte_carlo)):
            seed = int(cfg.seed) + i
            r_att, r_pmu, r_scada = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
            attack = _draw_attack(cfg, case, model, r_att)
            z = simulate_measurements(model, v, attack, seed=r_pmu)
            row = {"load_scale": scale, "realization": i, "seed": seed,
                   "attacked": [case.bus_ids[k] for k in np.flatnonzero(attack.b)]}
            dtheta_hat = None
            if cfg.method == "ml":
                v_hat = estimate_ml(model, z)
            elif cfg.method == "lnrt":
                rep = run_lnrt(model, z, threshold=cfg.lnrt_threshold)
                v_hat = rep.v_hat
                row["removed"] = len(rep.removed_channels)
                if i == 0 and scale == scales[0]:
                    summary.lnrt_removals = [[k + 1, bus, ch, rn] for k, (bus, ch, rn) in enumerate(rep.removed_channels)]
            else:
                if cfg.method == "am":
                    res = run_am(model, z, am_cfg, ref=am_ref)
                else:
                    prior = estimate_scada(case, adm, simulate_scada(case, adm, v, template, seed=r_scada))
                    res = run_am_hybrid(model, z, prior.v_s_hat, prior.precision, am_cfg, ref=ref)
                    row["scada_converged"] = prior.converged
                v_hat, dtheta_hat = res.v_hat, res.delta_theta_hat
                row.update(iterations=res.iterations, converged=res.converged,
                           flagged=res.flagged(case.bus_ids, cfg.attacked_threshold_deg))
                summary.traces.append(res.objective_trace)
            row["state_error"] = relative_error(v_hat, v)
            if dtheta_hat is not None:
                row["angle_error"] = relative_error(dtheta_hat, attack.delta_theta)
                for b in model.pmu_buses:
                    k = case.bus_index[b]
                    est_deg[b].append(math.degrees(dtheta_hat[k]))
                    true_deg[b].append(math.degrees(attack.delta_theta[k]))
            summary.realizations.append(row)

    summary.relative_state_error = float(np.mean([r["state_error"] for r in summary.realizations]))
    ang = [r["angle_error"] for r in summary.realizations if "angle_error" in r and not math.isnan(r["angle_error"])]
    summary.relative_angle_error = float(np.mean(ang)) if ang else math.nan
    if any(est_deg.values()):
        summary.angle_table = {b: {"true_deg": float(np.mean(true_deg[b])), "mean_estimate_deg": float(np.mean(est_deg[b]))}
                               for b in model.pmu_buses}
    summary.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        _write_outputs(summary, Path(out_dir))
    return summary


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    if isinstance(x, (list, tuple)):
        return " ".join(_fmt(y) for y in x)
    return str(x)


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(x) for x in r])
    return buf.getvalue()


def _write_outputs(summary: RunSummary, out: Path) -> None:
    """Deterministic CSV artifacts plus a manifest (no timings, so reruns match byte for byte)."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(summary.manifest, indent=1, sort_keys=True, default=_fmt) + "\n")
    if summary.vulnerability:
        rows = [[r["load_scale"], r["rank"], r["buses"], r["delta_theta_deg"], r["objective"]] for r in summary.vulnerability]
        (out / "ranking.csv").write_text(_csv(["load_scale", "rank", "buses", "delta_theta_deg", "objective"], rows))
        return
    (out / "summary.csv").write_text(_csv(
        ["method", "case", "realizations", "relative_state_error", "relative_angle_error"],
        [[summary.method, summary.case, len(summary.realizations), summary.relative_state_error, summary.relative_angle_error]],
    ))
    cols = ["load_scale", "realization", "seed", "attacked", "state_error", "angle_error", "iterations", "converged", "removed"]
    (out / "realizations.csv").write_text(_csv(cols, [[r.get(c) for c in cols] for r in summary.realizations]))
    if summary.angle_table:
        rows = [[b, t["true_deg"], t["mean_estimate_deg"]] for b, t in summary.angle_table.items()]
        (out / "angles.csv").write_text(_csv(["bus", "true_deg", "mean_estimate_deg"], rows))
    if summary.traces:
        rows = list(enumerate(summary.traces[0]))
        (out / "plot.csv").write_text(_csv(["iteration", "objective"], rows))
    if summary.method == "lnrt":
        (out / "lnrt.csv").write_text(_csv(["round", "bus", "channel", "normalized_residual"], summary.lnrt_removals))


def compare_methods(configs: list[ExperimentConfig], out_path: str | Path | None = None) -> list[dict]:
    """Run several methods on one scenario with paired seeds; one row per method."""
    if not configs:
        raise ConfigError("compare_methods needs at least one config")
    key = configs[0].scenario_key()
    for c in configs[1:]:
        if c.scenario_key() != key:
            raise ConfigError("configs in a comparison must share case, placement, attack, noise, load and seeds")
    rows = []
    for c in configs:
        s = run_experiment(c)
        rows.append({"method": c.method, "relative_state_error": s.relative_state_error,
                     "relative_angle_error": s.relative_angle_error, "realizations": len(s.realizations),
                     "mean_wall_time_s": s.wall_time / max(1, len(s.realizations))})
    if out_path is not None:
        cols = ["method", "realizations", "relative_state_error", "relative_angle_error", "mean_wall_time_s"]
        Path(out_path).write_text(_csv(cols, [[r[c] for c in cols] for r in rows]))
    return rows
