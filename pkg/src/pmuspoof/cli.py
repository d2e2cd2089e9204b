"""Command-line entry point: ``pmuspoof <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 fixture or file I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .am import AmConfig, run_am
from .errors import CaseFormatError, ConfigError, NumericalError
from .estimation import estimate_ml
from .experiment import ExperimentConfig, _csv, compare_methods, relative_error, run_experiment
from .fixtures import load_case, load_placement
from .lnrt import run_lnrt
from .netcase import build_admittance, load_profile, save_profile, solve_power_flow
from .pmu import AttackScenario, MeasurementSet, build_pmu_model, simulate_measurements

log = logging.getLogger("pmuspoof")

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4


def _angles(text: str) -> dict[int, float]:
    """``"6:30,14:45"`` -> {6: 30.0, 14: 45.0}."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        bus, _, deg = part.partition(":")
        try:
            out[int(bus)] = float(deg)
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad attack entry {part!r} (expected bus:degrees)") from None
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated bus ids, got {text!r}") from None


def _add_scenario(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("scenario")
    g.add_argument("--config", help="experiment config document (JSON); flags override its fields")
    g.add_argument("--case", help="bundled case name (ieee14, ieee30, ieee118) or case file path")
    g.add_argument("--placement", help="PMU placement name or file (defaults to the case's bundled placement)")
    g.add_argument("--attack", type=_angles, help="fixed attack as bus:degrees pairs, e.g. 6:30,14:45")
    g.add_argument("--random-attack", type=float, metavar="FRACTION", help="attack this fraction of PMUs at random")
    g.add_argument("--angle-range", type=_floats, metavar="LO,HI", help="degrees for random attacks (default -60,60)")
    g.add_argument("--sigma-v", type=float)
    g.add_argument("--sigma-i", type=float)
    g.add_argument("--load-scale", type=float)
    g.add_argument("--load-profile", type=_floats, metavar="S1,S2,...")
    g.add_argument("--monte-carlo", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--tolerance", type=float)
    g.add_argument("--max-iter", type=int)
    g.add_argument("--out", help="output directory for CSV artifacts and the manifest")


def _config_from(args, method: str) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CaseFormatError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config document must be a JSON object")
    doc["method"] = method
    simple = {"case": "case_path", "placement": "placement_path", "load_scale": "load_scale",
              "load_profile": "load_profile", "monte_carlo": "monte_carlo", "seed": "seed",
              "tolerance": "tolerance", "max_iter": "max_iter"}
    for flag, key in simple.items():
        val = getattr(args, flag, None)
        if val is not None:
            doc[key] = val
    if args.case and not args.placement and "placement_path" not in doc:
        doc["placement_path"] = args.case
    noise = dict(doc.get("noise", {}))
    if args.sigma_v is not None:
        noise["sigma_v"] = args.sigma_v
    if args.sigma_i is not None:
        noise["sigma_i"] = args.sigma_i
    if noise:
        doc["noise"] = noise
    if args.attack is not None:
        doc["attack"] = {"buses": list(args.attack), "angles": list(args.attack.values())}
    elif args.random_attack is not None:
        doc["attack"] = {"random": args.random_attack, "angle_range": args.angle_range or [-60.0, 60.0]}
    for extra in ("threshold", "n_p", "bound", "grid_step", "scada_fraction", "scada_seed",
                  "pmu_at_slack", "drop_pmus", "gauge"):
        if not hasattr(args, extra):
            continue
        val = getattr(args, extra)
        if val is None or val is False:
            continue
        if extra == "threshold":
            doc["lnrt_threshold"] = val
        elif extra in ("n_p", "bound", "grid_step"):
            key = {"n_p": "n_p", "bound": "bound_deg", "grid_step": "grid_step_deg"}[extra]
            doc["vuln"] = {**doc.get("vuln", {}), key: val}
        elif extra.startswith("scada_"):
            doc["scada"] = {**doc.get("scada", {}), extra[6:]: val}
        else:
            doc[extra] = val
    return ExperimentConfig.from_dict(doc)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _print_summary(summary) -> None:
    print(json.dumps(summary.record(), indent=1))


# ---------------------------------------------------------------------------
# subcommands


def cmd_pf(args) -> int:
    case = load_case(args.case)
    prof = solve_power_flow(case, load_scale=args.load_scale)
    log.info("power flow converged in %d iterations (mismatch %.2e)", prof.iterations, prof.mismatch)
    if args.csv:
        rows = [[b, float(m), math.degrees(a)] for b, m, a in zip(case.bus_ids, prof.magnitude, prof.angle)]
        _emit(_csv(["bus", "vm_pu", "va_deg"], rows), args.out)
    else:
        _emit(save_profile(prof), args.out)
    return 0


def _truth_profile(args, case):
    if getattr(args, "profile", None):
        try:
            text = Path(args.profile).read_text()
        except OSError as exc:
            raise CaseFormatError(f"cannot read {args.profile}: {exc.strerror}") from None
        prof = load_profile(text, n_bus=case.n_bus)
    else:
        prof = solve_power_flow(case, load_scale=args.load_scale or 1.0)
    # all simulated data and error reports use a zero reference-bus angle
    return prof.rotated(-prof.angle[case.slack_index]).v


def _pmu_model(args):
    case = load_case(args.case)
    adm = build_admittance(case)
    placement = load_placement(args.placement or args.case, case)
    model = build_pmu_model(case, adm, placement, sigma_v=args.sigma_v or 0.01, sigma_i=args.sigma_i or 0.02)
    return case, model


def cmd_simulate(args) -> int:
    if not args.case:
        raise ConfigError("simulate needs --case")
    case, model = _pmu_model(args)
    v = _truth_profile(args, case)
    attack = AttackScenario.from_degrees(case.bus_ids, args.attack or {})
    ms = simulate_measurements(model, v, attack, seed=args.seed)
    _emit(ms.to_json() + "\n", args.out_file)
    return 0


def _read_measurements(path, model) -> MeasurementSet:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CaseFormatError(f"cannot read {path}: {exc.strerror}") from None
    try:
        return MeasurementSet.from_json(text, model)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _state_rows(case, v):
    n = case.n_bus
    vc = v[:n] + 1j * v[n:]
    return [[b, float(v[k]), float(v[n + k]), float(abs(vc[k])), math.degrees(np.angle(vc[k]))]
            for k, b in enumerate(case.bus_ids)]


STATE_COLS = ["bus", "v_real", "v_imag", "vm_pu", "va_deg"]


def _single_file(args, kind: str) -> int:
    """Run one estimator on a measurement file instead of a Monte-Carlo experiment."""
    if not args.case:
        raise ConfigError("--measurements needs --case")
    case, model = _pmu_model(args)
    z = _read_measurements(args.measurements, model)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    record = {"method": kind}
    ref = None
    if kind == "ml":
        v_hat = estimate_ml(model, z)
    elif kind == "lnrt":
        rep = run_lnrt(model, z, threshold=args.threshold or 3.0)
        v_hat = rep.v_hat
        record["removed"] = [list(r) for r in rep.removed_channels]
        if out:
            rows = [[k + 1, bus, ch, rn] for k, (bus, ch, rn) in enumerate(rep.removed_channels)]
            (out / "lnrt.csv").write_text(_csv(["round", "bus", "channel", "normalized_residual"], rows))
    else:
        cfg = AmConfig(tolerance=args.tolerance if args.tolerance is not None else 0.01, max_iter=args.max_iter or 200)
        ref = case.slack_index if getattr(args, "gauge", "reference") != "free" else None
        res = run_am(model, z, cfg, ref=ref)
        v_hat = res.v_hat
        record.update(iterations=res.iterations, converged=res.converged,
                      angles_deg={str(b): d for b, d in res.angles_deg(case.bus_ids).items()},
                      flagged=res.flagged(case.bus_ids))
        if out:
            (out / "plot.csv").write_text(_csv(["iteration", "objective"], list(enumerate(res.objective_trace))))
    if args.profile:
        v = _truth_profile(args, case)
        record["relative_state_error"] = relative_error(v_hat, v)
    if out:
        (out / "state.csv").write_text(_csv(STATE_COLS, _state_rows(case, v_hat)))
    print(json.dumps(record, indent=1))
    return 0


def _experiment(method):
    def run(args) -> int:
        if getattr(args, "measurements", None):
            return _single_file(args, method)
        cfg = _config_from(args, method)
        _print_summary(run_experiment(cfg, args.out))
        return 0

    return run


def cmd_vuln(args) -> int:
    cfg = _config_from(args, "vuln_greedy" if args.greedy else "vuln_optimal")
    summary = run_experiment(cfg, args.out)
    for scale, buses in summary.manifest["most_vulnerable"].items():
        print(f"load_scale={scale}: most vulnerable PMU set {buses}")
    if not args.out:
        rows = [[r["load_scale"], r["rank"], r["buses"], r["delta_theta_deg"], r["objective"]]
                for r in summary.vulnerability]
        sys.stdout.write(_csv(["load_scale", "rank", "buses", "delta_theta_deg", "objective"], rows))
    return 0


def cmd_compare(args) -> int:
    configs = []
    if args.configs:
        for path in args.configs:
            try:
                configs.append(ExperimentConfig.from_json(Path(path).read_text()))
            except OSError as exc:
                raise CaseFormatError(f"cannot read {path}: {exc.strerror}") from None
    else:
        methods = args.methods or ["am", "lnrt"]
        configs = [_config_from(args, m) for m in methods]
    out = Path(args.out) / "comparison.csv" if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    rows = compare_methods(configs, out)
    cols = ["method", "realizations", "relative_state_error", "relative_angle_error", "mean_wall_time_s"]
    sys.stdout.write(_csv(cols, [[r[c] for c in cols] for r in rows]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pmuspoof", description="GPS-spoofing attacks on PMU state estimation")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pf", help="solve the AC power flow")
    s.add_argument("--case", required=True)
    s.add_argument("--load-scale", type=float, default=1.0)
    s.add_argument("--csv", action="store_true", help="bus, magnitude, angle table instead of the profile format")
    s.add_argument("--out", help="output file (default stdout)")
    s.set_defaults(func=cmd_pf)

    s = sub.add_parser("simulate", help="draw one PMU measurement set")
    _add_scenario(s)
    s.add_argument("--profile", help="true voltage profile file (default: power flow at --load-scale); "
                   "it is rotated to a zero reference-bus angle")
    s.add_argument("--out-file", help="measurement JSON output (default stdout)")
    s.set_defaults(func=cmd_simulate)

    for name, method, helptext in (("estimate", "ml", "ML state estimation"),
                                   ("am", "am", "alternating-minimisation attack reconstruction"),
                                   ("lnrt", "lnrt", "largest normalized residual test baseline")):
        s = sub.add_parser(name, help=helptext)
        _add_scenario(s)
        s.add_argument("--measurements", help="run once on this measurement file instead of a Monte-Carlo experiment")
        s.add_argument("--profile", help="true profile for error reporting with --measurements")
        if name == "lnrt":
            s.add_argument("--threshold", type=float)
        if name == "am":
            s.add_argument("--gauge", choices=["reference", "free"])
        s.set_defaults(func=_experiment(method))

    s = sub.add_parser("am-hybrid", help="alternating minimisation with a SCADA prior")
    _add_scenario(s)
    s.add_argument("--scada-fraction", type=float)
    s.add_argument("--scada-seed", type=int)
    s.add_argument("--pmu-at-slack", action="store_true", help="add a PMU at the reference bus")
    s.add_argument("--drop-pmus", type=_ints, metavar="B1,B2,...", help="remove these PMUs from the placement")
    s.set_defaults(func=_experiment("am_hybrid"), measurements=None)

    s = sub.add_parser("vuln", help="rank the most vulnerable PMU locations")
    _add_scenario(s)
    s.add_argument("--n-p", type=int, help="number of attacked PMUs")
    s.add_argument("--bound", type=float, help="angle bound in degrees (default 70)")
    s.add_argument("--greedy", action="store_true")
    s.add_argument("--grid-step", type=float, help="grid step (degrees) for the greedy 1-D subproblems")
    s.set_defaults(func=cmd_vuln)

    s = sub.add_parser("compare", help="paired comparison of several methods")
    _add_scenario(s)
    s.add_argument("--methods", type=lambda t: [m.strip() for m in t.split(",") if m.strip()], help="e.g. am,lnrt")
    s.add_argument("--configs", nargs="+", help="one config document per method")
    s.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CaseFormatError as exc:
        print(f"fixture error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
