"""
Command line entry point ``airmhe``.

Exit codes: 0 when every checked assertion holds, 1 when one fails,
2 on a configuration error.
"""

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from . import export, fdi
from . import harness as hx
from . import simulator as sim
from .errors import AirMheError, ConfigError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


# ----------------------------------------------------------------------
# Config handling


def load_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    return data


def _coerce(value, current):
    if dataclasses.is_dataclass(current) and isinstance(value, dict):
        return apply_overrides(current, value)
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(_coerce(v, current[0] if current else None) for v in value)
    if isinstance(current, float) and isinstance(value, int):
        return float(value)
    return value


def apply_overrides(obj, overrides):
    """Copy of dataclass ``obj`` with fields replaced from ``overrides``."""
    names = {f.name for f in dataclasses.fields(obj)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown keys for {type(obj).__name__}: {sorted(unknown)}")
    return dataclasses.replace(obj, **{k: _coerce(v, getattr(obj, k)) for k, v in overrides.items()})


def _with_seed(cfg, seed):
    if seed is None:
        return cfg
    if hasattr(cfg, "common"):
        return dataclasses.replace(cfg, common=dataclasses.replace(cfg.common, seed=seed))
    return cfg


# ----------------------------------------------------------------------
# Subcommands


def cmd_simulate(args, conf):
    scen = dict(conf.get("scenario", {}))
    if args.seed is not None:
        scen.setdefault("noise", {})["seed"] = args.seed
    scfg = sim.scenario_from_dict(scen)
    sc = sim.build_scenario(scfg)
    est = conf.get("estimator", {})
    alg = est.get("algorithm", "CMHE")
    th = conf.get("thresholds")
    thresholds = fdi.Thresholds(float(th["J_alpha"]), float(th["J_vc"])) if th else fdi.Thresholds.disabled()
    common = hx.Common(p_d=float(est.get("p_d", 1.0)), t_s=sc.t_s, horizon=int(est.get("horizon", 5)))
    loop = common.loop(alg, float(est.get("q_d", 1.0)), thresholds=thresholds)
    tr = fdi.run_closed_loop(sc, loop)
    rows = sc.measurements.rows()
    export.write_loop_log(args.out / "loop.csv", tr, rows, thresholds)
    faults = scfg.faults
    summary = {"algorithm": alg, "samples": len(tr), "isolation_times": fdi.isolation_times(tr, faults, sc.t_s),
               "false_alarms": fdi.false_alarms(tr, faults), "terminated": tr.terminated,
               "timing": hx.timing_summary(tr)}
    export.write_json(args.out / "summary.json", summary)
    print(json.dumps(export.plain(summary), indent=2))
    return EXIT_OK


def cmd_calibrate(args, conf):
    cfg = _with_seed(apply_overrides(hx.Fig4Config(), conf), args.seed)
    cal = hx.run_cells(hx._fig4_calibrate, [{"key": a, "algorithm": a, "cfg": cfg} for a in ("CMHE", "UMHE")],
                       args.workers)
    out = {r["algorithm"]: {"J_alpha": r["thresholds"].J_alpha, "J_vc": r["thresholds"].J_vc,
                            "bank_false_alarms": r["bank_false_alarms"]} for r in cal}
    export.write_json(args.out / "thresholds.json", out)
    print(json.dumps(out, indent=2))
    return EXIT_OK if all(v["bank_false_alarms"] == 0 for v in out.values()) else EXIT_FAIL


def cmd_fig2(args, conf):
    cfg = _with_seed(apply_overrides(hx.Fig2Config(), conf), args.seed)
    rows = hx.run_fig2(cfg, args.workers)
    export.write_csv(args.out / "fig2.csv", "fig2",
                     [("scenario", "id"), ("algorithm", "name"), ("q_d", "(m/s^2)^2"), ("rms_vc", "m/s"),
                      ("rms_alpha", "rad"), ("active_samples", "count")],
                     [[r["scenario"], r["algorithm"], r["q_d"], r["rms_vc"], r["rms_alpha"], r["active_samples"]]
                      for r in rows])
    n = len(rows[0]["residual_vc1"])
    cols = [("t", "s")] + [(f"r_vc1_s{r['scenario']}_{r['algorithm']}_q{r['q_d']}", "m/s") for r in rows]
    export.write_csv(args.out / "fig2_residuals.csv", "fig2_residuals", cols,
                     [[k * cfg.common.t_s] + [r["residual_vc1"][k] for r in rows] for k in range(n)])
    return _finish(args, "fig2", hx.fig2_verdict(rows))


def cmd_fig3(args, conf):
    cfg = _with_seed(apply_overrides(hx.Fig3Config(), conf), args.seed)
    rows = hx.run_fig3(cfg, args.workers)
    export.write_csv(args.out / "fig3.csv", "fig3",
                     [("algorithm", "name"), ("q_d", "(m/s^2)^2"), ("amplitude", "kts"), ("rms", "m/s"),
                      ("active_samples", "count"), ("active_before", "count")],
                     [[r["algorithm"], r["q_d"], r["amplitude"], r["rms"], r["active_samples"], r["active_before"]]
                      for r in rows])
    return _finish(args, "fig3", hx.fig3_verdict(rows))


def cmd_fig4(args, conf):
    cfg = _with_seed(apply_overrides(hx.Fig4Config(), conf), args.seed)
    cal, rows = hx.run_fig4(cfg, args.workers)
    export.write_csv(args.out / "fig4_thresholds.csv", "fig4_thresholds",
                     [("algorithm", "name"), ("J_alpha", "rad"), ("J_vc", "m/s"), ("bank_false_alarms", "count")],
                     [[r["algorithm"], r["thresholds"].J_alpha, r["thresholds"].J_vc, r["bank_false_alarms"]]
                      for r in cal])
    export.write_csv(args.out / "fig4.csv", "fig4",
                     [("case", "name"), ("algorithm", "name"), ("minimal_detectable", "kts"), ("monotone", "flag"),
                      ("prefix_false_alarms", "list")],
                     [[r["case"], r["algorithm"], "" if r["minimal_detectable"] is None else r["minimal_detectable"],
                       r["monotone"], " ".join(r["prefix_false_alarms"])] for r in rows])
    return _finish(args, "fig4", hx.fig4_verdict(cal, rows))


def cmd_fig5(args, conf):
    cfg = _with_seed(apply_overrides(hx.Fig5Config(), conf), args.seed)
    rows = hx.run_fig5(cfg, args.workers)
    for r in rows:
        export.write_loop_log(args.out / f"fig5_{r['algorithm']}.csv", r["trace"],
                              r["scenario"].measurements.rows(), r["thresholds"])
    return _finish(args, "fig5", hx.fig5_verdict(rows))


def cmd_verify(args, conf):
    seed = 0 if args.seed is None else args.seed
    results = hx.run_property_suites(seed=seed, quick=args.quick)
    for r in results:
        print(r.line())
    export.write_json(args.out / "verify.json", [dataclasses.asdict(r) for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_sensitivity(args, conf):
    seed = 0 if args.seed is None else args.seed
    rep = hx.sensitivity_case(seed, int(conf.get("horizon", 5)), int(conf.get("n_bounds", 2)))
    path = args.out / "sensitivity.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(rep.to_json() + "\n")
    s = rep.summary()
    for k, v in s.items():
        print(f"{k:<32} {v}")
    ok = s["min_eig_X_minus_Xa"] >= -1e-8 and s["route_gap_X"] <= 1e-9 and s["form_gap_S"] <= 1e-9
    return EXIT_OK if ok else EXIT_FAIL


def _finish(args, name, verdict):
    export.write_json(args.out / f"{name}_summary.json", verdict)
    print(json.dumps(export.plain(verdict), indent=2))
    return EXIT_OK if verdict["passed"] else EXIT_FAIL


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "fig2": cmd_fig2, "fig3": cmd_fig3,
            "fig4": cmd_fig4, "fig5": cmd_fig5, "verify": cmd_verify, "sensitivity": cmd_sensitivity}


def build_parser():
    p = argparse.ArgumentParser(prog="airmhe", description="Moving horizon residual generator experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--workers", type=int, default=1)
        if name == "verify":
            sp.add_argument("--quick", action="store_true", help="smaller batches")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        conf = load_config(args.config)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        return COMMANDS[args.command](args, conf)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AirMheError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
