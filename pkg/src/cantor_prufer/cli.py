"""Command-line front end.

Exit codes: 0 all gating checks pass; 1 a report failed; 2 a construction
constraint was violated; 3 numerical failure; 64 bad usage or config;
65 a stored file does not match its manifest digest.
"""

import argparse
import configparser
import json
import os
import sys
import time
from dataclasses import dataclass, replace

from . import __version__
from .construction import (PROFILES, builtin_profile, config_to_ini, load_config, run_construction,
                           run_wvn, stored_reports, wvn_report, _apply)
from .errors import CantorPruferError, ConfigError
from .plots import bumps_svg, eigenfunction_svg
from .potentials import potential_csv
from .storage import check_digests, load_trajectory, run_meta_json, sha256_bytes, trajectory_csv

MANIFEST_SCHEMA = "cantor_prufer manifest v1"
EXIT_PASS, EXIT_FAIL = 0, 1
DETERMINISM = ("no random state; outputs depend only on config.ini and the package version, "
               "so reruns give identical file digests")
# fields filled by the split-point search; verification does not recompute them
_CARRIED = ("split_choice", "growth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("UsageError", message, 64)
        sys.exit(64)


def _emit_error(kind, message, code, **extra):
    rec = {"error": kind, "message": message, "exit_code": code}
    rec.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(rec, sort_keys=True, default=str), file=sys.stderr)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="ini profile layered over a built-in one")
    common.add_argument("--profile", choices=PROFILES, help="built-in profile (default: default)")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory")
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="worker bound for probe fan-out (recorded; probes share one kernel)")
    common.add_argument("--mode", choices=("strict", "toy"), help="override the profile mode")
    common.add_argument("--no-plot", action="store_true", help="skip SVG output")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress lines")

    p = _Parser(prog="cantor-prufer", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth-wvn", parents=[common],
                   help="reference potential with one embedded eigenvalue")
    sub.add_parser("split", parents=[common], help="one splitting stage")
    c = sub.add_parser("construct", parents=[common], help="multi-stage construction")
    c.add_argument("--stages", type=int, default=1, metavar="N")
    v = sub.add_parser("verify", parents=[common], help="re-verify a stored run directory")
    v.add_argument("run_dir", help="directory holding manifest.json")
    sub.add_parser("params", parents=[common], help="print the resolved profile")
    return p


def resolve_config(args):
    if args.config and args.profile:
        text = open(args.config, encoding="utf-8").read() if os.path.exists(args.config) else None
        if text is None:
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_config(text, base=args.profile)
    elif args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg = load_config(path=args.config)
    else:
        cfg = builtin_profile(args.profile or "default")
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    return cfg


class Output:
    """Collects written files and their digests for the manifest."""

    def __init__(self, root):
        self.root = root
        self.files = {}
        os.makedirs(root, exist_ok=True)

    def write(self, name, text):
        data = text.encode("utf-8")
        path = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
        self.files[name] = {"sha256": sha256_bytes(data), "bytes": len(data)}

    def manifest(self, command, cfg, cfg_text, status, code, stats, error=None):
        m = {"schema": MANIFEST_SCHEMA, "command": command, "version": __version__,
             "profile": cfg.name, "mode": cfg.mode, "config_sha256": sha256_bytes(cfg_text.encode()),
             "determinism": DETERMINISM, "files": dict(sorted(self.files.items())),
             "stats": stats, "status": status, "exit_code": code}
        if error is not None:
            m["error"] = error
        with open(os.path.join(self.root, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(json.dumps(m, indent=2, sort_keys=True) + "\n")


def _write_stage(out, traj, report, prefix, report_prefix):
    out.write(f"{prefix}trajectory.csv", trajectory_csv(traj))
    out.write(f"{prefix}run.json", run_meta_json(traj) + "\n")
    out.write(f"{report_prefix}report.json", report.to_json() + "\n")
    out.write(f"{report_prefix}report.csv", report.to_csv())


def _print_report(report, log):
    tag = f"stage {report.stage_id}"
    log(f"{tag}: {'PASS' if report.passed else 'FAIL'}")
    for c in report.checks:
        if not c.passed:
            log(f"  {'FAIL' if c.gating else 'info'} {c.name}: measured {c.measured:.6g}, "
                f"required {c.tolerance}" + (f" ({c.note})" if c.note else ""))


def _stats(t0, trajs):
    return {"wall_clock_s": round(time.perf_counter() - t0, 3),
            "steps": [int(t.n_steps) for t in trajs],
            "rhs_evaluations": [int(t.n_rhs) for t in trajs],
            "x_end": [float(t.x_end) for t in trajs]}


def cmd_synth_wvn(args, cfg, cfg_text, out, log):
    t0 = time.perf_counter()
    traj, report = run_wvn(cfg, log)
    out.write("potential.csv", potential_csv(traj.xs, traj.v, stride=cfg.controls.decimation))
    _write_stage(out, traj, report, "", "")
    if not args.no_plot:
        out.write("eigenfunction.svg", eigenfunction_svg(traj))
    _print_report(report, log)
    return report.passed, _stats(t0, [traj]), (traj, report)


def _construct_outputs(args, cfg, state, out, flat):
    trajs = [r.traj for r in state.stages]
    xs, vs = state.frozen_potential()
    out.write("potential.csv", potential_csv(xs, vs, stride=cfg.controls.decimation))
    out.write("tree.csv", state.tree.to_csv())
    for rec in state.stages:
        if rec.report is None:
            continue
        if flat:
            _write_stage(out, rec.traj, rec.report, "", "")
        else:
            n = rec.stage.n
            _write_stage(out, rec.traj, rec.report, f"runs/stage{n}.", f"reports/stage{n}.")
    if not args.no_plot and trajs:
        if flat:
            out.write("eigenfunction.svg", eigenfunction_svg(trajs[0]))
        else:
            out.write("bumps.svg", bumps_svg(state))


def _summary(state):
    lines = [f"stages completed: {state.n}", f"passed: {state.passed}"]
    if state.failed:
        lines.append(f"failure: {state.failed}")
    for rec in state.stages:
        rep = rec.report
        if rep is None:
            continue
        s = rep.stage
        lines.append(f"stage {rec.stage.n}: {'PASS' if rep.passed else 'FAIL'} g={rec.stage.g:g} "
                     f"g~={rec.stage.g_tilde:.6g} x_start={rec.stage.x_start:.6g} "
                     f"x_end={rec.traj.x_end:.6g} Er={s.get('Er', float('nan')):.4g} "
                     f"sup|int V|={s.get('cond_integral_sup', float('nan')):.4g}")
        if rec.choice is not None:
            lines.append(f"  split at x={rec.choice.x_split:.6g} (binding: {rec.choice.binding})")
        for c in rep.checks:
            if "mass_conservation" in c.name or "connection" in c.name:
                lines.append(f"  {c.name}: {c.measured:.6g} {c.tolerance} "
                             f"{'PASS' if c.passed else 'FAIL'}")
    leaves = state.tree.leaves()
    lines.append(f"leaves: {len(leaves)}")
    for nd in leaves:
        lines.append(f"  k = {nd.energy.value!r} mass = {nd.mass:.6g}")
    return "\n".join(lines) + "\n"


def _run_construct(args, cfg, out, log, stages, flat):
    t0 = time.perf_counter()
    try:
        state, _ = run_construction(cfg, max_stage=stages, log=log)
    except CantorPruferError as exc:
        state = getattr(exc, "partial_state", None)
        if state is not None and state.stages:
            _construct_outputs(args, cfg, state, out, flat)
            out.write("summary.txt", _summary(state))
        exc.stats = _stats(t0, [r.traj for r in state.stages] if state else [])
        exc.payload = state
        raise
    _construct_outputs(args, cfg, state, out, flat)
    if not flat:
        out.write("summary.txt", _summary(state))
    for rec in state.stages:
        _print_report(rec.report, log)
    return state.passed, _stats(t0, [r.traj for r in state.stages]), state


def cmd_split(args, cfg, cfg_text, out, log):
    return _run_construct(args, cfg, out, log, 1, flat=True)


def cmd_construct(args, cfg, cfg_text, out, log):
    if args.stages < 1:
        raise ConfigError("--stages must be >= 1")
    return _run_construct(args, cfg, out, log, args.stages, flat=False)


def _read(root, name):
    with open(os.path.join(root, name), encoding="utf-8") as fh:
        return fh.read()


def _stored_stage_names(manifest):
    files = manifest["files"]
    if "run.json" in files:
        return [("", "")]
    ns = sorted(int(name[len("runs/stage"):-len(".run.json")]) for name in files
                if name.startswith("runs/stage") and name.endswith(".run.json"))
    return [(f"runs/stage{n}.", f"reports/stage{n}.") for n in ns]


def cmd_verify(args, log):
    root = args.run_dir
    try:
        manifest = json.loads(_read(root, "manifest.json"))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read manifest: {exc}") from exc
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ConfigError("manifest schema not recognised")
    check_digests(manifest["files"], root)
    cfg = load_config(_read(root, "config.ini"), base=None)
    if args.config:
        # only the tolerances of an extra config apply to a stored run
        cp = configparser.ConfigParser()
        try:
            cp.read(args.config, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse config: {exc}") from exc
        tight = configparser.ConfigParser()
        if cp.has_section("tolerances"):
            tight["tolerances"] = dict(cp.items("tolerances"))
        cfg = _apply(cfg, tight)
    trajs, stored = [], []
    for prefix, rprefix in _stored_stage_names(manifest):
        trajs.append(load_trajectory(_read(root, f"{prefix}run.json"),
                                     _read(root, f"{prefix}trajectory.csv")))
        stored.append(json.loads(_read(root, f"{rprefix}report.json")))
    if not trajs:
        raise ConfigError("manifest lists no stored stage runs")
    contexts = [s.get("extra", {}).get("context", {}) for s in stored]
    if manifest["command"] == "synth-wvn":
        rebuilt = [wvn_report(trajs[0], cfg, contexts[0])]
    else:
        _, rebuilt = stored_reports(cfg, trajs, contexts)
    all_pass = True
    for rep, old in zip(rebuilt, stored):
        for key in _CARRIED:
            if key in old.get("extra", {}):
                rep.extra[key] = old["extra"][key]
        same = json.loads(rep.to_json()) == old
        log(f"stage {rep.stage_id}: rebuilt report {'identical to' if same else 'differs from'} "
            "stored report")
        _print_report(rep, log)
        all_pass &= rep.passed
    return all_pass, rebuilt


def cmd_params(args, cfg, log):
    sys.stdout.write(config_to_ini(cfg))
    return True


COMMANDS = {"synth-wvn": cmd_synth_wvn, "split": cmd_split, "construct": cmd_construct}


@dataclass
class CommandResult:
    """Exit code plus the in-memory result (state, run or reports) of a command."""

    exit_code: int
    payload: object = None
    out_dir: str | None = None


def run(argv=None) -> CommandResult:
    """Run one command as the console script would, keeping its results."""
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    cfg = cfg_text = out = None
    try:
        if args.command == "verify":
            passed, reports = cmd_verify(args, log)
            return CommandResult(EXIT_PASS if passed else EXIT_FAIL, reports, args.run_dir)
        cfg = resolve_config(args)
        if args.command == "params":
            cmd_params(args, cfg, log)
            return CommandResult(EXIT_PASS, cfg)
        cfg_text = config_to_ini(cfg)
        out = Output(args.out)
        out.write("config.ini", cfg_text)
        passed, stats, payload = COMMANDS[args.command](args, cfg, cfg_text, out, log)
        stats["jobs"] = args.jobs
        code = EXIT_PASS if passed else EXIT_FAIL
        out.manifest(args.command, cfg, cfg_text, "PASS" if passed else "FAIL", code, stats)
        log(f"wrote {len(out.files) + 1} files to {out.root}")
        return CommandResult(code, payload, out.root)
    except CantorPruferError as exc:
        code = exc.exit_code
        extra = {"constraint": getattr(exc, "constraint", None),
                 "margin": getattr(exc, "margin", None), "stage": getattr(exc, "stage", None)}
        _emit_error(type(exc).__name__, str(exc), code, **extra)
        if out is not None:
            out.manifest(args.command, cfg, cfg_text, "FAIL", code,
                         getattr(exc, "stats", {}), error={"type": type(exc).__name__,
                                                           "message": str(exc), **extra})
        return CommandResult(code, getattr(exc, "payload", None), out.root if out else None)
    except OSError as exc:
        _emit_error("OSError", str(exc), 64)
        return CommandResult(64)


def main(argv=None):
    return run(argv).exit_code


if __name__ == "__main__":
    sys.exit(main())
