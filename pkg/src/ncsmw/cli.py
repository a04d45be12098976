"""Command line: run nodes, manage components, analyze task sets, run experiments."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_DIVERGED = 4
EXIT_NOT_FOUND = 5

EXPERIMENTS = ("rm-table", "stress", "upgrade", "migrate", "inversion", "lta-outage", "script")
ANALYSES = ("util", "rm", "edf", "rmpip", "rta", "simulate")


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"ncsmw: {msg}", file=sys.stderr)


# -- node ---------------------------------------------------------------------------

def cmd_node_run(args) -> int:
    from .config import ConfigError, load_node_config, parse_endpoint
    from .netnode import NetNode

    try:
        cfg = load_node_config(args.config)
        if args.node_id:
            cfg.node_id = args.node_id
        if args.listen:
            cfg.listen = parse_endpoint(args.listen)
        if args.time:
            cfg.time = args.time
    except (ConfigError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    if cfg.time == "sim":
        raise CommandError("--time sim runs in a single process only; networked nodes need --time real", EXIT_CONFIG)
    try:
        node = NetNode(cfg)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    try:
        node.start()
    except OSError as exc:
        raise CommandError(f"cannot listen on {cfg.listen[0]}:{cfg.listen[1]}: {exc}", EXIT_RUNTIME) from None
    host, port = node.address or ("-", 0)
    print(f"node {cfg.node_id} up on {host}:{port}", flush=True)
    try:
        node.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


# -- admin ----------------------------------------------------------------------------

def cmd_admin(args) -> int:
    from .config import parse_endpoint
    from .netnode import AdminError, admin_request

    try:
        address = parse_endpoint(args.node)
        config = json.loads(args.config) if args.config else {}
    except (ValueError, json.JSONDecodeError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    if not isinstance(config, dict):
        raise CommandError("--config must be a JSON object", EXIT_CONFIG)
    if getattr(args, "gain", None):
        config["gain"] = args.gain
    content = {"profile": args.profile}
    if args.action == "deploy":
        if not args.kind:
            raise CommandError("deploy needs --kind", EXIT_CONFIG)
        msg_type, content = "Deploy", {**content, "kind": args.kind, "config": config}
    elif args.action == "upgrade":
        msg_type = "Upgrade"
        content["config"] = config
        if args.kind:
            content["kind"] = args.kind
    else:
        if not args.dest:
            raise CommandError("migrate needs --dest", EXIT_CONFIG)
        msg_type, content = "Migrate", {**content, "dest": args.dest}
    try:
        report = admin_request(address, msg_type, content, timeout_s=args.timeout)
    except AdminError as exc:
        raise CommandError(str(exc), EXIT_RUNTIME) from None
    print(json.dumps(report, sort_keys=True))
    if report.get("ok"):
        return EXIT_OK
    error = str(report.get("error", ""))
    if error.startswith("ProfileNotFound") or "no factory" in error:
        return EXIT_NOT_FOUND
    return EXIT_RUNTIME


# -- analyze ----------------------------------------------------------------------------

def _fmt_value(v) -> str:
    from fractions import Fraction

    if isinstance(v, Fraction):
        return str(v.numerator) if v.denominator == 1 else repr(float(v))
    return str(v)


def cmd_analyze(args) -> int:
    from . import sched

    try:
        ts = sched.load_taskset(args.taskset)
    except (sched.TaskFileError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    try:
        if args.analysis == "util":
            print(f"U = {sched.utilization(ts)!r}")
        elif args.analysis == "rm":
            u, bound = sched.utilization(ts), sched.rm_lub(len(ts))
            print(f"U = {u!r}  bound = {bound!r}  {sched.rm_schedulable_lub(ts).value}")
        elif args.analysis == "edf":
            ok = sched.edf_schedulable(ts)
            print(f"U = {sched.utilization(ts)!r}  {'schedulable' if ok else 'not schedulable'}")
        elif args.analysis == "rmpip":
            derived = sched.blocking_from_sections(ts)
            ts2 = sched.with_blocking(ts, {t.name: max(t.B, derived[t.name]) for t in ts})
            for t in ts2:
                print(f"{t.name}: B = {_fmt_value(t.B)}")
            print(sched.rm_pip_schedulable(ts2).value)
        elif args.analysis == "rta":
            derived = sched.blocking_from_sections(ts)
            ts2 = sched.with_blocking(ts, {t.name: max(t.B, derived[t.name]) for t in ts})
            for name, r in sched.response_time_analysis(ts2).items():
                print(f"{name}: R = {'divergent' if r == sched.DIVERGENT else _fmt_value(r)}")
        else:
            trace = sched.simulate_schedule(ts, policy=args.policy, pip=args.pip == "on", horizon_ms=args.horizon)
            if args.out:
                with open(args.out, "w", newline="") as fh:
                    trace.write_csv(fh)
                for name, r in sorted(trace.worst_response().items()):
                    print(f"{name}: worst response {r}")
                print(f"deadline misses: {len(trace.deadline_misses)}")
            else:
                trace.write_csv(sys.stdout)
            if trace.error:
                raise CommandError(trace.error, EXIT_RUNTIME)
    except (sched.AnalysisAssumptionError, sched.SimulationError, ValueError) as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    return EXIT_OK


# -- experiment --------------------------------------------------------------------------

def cmd_experiment(args) -> int:
    from .pendulum import experiments as ex
    from .pendulum.plant import PlantConfigError, load_plant_config

    out = Path(args.out)
    try:
        plant = load_plant_config(args.plant)
    except PlantConfigError as exc:
        raise CommandError(str(exc), EXIT_CONFIG) from None
    name, seed = args.name, args.seed
    bundles = {}
    if name == "rm-table":
        bundles[""] = ex.rm_table_experiment(seed)
    elif name == "stress":
        bundles[""] = ex.stress_experiment(seed, equal_priority=args.equal_priority, plant=plant)
    elif name == "upgrade":
        bundles[""] = ex.upgrade_experiment(seed, plant=plant)
    elif name == "migrate":
        bundles[""] = ex.migrate_experiment(seed, plant=plant)
    elif name == "inversion":
        bundles[""] = ex.inversion_experiment(args.pip == "on")
    elif name == "lta-outage":
        base, outage = ex.lta_outage_experiment(seed, depth=args.depth, outage_steps=args.outage_steps, plant=plant)
        outage.metrics["equal_to_baseline"] = int(ex.actuator_inputs(base) == ex.actuator_inputs(outage))
        bundles["baseline"], bundles["outage"] = base, outage
    else:
        if not args.script:
            raise CommandError("the script experiment needs --script FILE", EXIT_CONFIG)
        try:
            script = ex.parse_script(Path(args.script).read_text(), args.script)
        except OSError as exc:
            raise CommandError(f"cannot read {args.script}: {exc}", EXIT_CONFIG) from None
        except ex.ScriptError as exc:
            raise CommandError(str(exc), EXIT_CONFIG) from None
        cfg = ex.ExperimentConfig(stress_equal_priority=args.equal_priority)
        bundles[""] = ex.run_experiment(script, cfg, plant)
    diverged = False
    for sub, b in bundles.items():
        b.write(out / sub if sub else out)
        if sub:
            print(f"[{sub}]")
        print(b.summary_text(), end="")
        diverged |= b.status == "diverged"
    if diverged:
        _err(f"plant diverged; partial traces kept in {out}")
        return EXIT_DIVERGED
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ncsmw", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    node = sub.add_parser("node", help="run a middleware node").add_subparsers(dest="node_command", required=True)
    run = node.add_parser("run", help="serve until interrupted")
    run.add_argument("--config", required=True)
    run.add_argument("--node-id")
    run.add_argument("--listen", help="host:port")
    run.add_argument("--time", choices=("real", "sim"))
    run.set_defaults(func=cmd_node_run)

    admin = sub.add_parser("admin", help="deploy, upgrade or migrate a component")
    admin.add_argument("action", choices=("deploy", "upgrade", "migrate"))
    admin.add_argument("profile")
    admin.add_argument("--node", required=True, help="host:port of the node hosting the profile")
    admin.add_argument("--kind", help="component kind (deploy; optional for upgrade)")
    admin.add_argument("--gain", help="controller gain label, shorthand for --config '{\"gain\": ...}'")
    admin.add_argument("--config", help="component config as a JSON object")
    admin.add_argument("--dest", help="destination node id (migrate)")
    admin.add_argument("--timeout", type=float, default=10.0)
    admin.set_defaults(func=cmd_admin)

    an = sub.add_parser("analyze", help="schedulability analysis of a task-set file")
    an.add_argument("taskset")
    an.add_argument("analysis", choices=ANALYSES)
    an.add_argument("--policy", choices=("fixed_priority_rm", "edf"), default="fixed_priority_rm")
    an.add_argument("--pip", choices=("on", "off"), default="off")
    an.add_argument("--horizon", type=int, help="simulation horizon in ms (default: hyperperiod)")
    an.add_argument("--out", help="write the simulation trace CSV here instead of stdout")
    an.set_defaults(func=cmd_analyze)

    exp = sub.add_parser("experiment", help="run a scripted experiment on simulated time")
    exp.add_argument("name", choices=EXPERIMENTS)
    exp.add_argument("--out", required=True, help="output directory for the trace bundle")
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--plant", default="pendubot", help="pendubot, cartpole or a config file path")
    exp.add_argument("--pip", choices=("on", "off"), default="on")
    exp.add_argument("--equal-priority", action="store_true", help="stress task shares the control dispatcher")
    exp.add_argument("--depth", type=int, default=4, help="block depth for lta-outage")
    exp.add_argument("--outage-steps", type=int, default=3)
    exp.add_argument("--script", help="experiment script file (for 'script')")
    exp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
