"""Command-line front end.

Subcommands:
  run     execute one experiment from a JSON config
  sweep   execute the Cartesian product of the config's sweep axes
  hetero  measure and report data heterogeneity for a config
  verify  run the package's property battery
  plot    render metrics CSVs to a standalone SVG

Exit codes: 0 ok, 1 I/O failure, 2 invalid config, 3 divergence (or failed
sweep cells), 4 verification failure.
"""

import argparse
import copy
import csv
import importlib.resources
import itertools
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import jsonschema

from . import __version__, bounds, svg
from . import clustering as clustering_mod
from . import engine as engine_mod
from . import fedsets, tasks
from . import verify as verify_mod
from ._kernels import backend_name
from .errors import ConfigurationError, DivergenceError, FedClusterError, IngestionError

CSV_HEADER = "run_id,algorithm,seed,round,cycle_count,train_loss,grad_sq_norm,lr,wall_ms"

SWEEP_AXIS_ORDER = ("M", "rho_device", "rho_cluster", "optimizer", "seed")


def load_schema():
    text = importlib.resources.files("fedcluster").joinpath("config.schema.json").read_text()
    return json.loads(text)


def load_config(path):
    """Read, schema-validate, and default-fill a config file."""
    try:
        with open(path) as fh:
            conf = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(conf), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        where = "$" + "".join(
            f"[{p}]" if isinstance(p, int) else f".{p}" for p in e.absolute_path
        )
        raise ConfigurationError(f"{path}: {where}: {e.message}")
    return resolve_config(conf)


def resolve_config(conf):
    """Fill every optional field so the echoed config pins the run exactly."""
    conf = copy.deepcopy(conf)
    conf.setdefault("seed", 0)
    seed = conf["seed"]
    task = conf["task"]
    task.setdefault("n_classes", 1)
    task.setdefault("hidden", 32)

    data = conf["data"]
    if data["source"] == "synth":
        if "synth" not in data:
            raise ConfigurationError("data.synth section required when source is synth")
        data["synth"].setdefault("n_classes", max(task["n_classes"], 1))
        data["synth"].setdefault("spread", 3.0)
        data["synth"].setdefault("seed", seed)
    elif "idx" not in data:
        raise ConfigurationError("data.idx section required when source is idx")
    data["partition"].setdefault("seed", seed)

    if conf["algorithm"] == "fedcluster" and "clustering" not in conf:
        raise ConfigurationError("clustering section required for algorithm fedcluster")
    clus = conf.setdefault("clustering", {"strategy": "random_uniform", "M": 1})
    clus.setdefault("seed", seed)
    if clus["strategy"] in ("random_uniform", "major_class") and "M" not in clus:
        raise ConfigurationError(f"clustering.M required for strategy {clus['strategy']}")
    if clus["strategy"] == "major_class" and "rho_cluster" not in clus:
        raise ConfigurationError("clustering.rho_cluster required for strategy major_class")

    eng = conf["engine"]
    eng.setdefault("participation", 1.0)
    eng.setdefault("reshuffle", True)
    eng.setdefault("nominal_mass_averaging", False)

    sch = conf["schedule"]
    if sch["kind"] == "constant" and "eta" not in sch:
        raise ConfigurationError("schedule.eta required for kind constant")
    if sch["kind"] == "inverse_time":
        if "mu" not in sch:
            raise ConfigurationError("schedule.mu required for kind inverse_time")
        sch.setdefault("L", 1.0)

    opt = conf["optimizer"]
    opt.setdefault("batch_size", 1)
    opt.setdefault("momentum", 0.5)
    opt.setdefault("beta1", 0.9)
    opt.setdefault("beta2", 0.999)
    opt.setdefault("eps", 1e-8)
    opt.setdefault("mu_prox", 0.1)

    if "sweep" in conf:
        sw = conf["sweep"]
        sw.setdefault("include_fedavg_baseline", False)
        sw.setdefault("target_fraction", 0.6)
        sw.setdefault("scale_lr_by_clusters", False)
    het = conf.setdefault("hetero", {})
    het.setdefault("probes", 16)
    het.setdefault("probe_scale", 1.0)
    conf.setdefault("summary_bounds", True)
    return conf


def build_task(conf):
    t = conf["task"]
    return tasks.TaskModel(kind=t["kind"], feature_dim=t["feature_dim"],
                           n_classes=t["n_classes"], hidden=t["hidden"])


def build_federation(conf):
    data = conf["data"]
    if data["source"] == "synth":
        s = data["synth"]
        pool = fedsets.synth_pool(s["n_classes"], conf["task"]["feature_dim"],
                                  s["samples_per_class"], s["spread"], s["seed"])
    else:
        pool = fedsets.load_idx(data["idx"]["images"], data["idx"]["labels"])
        if pool.feature_dim != conf["task"]["feature_dim"]:
            raise ConfigurationError(
                f"task.feature_dim={conf['task']['feature_dim']} but IDX data "
                f"has dim {pool.feature_dim}"
            )
    part = data["partition"]
    fed = fedsets.partition(pool, fedsets.PartitionConfig(
        n=part["n"], samples_per_device=part["samples_per_device"],
        rho_device=part["rho_device"], seed=part["seed"]))
    task_classes = conf["task"]["n_classes"]
    if conf["task"]["kind"] != "quadratic" and fed.n_classes > task_classes:
        raise ConfigurationError(
            f"task.n_classes={task_classes} but data has {fed.n_classes} classes"
        )
    return fed


def build_clustering(conf, fed):
    c = conf["clustering"]
    if c["strategy"] == "singleton":
        return clustering_mod.cluster_singleton(fed)
    if c["strategy"] == "major_class":
        return clustering_mod.cluster_major_class(fed, c["M"], c["rho_cluster"], c["seed"])
    return clustering_mod.cluster_random_uniform(fed, c["M"], c["seed"])


def build_schedule(conf):
    s = conf["schedule"]
    if s["kind"] == "constant":
        return engine_mod.constant_lr(s["eta"])
    if s["kind"] == "inverse_time":
        return engine_mod.inverse_time(mu=s["mu"], L=s["L"])
    return engine_mod.constant_theory()


def build_optimizer(conf):
    o = conf["optimizer"]
    return engine_mod.LocalOptimizerSpec(
        kind=o["kind"], batch_size=o["batch_size"], momentum=o["momentum"],
        beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], mu_prox=o["mu_prox"])


def default_run_id(conf):
    bits = [conf["algorithm"]]
    if conf["algorithm"] == "fedcluster":
        bits.append(f"M{conf['clustering'].get('M', 1)}")
    bits.append(f"s{conf['seed']}")
    return "-".join(bits)


def execute_run(conf, threads=None):
    """Build and run one experiment; returns (RunLog, run_id)."""
    task = build_task(conf)
    fed = build_federation(conf)
    eng = conf["engine"]
    cfg = engine_mod.RunConfig(
        task=task, fed=fed,
        clustering=build_clustering(conf, fed),
        T=eng["T"], E=eng["E"], schedule=build_schedule(conf),
        optimizer=build_optimizer(conf), participation=eng["participation"],
        reshuffle=eng["reshuffle"],
        nominal_mass_averaging=eng["nominal_mass_averaging"],
        seed=conf["seed"], threads=threads if threads else eng.get("threads"),
    )
    if conf["algorithm"] == "fedavg":
        log = engine_mod.run_fedavg(cfg)
    else:
        log = engine_mod.run(cfg)
    return log, conf.get("run_id") or default_run_id(conf)


def write_metrics_csv(path, log, run_id):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_HEADER.split(","))
        for rec in log.records:
            wr.writerow([
                run_id, log.algorithm, log.seed, rec.round, rec.cycle_count,
                repr(rec.train_loss), repr(rec.grad_sq_norm), repr(rec.lr),
                f"{rec.wall_ms:.3f}",
            ])


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_echo(conf):
    echo = copy.deepcopy(conf)
    echo["resolved_by"] = {"package": "fedcluster", "version": __version__,
                           "backend": backend_name}
    return echo


def hetero_payload(conf, task, fed, clus):
    probes = clustering_mod.default_probes(
        task, conf["seed"], count=conf["hetero"]["probes"],
        scale=conf["hetero"]["probe_scale"])
    rep = clustering_mod.estimate_H(task, fed, clus, probes)
    payload = {
        "H_device_hat": rep.H_device_hat,
        "H_cluster_hat": rep.H_cluster_hat,
        "Gamma_device_hat": None,
        "Gamma_cluster_hat": None,
        "n_probes": rep.n_probes,
        "M": clus.M,
    }
    if task.kind == "quadratic":
        gd, gc = clustering_mod.estimate_Gamma(task, fed, clus)
        payload["Gamma_device_hat"] = gd
        payload["Gamma_cluster_hat"] = gc
    return payload


def run_summary(conf, log, run_id):
    summary = {
        "run_id": run_id,
        "algorithm": log.algorithm,
        "seed": log.seed,
        "backend": log.backend,
        "T": log.T, "M": log.M, "E": log.E,
        "initial_loss": log.records[0].train_loss,
        "final_loss": log.final_loss,
        "final_grad_sq": log.final_grad_sq,
        "avg_grad_norm": bounds.avg_grad_norm(log),
    }
    if not conf["summary_bounds"]:
        return summary
    task = build_task(conf)
    fed = build_federation(conf)
    if log.algorithm == "fedavg":
        clus = clustering_mod.cluster_random_uniform(fed, 1, conf["seed"])
    else:
        clus = build_clustering(conf, fed)
    probes = clustering_mod.default_probes(
        task, conf["seed"], count=conf["hetero"]["probes"],
        scale=conf["hetero"]["probe_scale"])
    inputs = bounds.collect_inputs(task, fed, clus, log.T, log.E, conf["seed"],
                                   probes=probes)
    C, nc_bound = bounds.bound_nonconvex(inputs)
    summary["constants"] = {
        "L_hat": inputs.L, "G_hat": inputs.G,
        "s_sq_max": float(inputs.s_sq.max()) if inputs.s_sq.size else 0.0,
        "H_cluster_hat": inputs.H_cluster,
        "Gamma_cluster_hat": inputs.Gamma_cluster,
        "f0_gap": inputs.f0_gap,
    }
    summary["bounds"] = {"C": C, "nonconvex": nc_bound}
    if inputs.mu is not None:
        gamma, B, sc_bound = bounds.bound_strongly_convex(inputs)
        summary["bounds"]["gamma"] = gamma
        summary["bounds"]["B"] = B
        summary["bounds"]["strongly_convex"] = sc_bound
    return summary


def _out_dir(conf, args, fallback):
    out = args.out or conf.get("out_dir") or fallback
    os.makedirs(out, exist_ok=True)
    return out


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise ConfigurationError(f"--seeds wants comma-separated integers, got {text!r}") from exc


def cmd_run(args):
    conf = load_config(args.config)
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
        if len(seeds) != 1:
            raise ConfigurationError("run takes exactly one seed; use sweep for several")
        conf["seed"] = seeds[0]
    log, run_id = execute_run(conf, threads=args.threads)
    out = _out_dir(conf, args, os.path.join("runs", run_id))
    write_metrics_csv(os.path.join(out, "metrics.csv"), log, run_id)
    write_json(os.path.join(out, "config.json"), config_echo(conf))
    write_json(os.path.join(out, "summary.json"), run_summary(conf, log, run_id))
    print(f"{run_id}: {log.T} rounds, final loss {log.final_loss:.6g}, "
          f"wrote {out}/metrics.csv")
    return 0


def _sweep_cells(conf, seeds_override):
    sw = conf["sweep"]
    axes = dict(sw["axes"])
    if seeds_override:
        axes["seed"] = seeds_override
    names = [a for a in SWEEP_AXIS_ORDER if a in axes]
    combos = itertools.product(*[axes[a] for a in names])
    cells = [dict(zip(names, combo)) for combo in combos]
    baselines = []
    if sw["include_fedavg_baseline"]:
        # the single-cluster baseline is insensitive to cluster-shape axes
        drop = ("M", "rho_cluster")
        seen = set()
        for cell in cells:
            key = tuple((k, v) for k, v in sorted(cell.items()) if k not in drop)
            if key not in seen:
                seen.add(key)
                baselines.append({k: v for k, v in cell.items() if k not in drop})
    return cells, baselines


def _apply_cell(conf, cell, algorithm):
    cc = copy.deepcopy(conf)
    cc["algorithm"] = algorithm
    cc.pop("sweep", None)
    cc.pop("run_id", None)
    if "seed" in cell:
        cc["seed"] = cell["seed"]
        cc["data"]["partition"]["seed"] = cell["seed"]
        if "synth" in cc["data"]:
            cc["data"]["synth"]["seed"] = cell["seed"]
        cc["clustering"]["seed"] = cell["seed"]
    if "M" in cell:
        cc["clustering"]["M"] = cell["M"]
    if "rho_device" in cell:
        cc["data"]["partition"]["rho_device"] = cell["rho_device"]
    if "rho_cluster" in cell:
        cc["clustering"]["rho_cluster"] = cell["rho_cluster"]
    if "optimizer" in cell:
        cc["optimizer"]["kind"] = cell["optimizer"]
    if conf["sweep"]["scale_lr_by_clusters"] and cc["schedule"]["kind"] == "constant" \
            and algorithm == "fedcluster":
        cc["schedule"]["eta"] = conf["schedule"]["eta"] / cc["clustering"]["M"]
    return cc


def _cell_run_id(cell, algorithm):
    bits = [algorithm]
    for name in SWEEP_AXIS_ORDER:
        if name in cell:
            short = {"M": "M", "rho_device": "rd", "rho_cluster": "rc",
                     "optimizer": "", "seed": "s"}[name]
            bits.append(f"{short}{cell[name]}")
    return "-".join(bits)


def cmd_sweep(args):
    conf = load_config(args.config)
    if "sweep" not in conf:
        raise ConfigurationError("config has no sweep section")
    seeds_override = _parse_seeds(args.seeds) if args.seeds else None
    cells, baselines = _sweep_cells(conf, seeds_override)
    out = _out_dir(conf, args, "runs/sweep")
    write_json(os.path.join(out, "config.json"), config_echo(conf))

    jobs = [("fedcluster", cell) for cell in cells]
    jobs += [("fedavg", cell) for cell in baselines]
    target_fraction = conf["sweep"]["target_fraction"]
    threads = engine_mod.resolve_threads(args.threads)

    def one(job):
        algorithm, cell = job
        run_id = _cell_run_id(cell, algorithm)
        try:
            cc = _apply_cell(conf, cell, algorithm)
            log, _ = execute_run(cc, threads=1 if threads > 1 else None)
            write_metrics_csv(os.path.join(out, f"{run_id}.csv"), log, run_id)
            initial = log.records[0].train_loss
            target = target_fraction * initial
            row = {
                "run_id": run_id, "algorithm": algorithm, "status": "ok",
                **{a: cell.get(a) for a in SWEEP_AXIS_ORDER},
                "initial_loss": initial, "target_loss": target,
                "rounds_to_target": bounds.rounds_to_target(log, target),
                "final_loss": log.final_loss,
                "avg_grad_sq": bounds.avg_grad_norm(log),
                "error": None,
            }
        except FedClusterError as exc:
            row = {
                "run_id": run_id, "algorithm": algorithm, "status": "failed",
                **{a: cell.get(a) for a in SWEEP_AXIS_ORDER},
                "initial_loss": None, "target_loss": None,
                "rounds_to_target": None, "final_loss": None,
                "avg_grad_sq": None, "error": f"{type(exc).__name__}: {exc}",
            }
        return row

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, jobs))
    else:
        rows = [one(job) for job in jobs]
    rows.sort(key=lambda r: r["run_id"])

    fields = ["run_id", "algorithm", "status", *SWEEP_AXIS_ORDER, "initial_loss",
              "target_loss", "rounds_to_target", "final_loss", "avg_grad_sq", "error"]
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    write_json(os.path.join(out, "summary.json"), {"cells": rows})

    failed = [r for r in rows if r["status"] != "ok"]
    print(f"sweep: {len(rows)} cells, {len(failed)} failed, wrote {out}/summary.csv")
    for r in failed:
        print(f"  {r['run_id']}: {r['error']}", file=sys.stderr)
    return 3 if failed else 0


def cmd_hetero(args):
    conf = load_config(args.config)
    task = build_task(conf)
    fed = build_federation(conf)
    if conf["algorithm"] == "fedavg":
        clus = clustering_mod.cluster_random_uniform(fed, 1, conf["seed"])
    else:
        clus = build_clustering(conf, fed)
    payload = hetero_payload(conf, task, fed, clus)
    out = _out_dir(conf, args, "runs/hetero")
    write_json(os.path.join(out, "hetero.json"), payload)
    print(f"M={payload['M']} probes={payload['n_probes']}")
    print(f"H_device_hat  = {payload['H_device_hat']:.6g}")
    print(f"H_cluster_hat = {payload['H_cluster_hat']:.6g}")
    if payload["Gamma_device_hat"] is not None:
        print(f"Gamma_device_hat  = {payload['Gamma_device_hat']:.6g}")
        print(f"Gamma_cluster_hat = {payload['Gamma_cluster_hat']:.6g}")
    else:
        print("Gamma: unavailable (needs the quadratic task)")
    return 0


def cmd_verify(args):
    results = verify_mod.run_all(inject=args.inject)
    payload = {
        "passed": all(r.passed for r in results),
        "properties": [
            {"name": r.name, "passed": r.passed, "detail": r.detail} for r in results
        ],
    }
    if args.out:
        write_json(args.out, payload)
    else:
        json.dump(payload, sys.stdout, indent=2)
        print()
    for r in results:
        mark = "ok " if r.passed else "FAIL"
        print(f"[{mark}] {r.name}: {r.detail}", file=sys.stderr)
    return 0 if payload["passed"] else 4


def cmd_plot(args):
    n = svg.render_plot(args.csvs, args.out, x_field=args.x, y_field=args.y,
                        log_y=args.log_y)
    print(f"wrote {args.out} ({n} series)")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fedcluster",
        description="Deterministic cluster-cycling federated learning simulator",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides config out_dir)")
        p.add_argument("--threads", type=int,
                       help="worker threads (default: FEDCLUSTER_THREADS or 1)")

    p_run = sub.add_parser("run", help="execute one experiment")
    add_common(p_run)
    p_run.add_argument("--seeds", help="override the config seed (single integer)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="execute a sweep over config axes")
    add_common(p_sweep)
    p_sweep.add_argument("--seeds", help="comma-separated seed axis override")
    p_sweep.set_defaults(func=cmd_sweep)

    p_het = sub.add_parser("hetero", help="report data heterogeneity")
    add_common(p_het)
    p_het.set_defaults(func=cmd_hetero)

    p_ver = sub.add_parser("verify", help="run the property battery")
    p_ver.add_argument("--out", help="write the JSON report here instead of stdout")
    p_ver.add_argument("--inject", choices=verify_mod._INJECTIONS,
                       help="deliberately corrupt an oracle (test hook)")
    p_ver.set_defaults(func=cmd_verify)

    p_plot = sub.add_parser("plot", help="render metrics CSVs to SVG")
    p_plot.add_argument("csvs", nargs="+", help="metrics CSV files")
    p_plot.add_argument("--out", required=True, help="output SVG path")
    p_plot.add_argument("--x", default="round", help="x column (default: round)")
    p_plot.add_argument("--y", default="train_loss", help="y column (default: train_loss)")
    p_plot.add_argument("--log-y", action="store_true", help="log-scale the y axis")
    p_plot.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigurationError, IngestionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
