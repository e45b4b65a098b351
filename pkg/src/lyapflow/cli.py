"""Command-line entry point.

    lyapflow train   --config run.yaml [--seed S] [--jobs J] [--out DIR]
    lyapflow attack  --config run.yaml --checkpoint ckpt.json [--out DIR]
    lyapflow certify --checkpoint ckpt.json [--config run.yaml | --dataset DIR] [--beta B]
    lyapflow solve   [--checkpoint ckpt.json] --beta 0.25 0.5 0.75 1.0 [--rhs linear]
    lyapflow inspect [--config run.yaml | --dataset DIR | --synthetic]
    lyapflow defaults

Exit codes: 0 success, 1 other library error, 2 configuration or input
error, 3 training divergence, 4 checkpoint mismatch or corruption,
5 certification requested for a model without a trained Lyapunov module.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, defaults_reference, load_config, load_dataset_for
from .errors import CheckpointError, ConfigError, IngestionError, LyapflowError, TrainingDivergence
from .flows import FlowState
from .graph import load_dataset_dir, stats, synthetic_fixture
from .lyapunov import LyapunovConfig, ProjectedRHS, zero_icnn
from .model import Model, forward, init_model, load_checkpoint, save_checkpoint
from .robustness import certify_model, evaluate
from .solvers import SolverConfig, solve
from .tensor import Tensor
from .training import train

log = logging.getLogger("lyapflow")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED, EXIT_CHECKPOINT, EXIT_UNCERTIFIABLE = 0, 1, 2, 3, 4, 5

# Fields that change between otherwise identical runs.
VOLATILE_FIELDS = ("timestamp", "wall_ms")


class Uncertifiable(LyapflowError):
    pass


def _timestamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(args, cfg: RunConfig | None, sub: str) -> Path:
    if args.out:
        return Path(args.out)
    base = Path(cfg.output) if cfg is not None else Path("runs")
    return base / sub


# --------------------------------------------------------------------- train


def _train_seed(job):
    cfg, seed, run_dir = job
    ds = load_dataset_for(cfg)
    model = init_model(cfg.model, ds.n_features, ds.n_classes, np.random.default_rng(seed))
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train_log.jsonl").unlink(missing_ok=True)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    try:
        r1, r2 = train(ds, model, tcfg, run_dir=run_dir, stabilize=cfg.stabilized)
    except TrainingDivergence as exc:
        if exc.last_good is not None:
            save_checkpoint(run_dir / "last_good.json", exc.last_good, {"seed": seed, "diverged": str(exc)})
        raise
    stages = []
    for r in (r1, r2):
        if r is None:
            continue
        ck = save_checkpoint(run_dir / f"stage{r.model.stage}.json", r.model,
                             {"seed": seed, "config": cfg.echo()})
        stages.append({
            "stage": r.model.stage, "epochs": len(r.history), "converged": r.converged,
            "train_acc": r.train_acc[-1] if r.history else None,
            "val_acc": r.val_acc[-1] if r.history else None,
            "checkpoint": ck.name, "checkpoint_sha256": _sha256(ck),
        })
    summary = {"seed": seed, "stages": stages, "config": cfg.echo(), "timestamp": _timestamp()}
    _write_json(run_dir / "train_summary.json", summary)
    return summary


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    out = _out_dir(args, cfg, "train")
    jobs = [(cfg, s, str(out / f"seed_{s}")) for s in cfg.seeds]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_train_seed, jobs))
    else:
        results = [_train_seed(j) for j in jobs]
    for r in results:
        last = r["stages"][-1]
        print(f"seed {r['seed']}: stage {last['stage']} train_acc={last['train_acc']:.4f} "
              f"val_acc={last['val_acc']:.4f} -> {out / ('seed_' + str(r['seed'])) / last['checkpoint']}")
    return EXIT_OK


# -------------------------------------------------------------------- attack


def cmd_attack(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset_for(cfg)
    report = evaluate(ds, model, cfg.attacks, cfg.seeds, cfg.low_q, cfg.high_q, jobs=args.jobs,
                      certify=model.stabilizable and model.stage >= 2)
    out = _out_dir(args, cfg, "attack")
    payload = {
        "config": cfg.echo(),
        "checkpoint_sha256": _sha256(Path(args.checkpoint)),
        "report": report.to_dict(),
        "timestamp": _timestamp(),
    }
    path = _write_json(out / "attack_report.json", payload)
    print(report.table())
    if report.failures:
        print(f"{len(report.failures)} run(s) failed; see {path}", file=sys.stderr)
    return EXIT_OK


# ------------------------------------------------------------------- certify


def _with_solver(model: Model, solver: SolverConfig) -> Model:
    cfg = dataclasses.replace(model.config, solver=solver)
    return Model(cfg, model.params, model.n_features, model.n_classes, model.stage)


def _override_solver(model: Model, beta=None, step_h=None, t_end=None) -> Model:
    s = model.config.solver
    new = s
    if beta is not None and beta != s.beta:
        scheme = "frac_abm" if beta < 1 or s.fractional else s.scheme
        new = dataclasses.replace(new, beta=beta, scheme=scheme)
    if step_h is not None:
        new = dataclasses.replace(new, step_h=step_h)
    if t_end is not None:
        new = dataclasses.replace(new, t_end=t_end)
    return model if new == s else _with_solver(model, new)


def _dataset_from_args(args):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        return load_dataset_for(cfg), cfg
    if getattr(args, "dataset", None):
        return load_dataset_dir(args.dataset), None
    return synthetic_fixture(), None


def cmd_certify(args) -> int:
    model = load_checkpoint(args.checkpoint)
    if not model.stabilizable or model.stage < 2:
        raise Uncertifiable(f"{args.checkpoint} is not a stabilized (stage-2) checkpoint; certification is undefined")
    model = _override_solver(model, args.beta, args.step_h, args.t_end)
    ds, cfg = _dataset_from_args(args)
    cert = certify_model(model, ds, tol=args.tol)
    out = _out_dir(args, cfg, "certify")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "certify_margins.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "observed", "envelope", "margin", "pass"])
        for t, o, e, m in zip(cert.times, cert.observed, cert.envelope, cert.margins):
            w.writerow([repr(float(t)), repr(float(o)), repr(float(e)), repr(float(m)), int(m >= 0)])
    payload = {
        "checkpoint_sha256": _sha256(Path(args.checkpoint)),
        "config": model.config.to_dict(),
        "beta": model.config.solver.beta,
        "summary": cert.summary(),
        "timestamp": _timestamp(),
    }
    _write_json(out / "certify_summary.json", payload)
    print(f"{cert.mode} envelope: pass fraction {cert.pass_fraction:.4f}, worst margin {cert.worst_margin:.6g} "
          f"over {cert.margins.size} steps")
    return EXIT_OK


# --------------------------------------------------------------------- solve


def _solve_one(args, beta, model, ds):
    scheme = args.scheme or "frac_abm"
    if beta < 1:
        scheme = "frac_abm"
    solver = SolverConfig(beta=beta, step_h=args.step_h, t_end=args.t_end, scheme=scheme)
    if model is not None:
        m = _with_solver(model, solver)
        res = forward(m, ds, stabilized=m.stabilizable and m.stage >= 2, record_V=True)
        rec = res.record
    else:
        u0 = Tensor(np.full((1, args.dim), args.u0))
        rate = {"zero": 0.0, "linear": -args.rate, "unstable": args.rate}[args.rhs]

        def base(state, v_history=None):
            return FlowState(state.U * rate)

        rhs, value_fn = base, None
        if args.project:
            mode = "fractional" if solver.fractional else "integer"
            lyap = LyapunovConfig(c=args.c, alpha3=args.alpha3, mode=mode)
            proj = ProjectedRHS(base, zero_icnn(args.dim, (1,)), lyap, beta, args.step_h)
            rhs, value_fn = proj, proj.value
        rec = solve(rhs, u0, solver, value_fn)
    V = rec.V_history
    rows = []
    for k, (t, n) in enumerate(zip(rec.times, rec.norms())):
        rows.append([repr(float(t)), repr(float(n)), "" if V is None else repr(float(V[k]))])
    return rows


def cmd_solve(args) -> int:
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    ds = None
    if model is not None:
        ds, _ = _dataset_from_args(args)
    for b in args.beta:
        if not (0 < b <= 1):
            raise ConfigError(f"--beta values must lie in (0, 1], got {b}")
    out = Path(args.out) if args.out else Path("runs") / "solve"
    out.mkdir(parents=True, exist_ok=True)
    for b in args.beta:
        rows = _solve_one(args, b, model, ds)
        path = out / f"solve_beta{b:g}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "norm_U", "V"])
            w.writerows(rows)
        print(path)
    return EXIT_OK


# ------------------------------------------------------------------- inspect


def cmd_inspect(args) -> int:
    ds, _ = _dataset_from_args(args)
    s = stats(ds)
    header = ["Dataset", "# Nodes", "# Edges", "# Features", "# Classes", "max # Nodes", "max # Edges"]
    values = [s["dataset"], s["nodes"], s["edges"], s["features"], s["classes"],
              s["max_inject_nodes"] if s["max_inject_nodes"] is not None else "-",
              s["max_inject_edges"] if s["max_inject_edges"] is not None else "-"]
    widths = [max(len(str(h)), len(str(v))) for h, v in zip(header, values)]
    print("  ".join(f"{h:>{w}}" for h, w in zip(header, widths)))
    print("  ".join(f"{v!s:>{w}}" for v, w in zip(values, widths)))
    if args.out:
        _write_json(Path(args.out), s)
    return EXIT_OK


def cmd_defaults(args) -> int:
    sys.stdout.write(defaults_reference())
    return EXIT_OK


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyapflow", description="Lyapunov-stable graph neural flows")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=False):
        sp.add_argument("--config", required=config_required, help="YAML run configuration")
        sp.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config list")
        sp.add_argument("--jobs", type=int, default=1, help="seed-level worker processes")
        sp.add_argument("--out", default=None, help="output directory")

    sp = sub.add_parser("train", help="train stage 1 (and stage 2 when stabilized)")
    common(sp, config_required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="evaluate a checkpoint under the configured attacks")
    common(sp, config_required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("certify", help="check the decay envelope of a stabilized checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", default=None, help="dataset directory (default: bundled fixture)")
    sp.add_argument("--beta", type=float, default=None)
    sp.add_argument("--step-h", type=float, default=None)
    sp.add_argument("--t-end", type=float, default=None)
    sp.add_argument("--tol", type=float, default=None)
    sp.set_defaults(func=cmd_certify)

    sp = sub.add_parser("solve", help="emit trajectory CSVs (t, ||U||, V), one per beta")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--beta", type=float, nargs="+", default=[1.0])
    sp.add_argument("--step-h", type=float, default=0.05)
    sp.add_argument("--t-end", type=float, default=10.0)
    sp.add_argument("--scheme", choices=("euler", "rk4", "frac_abm"), default=None)
    sp.add_argument("--rhs", choices=("zero", "linear", "unstable"), default="linear",
                    help="scalar test field when no checkpoint is given")
    sp.add_argument("--rate", type=float, default=1.0)
    sp.add_argument("--u0", type=float, default=1.0)
    sp.add_argument("--dim", type=int, default=1)
    sp.add_argument("--project", action="store_true", help="project the test field with V = ||u||^2")
    sp.add_argument("--c", type=float, default=1.0)
    sp.add_argument("--alpha3", type=float, default=0.1)
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("inspect", help="print dataset statistics")
    sp.add_argument("--config", default=None)
    sp.add_argument("--dataset", default=None)
    sp.add_argument("--synthetic", action="store_true")
    sp.add_argument("--out", default=None, help="also write the statistics as JSON")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("defaults", help="print every configuration option with its default")
    sp.set_defaults(func=cmd_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergence as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except Uncertifiable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNCERTIFIABLE
    except LyapflowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
