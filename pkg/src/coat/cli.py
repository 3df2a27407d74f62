"""Experiment runner: train / eval / sweep / verify / list / export-plots.

Run identity is the SHA-256 of the canonicalized config (seed included), so
re-running the same experiment maps to the same directory. Metric CSVs are
flushed per epoch and a rolling checkpoint is kept, so a crashed run resumes
from its last finished epoch.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from . import attacks, bounds, datasets, diagnostics, models, verify
from . import training as tr

SWEEP_SCHEMA = "coat-sweep/1"


class CLIError(Exception):
    pass


# --- config plumbing ---

def load_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CLIError(f"config file not found: {path}")
    if path.suffix == ".toml":
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    if path.suffix == ".json":
        return json.loads(path.read_text(encoding="utf-8"))
    raise CLIError(f"unsupported config format {path.suffix!r} (use .toml or .json)")


def _parse_override_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # strings like "10/255" or "fgsm_at" stay verbatim


def apply_overrides(config: dict, pairs) -> dict:
    """--set key=value with dotted paths into nested blocks, e.g.
    method.lambda=0.5 or model_options.filters=8."""
    out = json.loads(json.dumps(config))  # deep copy, JSON-clean
    for pair in pairs or []:
        if "=" not in pair:
            raise CLIError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        parts = key.split(".")
        if parts[0] not in tr._CONFIG_KEYS:
            raise CLIError(f"unknown config key {parts[0]!r}; valid keys: "
                           f"{sorted(tr._CONFIG_KEYS)}")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CLIError(f"cannot descend into non-table key {p!r}")
        node[parts[-1]] = _parse_override_value(raw)
    return out


def build_config(args) -> tr.TrainConfig:
    cfg_dict = load_config_file(args.config) if args.config else {}
    cfg_dict = apply_overrides(cfg_dict, getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg_dict["seed"] = args.seed
    try:
        return tr.TrainConfig.from_dict(cfg_dict)
    except tr.ConfigError as e:
        raise CLIError(str(e)) from None


# --- run records ---

def _write_report(run_dir: Path, record: dict) -> None:
    (run_dir / "report.json").write_text(json.dumps(record, indent=1),
                                         encoding="utf-8")


def _read_report(run_dir: Path) -> dict | None:
    p = run_dir / "report.json"
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))


def _salvage_rows(mpath, limit_epoch: int) -> list[dict]:
    """Rows strictly before limit_epoch; a torn tail (killed mid-write) is
    dropped rather than treated as corruption."""
    try:
        rows = tr.MetricLog.read_csv(mpath).rows
    except tr.MetricLogError:
        rows = []
        lines = Path(mpath).read_text(encoding="utf-8").splitlines()
        for ln in lines[2:]:
            vals = ln.split(",")
            if len(vals) != len(tr.COLUMNS):
                break
            try:
                rows.append({c: float(v) for c, v in zip(tr.COLUMNS, vals)})
            except ValueError:
                break
    return [r for r in rows if r["epoch"] < limit_epoch]


def _resume_state(run_dir: Path):
    """Load the rolling checkpoint and the metric rows it covers."""
    last = run_dir / "last.ckpt"
    if not last.exists():
        return None
    arrays, cfg_echo, extra = models.load_checkpoint(last)
    start_epoch = int(extra.pop("epoch")) + 1
    mpath = run_dir / "metrics.csv"
    rows = []
    if mpath.exists():
        rows = _salvage_rows(mpath, start_epoch)
        tr.MetricLog(rows).write_csv(mpath)
    return {"start_epoch": start_epoch, "init_arrays": arrays,
            "opt_state": extra, "prior_rows": rows}


def execute_run(cfg: tr.TrainConfig, out_root, data=None, data_dir=None,
                force: bool = False, quiet: bool = False) -> dict:
    """Train one config into out_root/<run_id>; returns the run record."""
    out_root = Path(out_root)
    run_dir = out_root / cfg.run_id()
    report = _read_report(run_dir)
    resume = None
    if run_dir.exists():
        if force:
            shutil.rmtree(run_dir)
        elif report is not None and report.get("status") == "completed":
            raise CLIError(f"run {cfg.run_id()} already completed in {run_dir}; "
                           "use --force to redo")
        else:
            resume = _resume_state(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)

    (run_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=1, sort_keys=True), encoding="utf-8")
    record = {"run_id": cfg.run_id(), "status": "running",
              "config": cfg.to_dict(), "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
              "paths": {"metrics": "metrics.csv", "final": "final.ckpt",
                        "best": "best.ckpt", "config": "config.json"}}
    _write_report(run_dir, record)

    def progress(epoch, row):
        if not quiet:
            print(f"  epoch {epoch:3d} lr={row['lr']:.5f} "
                  f"pgd={row['train_pgd_acc']:.3f} align={row['grad_alignment']:.3f}",
                  flush=True)

    kwargs = {}
    if resume:
        kwargs = dict(start_epoch=resume["start_epoch"],
                      init_arrays=resume["init_arrays"],
                      opt_state=resume["opt_state"],
                      prior_rows=resume["prior_rows"])
        if not quiet:
            print(f"  resuming at epoch {resume['start_epoch']}", flush=True)
    result = tr.train(cfg, data=data, data_dir=data_dir,
                      metrics_path=run_dir / "metrics.csv",
                      checkpoint_dir=run_dir, progress=progress, **kwargs)

    models.save_checkpoint(run_dir / "final.ckpt",
                           result.model.params_from_arrays(result.final_arrays),
                           config=cfg.to_dict())
    models.save_checkpoint(run_dir / "best.ckpt",
                           result.model.params_from_arrays(result.best_arrays),
                           config=cfg.to_dict(),
                           extra={"best_epoch": np.array(float(result.best_epoch))})

    if result.history:
        try:
            stats = diagnostics.filter_stats(result.history, model=result.model)
            _write_filter_stats(run_dir / "weight_norms.csv", stats)
        except diagnostics.DiagnosticsError:
            pass

    event = diagnostics.detect_co(result.log)
    (run_dir / "co.json").write_text(
        json.dumps(event.as_dict() if event else None), encoding="utf-8")

    last = result.log.rows[-1] if result.log.rows else {}
    record.update(status="aborted" if result.aborted else "completed",
                  finished=time.strftime("%Y-%m-%dT%H:%M:%S"),
                  best_epoch=result.best_epoch,
                  co_event=event.as_dict() if event else None,
                  final_metrics={k: last.get(k) for k in
                                 ("epoch", "test_clean_acc", "test_pgd_acc",
                                  "test_fgsm_acc", "grad_alignment")})
    _write_report(run_dir, record)
    return record


def _write_filter_stats(path, stats: dict) -> None:
    n_f = stats["w_norm"].shape[1]
    cols = ["epoch"] + [f"w_norm_{i}" for i in range(n_f)] \
        + [f"u_norm_{i}" for i in range(n_f) if "u_norm" in stats] \
        + [f"dir_cos_{i}" for i in range(n_f)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# schema: coat-filter-stats/1\n")
        fh.write(",".join(cols) + "\n")
        for t in stats["epochs"]:
            row = [str(int(t))]
            row += [repr(v) for v in stats["w_norm"][t]]
            if "u_norm" in stats:
                row += [repr(v) for v in stats["u_norm"][t]]
            row += [repr(v) for v in stats["dir_cos"][t]]
            fh.write(",".join(row) + "\n")


# --- commands ---

def cmd_train(args) -> int:
    cfg = build_config(args)
    record = execute_run(cfg, args.out, data_dir=args.data_dir,
                         force=args.force, quiet=args.quiet)
    print(json.dumps(record["final_metrics"] | {"run_id": record["run_id"],
                                                "status": record["status"]}))
    return 0 if record["status"] == "completed" else 1


def cmd_eval(args) -> int:
    arrays, cfg_echo, _ = models.load_checkpoint(args.checkpoint)
    if cfg_echo is None:
        raise CLIError(f"{args.checkpoint} carries no config echo")
    cfg = tr.TrainConfig.from_dict(cfg_echo)
    model = tr.build_model(cfg)
    try:
        params = model.params_from_arrays(arrays)
    except models.CheckpointError as e:
        raise CLIError(f"checkpoint does not fit model: {e}") from None

    data_dir = args.data_dir or os.environ.get(datasets.DATA_DIR_ENV)
    _, test = datasets.load_by_name(cfg.dataset, cfg.dataset_options, data_dir)
    if args.n and args.n < len(test):
        test = datasets.subsample(test, args.n, seed=args.seed)
    eps = tr.parse_ratio(args.eps) if args.eps else cfg.eps_value()

    out = attacks.evaluate_robustness(model, params, test.images, test.labels,
                                      eps, attack=args.attack, seed=args.seed)
    out.update(checkpoint=str(args.checkpoint), seed=args.seed,
               eps_spec=args.eps or cfg.eps)
    text = json.dumps(out, indent=1)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def _sweep_child(payload):
    cfg_dict, out_root, data_dir, force = payload
    cfg = tr.TrainConfig.from_dict(cfg_dict)
    try:
        return execute_run(cfg, out_root, data_dir=data_dir, force=force,
                           quiet=True)
    except CLIError:
        # already-completed runs count as successes with their stored record
        rec = _read_report(Path(out_root) / cfg.run_id())
        if rec is not None:
            return rec
        raise


def cmd_sweep(args) -> int:
    template = load_config_file(args.config) if args.config else {}
    template = apply_overrides(template, args.set)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise CLIError("sweep needs at least one value")
    seeds = [int(s) for s in args.seeds.split(",")]

    jobs = []
    for value in values:
        for seed in seeds:
            child = json.loads(json.dumps(template))
            if args.param == "eps":
                child["eps"] = _parse_override_value(value)
            elif args.param == "lambda":
                child.setdefault("method", {})["lambda"] = _parse_override_value(value)
            elif args.param == "alpha":
                child.setdefault("method", {})["alpha"] = _parse_override_value(value)
            else:
                raise CLIError(f"unknown sweep parameter {args.param!r}")
            child["seed"] = seed
            jobs.append((value, seed, child))

    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    results: dict[tuple, dict | None] = {}
    payloads = [(c, str(out_root), args.data_dir, args.force) for _, _, c in jobs]
    if args.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            futs = {pool.submit(_sweep_child, p): (v, s)
                    for (v, s, _), p in zip(jobs, payloads)}
            for fut, key in futs.items():
                try:
                    results[key] = fut.result()
                except Exception as e:  # a failed child must not kill the sweep
                    print(f"run {key} failed: {e}", file=sys.stderr)
                    results[key] = None
    else:
        for (v, s, _), p in zip(jobs, payloads):
            try:
                results[(v, s)] = _sweep_child(p)
            except Exception as e:
                print(f"run ({v}, seed {s}) failed: {e}", file=sys.stderr)
                results[(v, s)] = None

    rows = []
    for value in values:
        recs = [results.get((value, s)) for s in seeds]
        ok = [r for r in recs if r and r["status"] == "completed"]
        def col(name):
            vals = [r["final_metrics"].get(name) for r in ok]
            vals = [v for v in vals if v is not None and np.isfinite(v)]
            return (float(np.mean(vals)), float(np.std(vals))) if vals else (float("nan"),) * 2
        clean = col("test_clean_acc")
        pgd = col("test_pgd_acc")
        fgsm = col("test_fgsm_acc")
        align = col("grad_alignment")
        rows.append({"param": args.param, "value": value, "n_seeds": len(seeds),
                     "n_failed": len(seeds) - len(ok),
                     "clean_mean": clean[0], "clean_std": clean[1],
                     "pgd_mean": pgd[0], "pgd_std": pgd[1],
                     "fgsm_mean": fgsm[0], "fgsm_std": fgsm[1],
                     "align_mean": align[0],
                     "co_count": sum(1 for r in ok if r.get("co_event"))})

    spath = out_root / "summary.csv"
    cols = list(rows[0].keys())
    with open(spath, "w", encoding="utf-8") as fh:
        fh.write(f"# schema: {SWEEP_SCHEMA}\n")
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(str(r[c]) for c in cols) + "\n")
    for r in rows:
        print(f"{args.param}={r['value']}: pgd={r['pgd_mean']:.3f}+-{r['pgd_std']:.3f} "
              f"co={r['co_count']}/{r['n_seeds'] - r['n_failed']} failed={r['n_failed']}")
    print(f"summary: {spath}")
    return 0 if all(r["n_failed"] == 0 for r in rows) else 1


def _check(name, ok, detail, checks, quiet=False):
    checks.append({"check": name, "ok": bool(ok), "detail": detail})
    if not quiet:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}")


def verify_lemma1(out_dir: Path, n_mc: int = 1000, seed: int = 0) -> list[dict]:
    eps = 8.0 / 255.0
    rep = bounds.lemma1_verify(eps, 3072, [0.0, 0.5 * eps, eps, 1.25 * eps, 2 * eps],
                               n_mc=n_mc, seed=seed)
    _write_csv(out_dir / "lemma1.csv", rep.rows(), "coat-lemma1/1")
    checks: list[dict] = []
    for r in rep.rows():
        # at alpha >= 2*eps the step saturates and the MC se collapses to 0;
        # a relative epsilon keeps those exact cases from failing on round-off
        _check(f"mc<=bound at alpha={r['alpha']:.4f}",
               r["mc_mean"] <= r["bound"] + 3 * r["mc_se"] + 1e-9 * r["bound"],
               f"mc={r['mc_mean']:.4f} bound={r['bound']:.4f}", checks)
        _check(f"second moment exact at alpha={r['alpha']:.4f}",
               abs(r["mc_sq_mean"] - r["second_moment"])
               <= 3 * r["mc_sq_se"] + 1e-9 * r["second_moment"],
               f"mc={r['mc_sq_mean']:.4f} formula={r['second_moment']:.4f}", checks)
        _check(f"sign-pattern invariance at alpha={r['alpha']:.4f}",
               abs(r["mc_mean"] - r["mc_mean_alt"]) <= 3 * np.sqrt(2) * r["mc_se"],
               f"|{r['mc_mean']:.4f}-{r['mc_mean_alt']:.4f}|", checks)
    return checks


def verify_lemma2(out_dir: Path, n_mc: int = 1000, n_trials: int = 300,
                  seed: int = 0) -> list[dict]:
    rep = bounds.lemma2_full(bounds.DEFAULT_EPS_GRID, n_mc=n_mc,
                             n_trials=n_trials, seed=seed)
    _write_csv(out_dir / "lemma2.csv", rep.rows(), "coat-lemma2/1")
    checks: list[dict] = []
    pts = rep.points
    _check("final bound within [0.5, 1]",
           all(0.5 <= p.final_bound <= 1.0 for p in pts),
           f"range [{min(p.final_bound for p in pts):.3f}, "
           f"{max(p.final_bound for p in pts):.3f}]", checks)
    _check("bound non-increasing in eps",
           all(a.final_bound >= b.final_bound - 1e-12 for a, b in zip(pts, pts[1:])),
           "common random numbers make this exact", checks)
    _check("intermediate bound >= final bound",
           all(p.hoeffding_bound >= p.final_bound - 1e-12 for p in pts),
           "at every grid point", checks)
    _check("empirical cosine >= final bound - 3se",
           all(p.empirical_mean >= p.final_bound - 3 * p.empirical_se for p in pts),
           "at every grid point", checks)
    _check("limiting cosine >= final bound - 3se",
           all(p.limiting_cosine >= p.final_bound - 3 * p.limiting_se for p in pts),
           "at every grid point", checks)
    return checks


def verify_autodiff(out_dir: Path, n_cases: int = 100, seed: int = 0) -> list[dict]:
    checks: list[dict] = []
    r1 = verify.check_first_order(n_cases=n_cases, seed=seed)
    _write_csv(out_dir / "autodiff_first_order.csv", r1.rows, "coat-fdcheck/1")
    _check("first-order gradients vs finite differences", r1.ok, r1.summary(), checks)
    r2 = verify.check_second_order(n_cases=n_cases, seed=seed)
    _write_csv(out_dir / "autodiff_second_order.csv", r2.rows, "coat-fdcheck/1")
    _check("penalty parameter gradients vs finite differences", r2.ok,
           r2.summary(), checks)
    return checks


def cmd_verify(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = 0.3 if args.quick else 1.0
    checks = []
    if args.which in ("lemma1", "all"):
        print("lemma1:")
        checks += verify_lemma1(out_dir, n_mc=max(100, int(1000 * scale)),
                                seed=args.seed)
    if args.which in ("lemma2", "all"):
        print("lemma2:")
        checks += verify_lemma2(out_dir, n_mc=max(200, int(1000 * scale)),
                                n_trials=max(100, int(300 * scale)), seed=args.seed)
    if args.which in ("autodiff", "all"):
        print("autodiff:")
        checks += verify_autodiff(out_dir, n_cases=max(22, int(100 * scale)),
                                  seed=args.seed)
    report = {"which": args.which, "checks": checks,
              "ok": all(c["ok"] for c in checks)}
    (out_dir / "verify_report.json").write_text(json.dumps(report, indent=1),
                                                encoding="utf-8")
    print(f"{'all checks passed' if report['ok'] else 'FAILURES PRESENT'} "
          f"({len(checks)} checks) -> {out_dir / 'verify_report.json'}")
    return 0 if report["ok"] else 2


def cmd_list(args) -> int:
    root = Path(args.out)
    if not root.exists():
        print(f"(no runs under {root})")
        return 0
    count = 0
    for run_dir in sorted(root.iterdir()):
        rec = _read_report(run_dir)
        if rec is None:
            continue
        count += 1
        cfg = rec.get("config", {})
        fm = rec.get("final_metrics") or {}
        pgd = fm.get("test_pgd_acc")
        pgd_s = f"{pgd:.3f}" if isinstance(pgd, float) and np.isfinite(pgd) else "-"
        print(f"{rec['run_id']}  {rec.get('status', '?'):9s} "
              f"{cfg.get('method', {}).get('name', '?'):16s} eps={cfg.get('eps', '?'):8} "
              f"seed={cfg.get('seed', '?'):<3} test_pgd={pgd_s} "
              f"co={'yes' if rec.get('co_event') else 'no'}")
    print(f"{count} run(s) under {root}")
    return 0


def cmd_export_plots(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.run:
        run_dir = Path(args.run)
        log = tr.MetricLog.read_csv(run_dir / "metrics.csv")
        rows = [{k: r[k] for k in ("epoch", "grad_alignment", "cos_fgsm_pgd",
                                   "omega_value", "test_pgd_acc", "test_fgsm_acc")}
                for r in log.rows]
        _write_csv(out_dir / "alignment_vs_epoch.csv", rows, "coat-plot-alignment/1")
        wrote.append("alignment_vs_epoch.csv")
        wn = run_dir / "weight_norms.csv"
        if wn.exists():
            shutil.copyfile(wn, out_dir / "weight_norms.csv")
            wrote.append("weight_norms.csv")
        ck = run_dir / "final.ckpt"
        if ck.exists():
            arrays, cfg_echo, _ = models.load_checkpoint(ck)
            cfg = tr.TrainConfig.from_dict(cfg_echo)
            model = tr.build_model(cfg)
            params = model.params_from_arrays(arrays)
            data_dir = args.data_dir or os.environ.get(datasets.DATA_DIR_ENV)
            _, test = datasets.load_by_name(cfg.dataset, cfg.dataset_options, data_dir)
            n = min(256, len(test))
            sub = datasets.subsample(test, n, seed=0)
            curve = diagnostics.linearization_curve(model, params, sub.images,
                                                    sub.labels, cfg.eps_value(),
                                                    seed=0)
            _write_csv(out_dir / "linearization_error.csv", curve,
                       "coat-plot-linearization/1")
            wrote.append("linearization_error.csv")
    if args.sweep:
        spath = Path(args.sweep) / "summary.csv"
        if not spath.exists():
            raise CLIError(f"no summary.csv under {args.sweep}")
        shutil.copyfile(spath, out_dir / "robustness_vs_param.csv")
        wrote.append("robustness_vs_param.csv")
    if not wrote:
        raise CLIError("nothing to export: pass --run and/or --sweep")
    print(f"wrote {', '.join(wrote)} -> {out_dir}")
    return 0


def _write_csv(path, rows: list[dict], schema: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# schema: {schema}\n")
        if not rows:
            return
        cols = list(rows[0].keys())
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c])
                              for c in cols) + "\n")


# --- argument parsing ---

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coat",
                                 description="Adversarial-training workbench")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training config")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable, dotted paths)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs")
    p.add_argument("--data-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="attack a checkpoint and report accuracy")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eps", default=None, help='e.g. "8/255"; default: config echo')
    p.add_argument("--attack", default="pgd_eval",
                   choices=["pgd_eval", "pgd", "fgsm", "fgsm_rs"])
    p.add_argument("--n", type=int, default=0, help="evaluation points (0 = all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--out", default=None, help="write the JSON report here too")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="one training run per value per seed")
    p.add_argument("--config", help="template config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--param", required=True, choices=["eps", "lambda", "alpha"])
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", default="0", help="comma-separated seeds")
    p.add_argument("--out", default="sweep")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--data-dir", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("verify", help="run the analytic/autodiff check suites")
    p.add_argument("which", nargs="?", default="all",
                   choices=["lemma1", "lemma2", "autodiff", "all"])
    p.add_argument("--out", default="verify_out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("list", help="show run records under a directory")
    p.add_argument("--out", default="runs")
    p.set_defaults(fn=cmd_list)

    p = sub.add_parser("export-plots", help="emit plot-ready CSV families")
    p.add_argument("--run", default=None, help="a single run directory")
    p.add_argument("--sweep", default=None, help="a sweep directory")
    p.add_argument("--out", default="plots")
    p.add_argument("--data-dir", default=None)
    p.set_defaults(fn=cmd_export_plots)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CLIError, tr.ConfigError, datasets.DatasetError,
            models.CheckpointError, tr.MetricLogError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
