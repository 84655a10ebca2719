"""Command-line entry point: gen, preprocess, train, eval, sweep, ablate.

Exit codes are 0 on success, 2 on usage errors and 1 on runtime errors;
error messages go to stderr prefixed with ``error:``. ``LIMTR_THREADS``
caps BLAS threads and the number of worker processes used by sweep/ablate.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import io
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _cap_threads() -> None:
    # must run before numpy is first imported
    limit = os.environ.get("LIMTR_THREADS")
    if limit:
        for var in _THREAD_VARS:
            os.environ[var] = limit


_cap_threads()

FEATURE_CHOICES = ("range", "intensity", "elongation", "all", "none")
DEPTHS = tuple(range(2, 15, 2))
FRAME_CHOICES = (1, 3, 6, 11)
ABLATION = {
    "features": [("range",), ("intensity",), ("elongation",), "all"],
    "frames": [1, 3, 6, 11],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"error: {message}\n")


def _workers() -> int:
    try:
        return max(int(os.environ.get("LIMTR_THREADS", "1")), 1)
    except ValueError:
        raise UsageError("LIMTR_THREADS must be a positive integer") from None


def _model_flags(p: argparse.ArgumentParser, depth=True) -> None:
    if depth:
        p.add_argument("--depth", type=int, choices=DEPTHS, help="layers per encoder MLP block")
    p.add_argument("--features", choices=FEATURE_CHOICES, help="per-point LiDAR features (default intensity)")
    p.add_argument("--frames", type=int, choices=FRAME_CHOICES, help="LiDAR frames used (default 11)")
    p.add_argument("--no-lidar", action="store_true", help="history-only baseline")
    p.add_argument("--preset", choices=("toy", "full"), default="toy",
                   help="toy: desk-scale widths and points; full: full-size encoder and optimizer defaults")
    p.add_argument("--n-points", type=int, help="points per frame")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = _Parser(prog="limtr", description="Local LiDAR features for motion prediction, at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["gen"] = sub.add_parser("gen", help="generate synthetic scenario bundles")
    p.add_argument("--scenarios", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cue-strength", type=float, default=1.0)
    p.add_argument("--out")

    p = subs["preprocess"] = sub.add_parser("preprocess", help="cache per-target LiDAR tensors")
    p.add_argument("--data")
    p.add_argument("--features", choices=FEATURE_CHOICES)
    p.add_argument("--frames", type=int, choices=FRAME_CHOICES)
    p.add_argument("--n-points", type=int)
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="cache file (default: inside --data)")

    p = subs["train"] = sub.add_parser("train", help="train on the 80%% split and evaluate on the rest")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--eval-every", type=int, default=0)
    _model_flags(p)

    p = subs["eval"] = sub.add_parser("eval", help="evaluate a checkpoint or a prediction dump")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="evaluate this prediction dump instead of running a model")
    p.add_argument("--data")
    p.add_argument("--split", choices=("val", "train", "all"), default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump", help="write predictions to this file")
    p.add_argument("--out")

    p = subs["sweep"] = sub.add_parser("sweep", help="encoder depth sweep")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--depths", default=",".join(map(str, DEPTHS)))
    p.add_argument("--seeds", type=int, default=1)
    _model_flags(p, depth=False)

    p = subs["ablate"] = sub.add_parser("ablate", help="feature and frame-count ablations")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--axis", choices=("features", "frames", "both"), default="both")
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--depth", type=int, choices=DEPTHS)
    p.add_argument("--preset", choices=("toy", "full"), default="toy")
    p.add_argument("--n-points", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)

    for p in subs.values():
        p.add_argument("--config", help="JSON file setting any flag; command-line flags win")
    return parser, subs


def _explicit_dests(sub: argparse.ArgumentParser, argv) -> set[str]:
    flags = {opt: a.dest for a in sub._actions for opt in a.option_strings}
    return {flags[tok.split("=")[0]] for tok in argv if tok.split("=")[0] in flags}


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    sub = subs[args.command]
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            sub.error("config file must hold a JSON object")
        actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
        explicit = _explicit_dests(sub, argv)
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in actions:
                sub.error(f"unknown config key {key!r}")
            if dest in explicit:
                continue
            action = actions[dest]
            if action.type is not None and value is not None:
                try:
                    value = action.type(value)
                except (TypeError, ValueError):
                    sub.error(f"config key {key!r}: invalid value {value!r}")
            if action.choices is not None and value is not None and value not in action.choices:
                sub.error(f"config key {key!r}: {value!r} not in {list(action.choices)}")
            setattr(args, dest, value)
    _validate(args, sub)
    return args


def _validate(args, sub) -> None:
    required = {"gen": ("scenarios", "out"), "preprocess": ("data",), "train": ("data", "out"),
                "eval": ("data",), "sweep": ("data", "out"), "ablate": ("data", "out")}[args.command]
    missing = [f"--{r.replace('_', '-')}" for r in required if getattr(args, r, None) is None]
    if missing:
        sub.error("missing required flags: " + ", ".join(missing))
    if getattr(args, "no_lidar", False) and getattr(args, "features", None) is not None:
        sub.error("--no-lidar cannot be combined with --features")
    if args.command == "eval" and (args.checkpoint is None) == (args.predictions is None):
        sub.error("give exactly one of --checkpoint or --predictions")
    if args.command == "gen" and args.scenarios < 1:
        sub.error("--scenarios must be positive")
    if args.command == "sweep":
        try:
            args.depths = [int(d) for d in str(args.depths).split(",") if d.strip()]
        except ValueError:
            sub.error(f"--depths must be a comma-separated list of integers, got {args.depths!r}")
        bad = [d for d in args.depths if d not in DEPTHS]
        if bad or not args.depths:
            sub.error(f"--depths values must come from {list(DEPTHS)}")
    for name in ("seeds", "epochs", "n_points", "batch_size"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            sub.error(f"--{name.replace('_', '-')} must be positive")


# --- helpers --------------------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _append_manifest(out_dir: Path, record: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True, default=str) + "\n")


def _features(name):
    if name is None:
        return None
    if name == "none":
        return ()
    return "all" if name == "all" else (name,)


def model_config_from(args, **overrides):
    from .model import ModelConfig

    base = ModelConfig() if getattr(args, "preset", "toy") == "full" else ModelConfig.toy()
    over = {"seed": getattr(args, "seed", 0), "use_lidar": not getattr(args, "no_lidar", False)}
    if getattr(args, "depth", None) is not None:
        over["depth"] = args.depth
    if getattr(args, "features", None) is not None:
        over["features"] = _features(args.features)
    if getattr(args, "frames", None) is not None:
        over["frames"] = args.frames
    if getattr(args, "n_points", None) is not None:
        over["n_points"] = args.n_points
    over.update(overrides)
    return ModelConfig.from_dict({**base.to_dict(), **over})


def optim_config_from(args, seed: int | None = None):
    from .experiment import toy_optim
    from .train import OptimConfig

    seed = getattr(args, "seed", 0) if seed is None else seed
    cfg = OptimConfig(seed=seed) if getattr(args, "preset", "toy") == "full" else toy_optim(seed)
    for flag, field_name in (("epochs", "epochs"), ("lr", "lr_peak"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, field_name, value)
    return cfg


def load_split_datasets(model_config, data_dir, seed: int):
    """(train, val) datasets; LiDAR tensors come from a preprocess cache when one matches."""
    from .dataset import attach_lidar_cache, build_dataset, cache_name, load_scenarios, split_indices

    scenarios = load_scenarios(data_dir)
    tr, va = split_indices(len(scenarios))
    c = model_config
    cache = Path(data_dir) / cache_name(c.features, c.frames, c.n_points, seed)
    use_cache = c.use_lidar and cache.is_file()

    def build(idx):
        ds = build_dataset([scenarios[i] for i in idx], c.features, c.frames, c.n_points, seed,
                           with_lidar=c.use_lidar and not use_cache)
        return attach_lidar_cache(ds, cache) if use_cache else ds

    return build(tr), build(va)


def _write_trace(path: Path, trace: list[dict]) -> None:
    cols = sorted({k for row in trace for k in row}, key=lambda k: (k != "epoch", k != "train_loss", k))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for row in trace:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    path.write_text(buf.getvalue())


def _write_report(out_dir: Path, report, stem: str = "report") -> None:
    (out_dir / f"{stem}.json").write_text(report.to_json() + "\n")
    (out_dir / f"{stem}.csv").write_text(report.to_csv())


def train_run(model_config, optim_config, data_dir, out_dir, eval_every: int = 0, log=None) -> dict:
    """Train one configuration and write its checkpoint, loss trace and validation report."""
    from .encoder import count_parameters
    from .train import save_model, train

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds = load_split_datasets(model_config, data_dir, optim_config.seed)
    result = train(model_config, train_ds, optim_config, val_ds, eval_every, log)
    save_model(result.model, out_dir / "model.ckpt", optim_config)
    _write_trace(out_dir / "trace.csv", result.trace)
    _write_report(out_dir, result.report)
    params = count_parameters(model_config.encoder_config()) if model_config.use_lidar else 0
    return {"minADE": result.report.overall["minADE"], "MR": result.report.overall["MR"],
            "mAP": result.report.overall["mAP"], "encoder_params": params,
            "model_params": result.model.num_parameters(), "out": str(out_dir)}


def _run_job(job):
    model_config, optim_config, data_dir, out_dir = job
    return train_run(model_config, optim_config, data_dir, out_dir)


def _run_jobs(jobs) -> list[dict]:
    workers = min(_workers(), len(jobs))
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    # one BLAS thread per worker process keeps the total within the cap
    for var in _THREAD_VARS:
        os.environ[var] = "1"
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_run_job, jobs))


# --- commands ----------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .experiment import generate
    from .sim import write_bundle

    out = Path(args.out)
    started = _now()
    scenarios = generate(args.scenarios, args.cue_strength, args.seed)
    for scn in scenarios:
        write_bundle(scn, out / scn.scenario_id)
    _append_manifest(out, {"command": "gen", "config": vars(args), "seed": args.seed, "started": started,
                           "finished": _now(), "inputs": [], "outputs": [str(out)],
                           "results": {"scenarios": len(scenarios),
                                       "agents": sum(len(s.agents) for s in scenarios)}})
    print(f"wrote {len(scenarios)} scenarios to {out}")
    return 0


def cmd_preprocess(args) -> int:
    from .dataset import cache_name, load_scenarios, save_lidar_cache

    cfg = model_config_from(args)
    path = Path(args.out) if args.out else Path(args.data) / cache_name(cfg.features, cfg.frames, cfg.n_points,
                                                                        args.seed)
    started = _now()
    n = save_lidar_cache(path, load_scenarios(args.data), cfg.features, cfg.frames, cfg.n_points, args.seed)
    _append_manifest(path.parent, {"command": "preprocess", "config": vars(args), "seed": args.seed,
                                   "started": started, "finished": _now(), "inputs": [args.data],
                                   "outputs": [str(path)], "results": {"targets": n}})
    print(f"cached {n} target tensors in {path}")
    return 0


def cmd_train(args) -> int:
    mcfg = model_config_from(args)
    ocfg = optim_config_from(args)
    started = _now()
    log = (lambda row: print(json.dumps(row), flush=True)) if args.eval_every else None
    res = train_run(mcfg, ocfg, args.data, args.out, args.eval_every, log)
    _append_manifest(Path(args.out), {"command": "train", "config": vars(args), "model_config": mcfg.to_dict(),
                                      "seed": args.seed, "started": started, "finished": _now(),
                                      "inputs": [args.data], "outputs": [res["out"]], "results": res})
    print(json.dumps({k: res[k] for k in ("minADE", "MR", "mAP")}))
    return 0


def cmd_eval(args) -> int:
    import numpy as np

    from .dataset import build_dataset, load_scenarios, split_indices
    from .dumps import read_dump, write_dump
    from .metrics import evaluate_cases
    from .train import eval_cases, load_model, predict

    started = _now()
    scenarios = load_scenarios(args.data)
    tr, va = split_indices(len(scenarios))
    pick = {"train": tr, "val": va, "all": np.arange(len(scenarios))}[args.split]
    chosen = [scenarios[i] for i in pick]
    if args.checkpoint:
        model = load_model(args.checkpoint)
        c = model.config
        data = build_dataset(chosen, c.features, c.frames, c.n_points, args.seed, with_lidar=c.use_lidar)
        probs, traj = predict(model, data)
        if args.dump:
            write_dump(args.dump, data.keys, data.classes, probs, traj)
    else:
        data = build_dataset(chosen, with_lidar=False)
        records = {(r.scenario, r.agent): r for r in read_dump(args.predictions)}
        missing = [k for k in data.keys if k not in records]
        if missing:
            raise KeyError(f"prediction dump lacks {len(missing)} targets, e.g. {missing[0]}")
        probs = np.stack([records[k].probs for k in data.keys])
        traj = np.stack([records[k].traj for k in data.keys])
    report = evaluate_cases(eval_cases(data, probs, traj))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_report(out, report)
        _append_manifest(out, {"command": "eval", "config": vars(args), "seed": args.seed, "started": started,
                               "finished": _now(), "inputs": [args.data, args.checkpoint or args.predictions],
                               "outputs": [str(out)], "results": report.overall})
    print(report.table())
    return 0


def cmd_sweep(args) -> int:
    from .encoder import count_parameters

    out = Path(args.out)
    started = _now()
    jobs, rows = [], []
    for depth in args.depths:
        for seed in range(args.seeds):
            mcfg = model_config_from(args, depth=depth, seed=seed)
            jobs.append((mcfg, optim_config_from(args, seed), args.data, out / f"depth{depth:02d}_seed{seed}"))
    for (mcfg, ocfg, _, _), res in zip(jobs, _run_jobs(jobs)):
        rows.append({"depth": mcfg.depth, "params": count_parameters(mcfg.encoder_config()), "seed": ocfg.seed,
                     "minADE": res["minADE"], "mAP": res["mAP"]})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["depth", "params", "seed", "minADE", "mAP"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({**r, "minADE": repr(r["minADE"]), "mAP": repr(r["mAP"])})
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())
    _append_manifest(out, {"command": "sweep", "config": vars(args), "seed": list(range(args.seeds)),
                           "started": started, "finished": _now(), "inputs": [args.data],
                           "outputs": [str(out / "sweep.csv")], "results": rows})
    print(buf.getvalue(), end="")
    return 0


def _option_label(axis, option) -> str:
    if axis == "frames":
        return str(option)
    return option if isinstance(option, str) else "+".join(option)


def cmd_ablate(args) -> int:
    from .experiment import mean_std

    out = Path(args.out)
    started = _now()
    axes = ["frames", "features"] if args.axis == "both" else [args.axis]
    jobs, labels = [], []
    for axis in axes:
        for option in ABLATION[axis]:
            for seed in range(args.seeds):
                over = {"seed": seed, axis: option}
                mcfg = model_config_from(args, **over)
                label = _option_label(axis, option)
                jobs.append((mcfg, optim_config_from(args, seed), args.data, out / axis / f"{label}_seed{seed}"))
                labels.append((axis, label))
    results = _run_jobs(jobs)
    rows = []
    for axis in axes:
        for option in ABLATION[axis]:
            label = _option_label(axis, option)
            runs = [r for lab, r in zip(labels, results) if lab == (axis, label)]
            (ade, ade_sd), (ap, ap_sd) = mean_std(r["minADE"] for r in runs), mean_std(r["mAP"] for r in runs)
            rows.append({"axis": axis, "option": label, "seeds": len(runs),
                         "mAP": f"{ap:.4f} ({ap_sd:.4f})", "minADE": f"{ade:.4f} ({ade_sd:.4f})",
                         "mAP_mean": repr(ap), "mAP_std": repr(ap_sd),
                         "minADE_mean": repr(ade), "minADE_std": repr(ade_sd)})
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablate.csv").write_text(buf.getvalue())
    _append_manifest(out, {"command": "ablate", "config": vars(args), "seed": list(range(args.seeds)),
                           "started": started, "finished": _now(), "inputs": [args.data],
                           "outputs": [str(out / "ablate.csv")], "results": rows})
    print(ablation_table(rows))
    return 0


def ablation_table(rows: list[dict]) -> str:
    """Side-by-side text table, one column group per axis."""
    groups = {}
    for r in rows:
        groups.setdefault(r["axis"], []).append(r)
    names = {"frames": "Time steps", "features": "LiDAR features"}
    head = " | ".join(f"{names[a]:<14s} {'mAP':>16s} {'minADE':>16s}" for a in groups)
    lines = [head]
    for i in range(max(len(g) for g in groups.values())):
        cells = []
        for g in groups.values():
            r = g[i] if i < len(g) else {"option": "", "mAP": "", "minADE": ""}
            cells.append(f"{r['option']:<14s} {r['mAP']:>16s} {r['minADE']:>16s}")
        lines.append(" | ".join(cells))
    return "\n".join(lines)


COMMANDS = {"gen": cmd_gen, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
            "sweep": cmd_sweep, "ablate": cmd_ablate}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
