"""Command-line entry point: ``ranp {gen-data,train,eval,predict,compare}``.

Exit codes: 0 success, 2 usage or config error, 3 data error, 4 numeric abort.
``RANP_OUT`` sets the default output root (``runs`` otherwise).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from . import synthetic as syn
from . import trajectory as traj
from .autodiff import NonFiniteError
from .config import ConfigError, read_ini, to_kv, write_ini
from .models import CheckpointError, ContextTargetBatch, ModelConfig, load_checkpoint
from .training import (
    RunConfig,
    TrainConfig,
    TrainingAborted,
    compare_variants,
    evaluate_nll,
    make_source,
    read_manifest,
    run_config_from_sections,
    run_dir_for,
    train,
    write_manifest,
)

OUT_ENV = "RANP_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("ranp")


class UsageError(Exception):
    pass


def default_out() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, args: dict, artifacts: Sequence[str]) -> None:
    _write_json(
        out / "manifest.json",
        {"tool": "ranp", "version": __version__, "command": command, "args": args, "artifacts": sorted(artifacts)},
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    sections = {name: read_ini(path, name) for name in ("run", "model", "train")}
    extra = _unknown_sections(path)
    if extra:
        raise ConfigError(f"{path}: unknown sections {extra}", extra)
    return run_config_from_sections(sections)


def _unknown_sections(path: Path) -> List[str]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path)
    return [s for s in parser.sections() if s not in ("run", "model", "train")]


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    out = Path(args.out) if args.out else default_out() / f"data-{args.task}-s{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    if args.task == "synthetic":
        path = out / "realizations.csv"
        batch = syn.sample_batch(rng, args.count, (args.context_min, args.context_max)) if args.count else None
        syn.write_realizations_csv(path, batch)
    else:
        path = out / "trajectories.csv"
        cfg = traj.ScenarioConfig()
        records = []
        for i in range(args.count):
            records.extend(traj.synth_traffic(np.random.default_rng([args.seed, i]), cfg, scenario=i).records)
        traj.write_csv(path, records)
    flags = {"task": args.task, "seed": args.seed, "count": args.count}
    if args.task == "synthetic":
        flags.update(context_min=args.context_min, context_max=args.context_max)
    _manifest(out, "gen-data", flags, [path.name])
    print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    if args.manifest:
        run = read_manifest(args.manifest)
    elif args.config:
        run = load_run_config(args.config)
    else:
        run = RunConfig(ModelConfig(), TrainConfig())
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if changes:
        run = replace(run, train=replace(run.train, **changes))
    if args.print_config:
        for name, values in run.to_sections().items():
            print(f"[{name}]")
            for k, v in values.items():
                print(f"{k} = {v}")
            print()
        return EXIT_OK
    root = Path(args.out) if args.out else default_out()
    run_dir = run_dir_for(root, run)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_ini(run_dir / "config.ini", run.to_sections())
    try:
        result = train(run, run_dir, progress=True)
    except TrainingAborted as exc:
        write_manifest(run_dir, run, {"status": "aborted", "aborted_at": exc.iteration})
        print(f"error: {exc}; last good checkpoint in {run_dir / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    write_manifest(run_dir, run, {"status": "ok", "final_nll": result.final_nll})
    print(run_dir)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _eval_set_from_csv(path, model_cfg: ModelConfig, batch_size: int = 16) -> List[ContextTargetBatch]:
    rb = syn.read_realizations_csv(path)
    if not rb.realizations:
        raise traj.DataError(f"{path}: no realizations")
    window = model_cfg.window if model_cfg.sequential else None
    out = []
    for start in range(0, len(rb.realizations), batch_size):
        sl = slice(start, start + batch_size)
        out.append(syn.RealizationBatch(rb.realizations[sl], rb.context_idx[sl], rb.target_idx[sl]).to_batch(window))
    return out


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    config = model.config
    if args.data:
        eval_set = _eval_set_from_csv(args.data, config)
        source = str(args.data)
    else:
        tcfg = load_run_config(args.config).train if args.config else TrainConfig()
        tcfg = replace(tcfg, eval_seed=args.eval_seed)
        eval_set = make_source(config, tcfg).eval_set()
        source = f"{tcfg.dataset}:eval_seed={args.eval_seed}"
    nll = evaluate_nll(model, eval_set, args.z_samples, seed=args.eval_seed)
    report = {
        "checkpoint": str(args.checkpoint),
        "model": to_kv(config),
        "eval_source": source,
        "eval_seed": args.eval_seed,
        "z_samples": args.z_samples,
        "nll_per_dim": nll,
        "n_targets": int(sum(b.batch_size * b.n_target for b in eval_set)),
    }
    print(f"nll={nll:.6f}")
    out = Path(args.out) if args.out else Path(args.checkpoint).with_suffix(".eval.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_json(out, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def read_xy_csv(path, need_y: bool) -> tuple:
    """Read ``x`` (and ``y``) columns; errors name the offending line."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        need = ["x", "y"] if need_y else ["x"]
        missing = [c for c in need if c not in fields]
        if missing:
            raise traj.SchemaError(f"{path}: missing columns {missing}")
        xs, ys = [], []
        for line, row in enumerate(reader, start=2):
            try:
                xs.append(float(row["x"]))
                if need_y:
                    ys.append(float(row["y"]))
            except (TypeError, ValueError):
                raise traj.DataError(f"{path}: malformed row at line {line}") from None
    return np.array(xs), np.array(ys)


def predict_inputs(model_cfg: ModelConfig, x_context: np.ndarray, x_target: np.ndarray):
    """Model inputs for 1-D ``x``; sequential models window the merged ordered sequence."""
    if not model_cfg.sequential:
        return x_context[:, None], x_target[:, None]
    seq = np.unique(np.concatenate([x_context, x_target]))
    windows = syn.make_windows(seq, model_cfg.window)
    pos = {float(v): i for i, v in enumerate(seq)}
    return windows[[pos[float(v)] for v in x_context]], windows[[pos[float(v)] for v in x_target]]


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    xc, yc = read_xy_csv(args.context, need_y=True)
    xt, _ = read_xy_csv(args.targets, need_y=False)
    if xc.size == 0:
        raise UsageError(f"{args.context}: context set is empty")
    if model.config.x_dim != 1:
        raise UsageError("predict supports models with scalar inputs")
    ic, it = predict_inputs(model.config, xc, xt)
    batch = ContextTargetBatch(ic[None], yc[None, :, None], it[None])
    columns = {"x": xt}
    for mode, tag in (("prior", "prior"), ("mean-z", "meanz")):
        pred = model.predict(batch, args.z_samples, mode, seed=args.seed)
        columns[f"pred_mu_{tag}"] = pred.mean[0, :, 0]
        columns[f"pred_sigma_{tag}"] = pred.std[0, :, 0]
    out = Path(args.out) if args.out else default_out() / "predictions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns))
        for i in range(xt.size):
            w.writerow([repr(float(v[i])) for v in columns.values()])
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(args) -> int:
    cfg_dir = Path(args.configs)
    if not cfg_dir.is_dir():
        raise UsageError(f"config directory not found: {cfg_dir}")
    paths = sorted(cfg_dir.glob("*.ini"))
    if len(paths) < 2:
        raise UsageError(f"{cfg_dir}: need at least two .ini configs, found {len(paths)}")
    runs = []
    for p in paths:
        run = load_run_config(p)
        if not run.name:
            run = replace(run, name=p.stem)
        if args.seed is not None:
            run = run.with_seed(args.seed)
        runs.append(run)
    out = Path(args.out) if args.out else default_out() / "compare"
    out.mkdir(parents=True, exist_ok=True)
    report = compare_variants(runs, root=out / "runs")
    curves = out / "curves"
    curves.mkdir(exist_ok=True)
    for k, row in enumerate(report["variants"]):
        path = curves / f"{k:02d}-{row['name']}.csv"
        path.write_text("iteration,nll\n" + "".join(f"{i},{v!r}\n" for i, v in row["curve"]))
    _write_json(out / "comparison.json", report)
    print(f"verdict: {report['verdict']}  ordering: {' < '.join(report['ordering'])}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ranp", description="Neural process variants for sequence regression.")
    p.add_argument("--version", action="version", version=f"ranp {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=str, default=None, help=f"output path (default root: ${OUT_ENV} or ./runs)")
        if config:
            sp.add_argument("--config", type=str, default=None, help="INI file with [model] and [train] sections")

    g = sub.add_parser("gen-data", help="write a synthetic or traffic dataset as CSV")
    common(g, config=False)
    g.add_argument("--task", choices=("synthetic", "traffic"), default="synthetic")
    g.add_argument("--count", type=int, default=16)
    g.add_argument("--context-min", type=int, default=5)
    g.add_argument("--context-max", type=int, default=45)
    g.set_defaults(func=cmd_gen_data, seed=0)

    t = sub.add_parser("train", help="train one model")
    common(t)
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--manifest", type=str, default=None, help="rerun the config recorded in a manifest")
    t.add_argument("--print-config", action="store_true", help="print the resolved config with all defaults")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mean target NLL of a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--eval-seed", type=int, default=TrainConfig.eval_seed)
    e.add_argument("--z-samples", type=int, default=TrainConfig.eval_z_samples)
    e.add_argument("--data", type=str, default=None, help="realizations CSV to evaluate on")
    e.set_defaults(func=cmd_eval, seed=0)

    r = sub.add_parser("predict", help="predictive mean and sigma at target inputs")
    common(r, config=False)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--context", required=True, help="CSV with x,y columns")
    r.add_argument("--targets", required=True, help="CSV with an x column")
    r.add_argument("--z-samples", type=int, default=16)
    r.set_defaults(func=cmd_predict, seed=0)

    c = sub.add_parser("compare", help="train and rank several configs")
    common(c, config=False)
    c.add_argument("--configs", required=True, help="directory of .ini configs")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (traj.DataError, CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingAborted, NonFiniteError, syn.NumericError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
