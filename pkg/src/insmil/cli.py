"""Command-line interface: gen / train / eval / gradcheck.

Options come from an optional JSON config file plus flag overrides; flags
win.  Every command echoes its fully resolved configuration to the output
location before acting, so a run can be reproduced from its echo alone.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or configuration
error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (SyntheticConfig, generate_gaussian_mil, generate_grid_mil,
                   load_dataset, save_dataset)
from .errors import ConfigurationError, InsmilError
from .metrics import evaluate, export_score_map, predict_instances
from .nn import gradcheck
from .training import (TrainConfig, build_gradcheck_problem, fit, train_loop,
                       write_metrics_csv)

_DATA_FIELDS = ("n_pos_bags", "n_neg_bags", "instances_per_bag", "positive_ratio",
                "d_raw", "class_separation", "noise_sigma", "seed")
_TRAIN_FIELDS = tuple(TrainConfig.__dataclass_fields__.keys())


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file is not valid JSON: {exc}")
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return doc


def _merge(section: dict, overrides: dict, allowed: tuple[str, ...]) -> dict:
    merged = {}
    for key, value in section.items():
        if key not in allowed:
            raise ConfigurationError(f"unknown config key {key!r}")
        merged[key] = value
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged


def _echo(doc: dict, path) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insmil",
        description="Weakly supervised MIL: synthetic bags, joint training, "
                    "evaluation, and gradient checking.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset file")
    p_gen.add_argument("--out", required=True, help="output dataset path (.jsonl)")
    p_gen.add_argument("--config", help="JSON config file (uses its 'data' section)")
    p_gen.add_argument("--pos-bags", type=int, dest="n_pos_bags")
    p_gen.add_argument("--neg-bags", type=int, dest="n_neg_bags")
    p_gen.add_argument("--bags", type=int,
                       help="shorthand: sets both --pos-bags and --neg-bags")
    p_gen.add_argument("--per-bag", type=int, dest="instances_per_bag")
    p_gen.add_argument("--ratio", type=float, dest="positive_ratio")
    p_gen.add_argument("--d-raw", type=int, dest="d_raw")
    p_gen.add_argument("--sep", type=float, dest="class_separation")
    p_gen.add_argument("--noise", type=float, dest="noise_sigma")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--grid-side", type=int,
                       help="emit the spatial grid variant with this side length")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train on a dataset file")
    p_train.add_argument("--data", required=True, help="dataset path (.jsonl)")
    p_train.add_argument("--out-dir", required=True)
    p_train.add_argument("--config", help="JSON config file (uses its 'train' section)")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--dry-run", action="store_true",
                         help="validate and echo the config, then stop")
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.add_argument("--lr", type=float)
    p_train.add_argument("--sgd-momentum", type=float, dest="sgd_momentum")
    p_train.add_argument("--tau", type=float)
    p_train.add_argument("--alpha", type=float)
    p_train.add_argument("--beta", type=float)
    p_train.add_argument("--ema-m", type=float, dest="ema_m")
    p_train.add_argument("--lambda1", type=float)
    p_train.add_argument("--lambda2", type=float)
    p_train.add_argument("--queue-capacity", type=int, dest="queue_capacity")
    p_train.add_argument("--embed-dim", type=int, dest="embed_dim")
    p_train.add_argument("--aug-noise-sigma", type=float, dest="aug_noise_sigma")
    p_train.add_argument("--aug-dropout-p", type=float, dest="aug_dropout_p")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--encoder-hidden", type=int, dest="encoder_hidden")
    p_train.add_argument("--classifier-hidden", type=int, dest="classifier_hidden")
    p_train.add_argument("--bag-pool-source", choices=("projection", "encoder"),
                         dest="bag_pool_source")
    p_train.add_argument("--infonce-denominator", action=argparse.BooleanOptionalAction,
                         default=None, dest="infonce_denominator")
    p_train.add_argument("--iwscl", action=argparse.BooleanOptionalAction,
                         default=None, dest="iwscl_enabled",
                         help="--no-iwscl disables the contrastive term (ablation)")
    p_train.add_argument("--iwscl-during-warmup", action=argparse.BooleanOptionalAction,
                         default=None, dest="iwscl_during_warmup")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--out-dir", required=True)
    p_eval.add_argument("--export-maps", action="store_true",
                        help="write per-bag score-map CSV/SVG (grid datasets)")
    p_eval.add_argument("--restrict-positive-bags", action="store_true",
                        help="instance metrics over positive-bag instances only")
    p_eval.set_defaults(func=cmd_eval)

    p_gc = sub.add_parser("gradcheck",
                          help="finite-difference check of the total training loss")
    p_gc.add_argument("--seed", type=int, default=0)
    p_gc.add_argument("--epsilon", type=float, default=1e-6)
    p_gc.add_argument("--tolerance", type=float, default=1e-5)
    p_gc.add_argument("--corrupt", action="store_true",
                      help="inject a gradient error (negative control)")
    p_gc.add_argument("--out-dir", help="also write the report as JSON")
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config).get("data", {})
    grid_side = args.grid_side
    if grid_side is None:
        grid_side = file_cfg.pop("grid_side", None) if isinstance(file_cfg, dict) else None
    else:
        file_cfg = dict(file_cfg)
        file_cfg.pop("grid_side", None)
    overrides = {name: getattr(args, name, None) for name in _DATA_FIELDS}
    if args.bags is not None:
        overrides["n_pos_bags"] = overrides["n_pos_bags"] or args.bags
        overrides["n_neg_bags"] = overrides["n_neg_bags"] or args.bags
    merged = _merge(dict(file_cfg), overrides, _DATA_FIELDS)
    missing = [f for f in ("n_pos_bags", "n_neg_bags", "instances_per_bag",
                           "positive_ratio", "d_raw") if f not in merged]
    if missing:
        raise ConfigurationError(f"missing data config fields: {', '.join(missing)}")
    cfg = SyntheticConfig(**merged)
    cfg.validate()
    manifest = {"command": "gen", "out": args.out, "grid_side": grid_side,
                "data": asdict(cfg)}
    _echo(manifest, args.out + ".manifest.json")
    ds = (generate_grid_mil(cfg, int(grid_side)) if grid_side is not None
          else generate_gaussian_mil(cfg))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.bags)} bags ({ds.n_instances()} instances, "
          f"d_raw={ds.d_raw}) to {args.out}")
    return 0


def _resolve_train_config(args, resumed_cfg: TrainConfig | None) -> TrainConfig:
    file_cfg = _load_config_file(args.config).get("train", {})
    overrides = {name: getattr(args, name, None) for name in _TRAIN_FIELDS}
    merged = _merge(dict(file_cfg), overrides, _TRAIN_FIELDS)
    if resumed_cfg is not None:
        # The checkpoint's config governs a resumed run; only the epoch
        # horizon may be extended.
        cfg_dict = asdict(resumed_cfg)
        if "epochs" in merged:
            cfg_dict["epochs"] = merged["epochs"]
        cfg = TrainConfig(**cfg_dict)
    else:
        for required in ("epochs", "warmup_epochs"):
            if required not in merged:
                raise ConfigurationError(
                    f"missing train config field: {required}")
        cfg = TrainConfig(**merged)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    resumed = load_checkpoint(args.resume) if args.resume else None
    cfg = _resolve_train_config(args, resumed.cfg if resumed else None)
    os.makedirs(args.out_dir, exist_ok=True)
    echo = {"command": "train", "data": args.data, "out_dir": args.out_dir,
            "resume": args.resume, "dry_run": bool(args.dry_run),
            "train": asdict(cfg)}
    _echo(echo, os.path.join(args.out_dir, "resolved_config.json"))
    if args.dry_run:
        print(json.dumps(echo["train"], indent=2))
        print("dry run: config is valid; no training performed")
        return 0

    ds = load_dataset(args.data)
    metrics_path = os.path.join(args.out_dir, "metrics.csv")
    if resumed is not None:
        resumed.cfg = cfg
        flat = ds.flatten()
        new_rows = train_loop(resumed, flat, truth=flat.truth)
        state = resumed
        write_metrics_csv(new_rows, metrics_path,
                          append=os.path.exists(metrics_path))
    else:
        state, history = fit(ds, cfg)
        write_metrics_csv(history, metrics_path, append=False)
    ckpt_path = os.path.join(args.out_dir, "checkpoint.json")
    save_checkpoint(state, ckpt_path)

    from .plots import render_training_curves
    render_training_curves(state.history, os.path.join(args.out_dir, "curves.svg"))
    last = state.history[-1]
    auc_note = ("" if last.pseudo_auc is None
                else f", pseudo-label AUC {last.pseudo_auc:.4f}")
    print(f"trained {state.epoch} epochs; final total loss {last.total:.4f}"
          f"{auc_note}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return 0


def cmd_eval(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    echo = {"command": "eval", "ckpt": args.ckpt, "data": args.data,
            "out_dir": args.out_dir,
            "eval": {"export_maps": bool(args.export_maps),
                     "restrict_positive_bags": bool(args.restrict_positive_bags)}}
    _echo(echo, os.path.join(args.out_dir, "resolved_config.json"))
    state = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    report = evaluate(state, ds,
                      restrict_instance_to_positive_bags=args.restrict_positive_bags)
    report_path = os.path.join(args.out_dir, "report.json")
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    scores_path = os.path.join(args.out_dir, "bag_scores.csv")
    with open(scores_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "score", "label"])
        for bag_id, score, label in report.per_bag_scores:
            writer.writerow([bag_id, repr(score), label])
    if report.instance is not None:
        print(f"instance AUC {report.instance.auc:.4f} "
              f"(accuracy {report.instance.threshold_accuracy:.4f})")
    else:
        print("instance AUC unavailable (dataset carries no instance truth)")
    print(f"bag AUC {report.bag.auc:.4f} "
          f"(accuracy {report.bag.threshold_accuracy:.4f})")
    if args.export_maps:
        probs = predict_instances(state, ds)
        written = export_score_map(ds, probs, os.path.join(args.out_dir, "maps"))
        print(f"wrote {len(written)} score-map files")
    print(f"report: {report_path}")
    return 0


def cmd_gradcheck(args) -> int:
    loss_and_grad, params, names = build_gradcheck_problem(
        seed=args.seed, corrupt=args.corrupt)
    report = gradcheck(loss_and_grad, params, epsilon=args.epsilon,
                       tolerance=args.tolerance, param_names=names)
    for name in names:
        print(f"  {name:16s} max rel err {report.per_block[name]:.3e}")
    print(report.summary())
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        echo = {"command": "gradcheck", "seed": args.seed,
                "epsilon": args.epsilon, "tolerance": args.tolerance,
                "corrupt": bool(args.corrupt)}
        _echo(echo, os.path.join(args.out_dir, "resolved_config.json"))
        doc = {"passed": report.passed, "max_rel_err": report.max_rel_err,
               "tolerance": report.tolerance, "worst_block": report.worst_block,
               "per_block": report.per_block}
        with open(os.path.join(args.out_dir, "gradcheck_report.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
    return 0 if report.passed else 1


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors exit with code 2
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InsmilError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
