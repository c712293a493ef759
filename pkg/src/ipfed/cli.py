"""Command-line entry points.

Every command reads a ``key = value`` config (``--config``), applies
``--set key=value`` overrides, and writes outputs under ``output_dir``
(default: ``$IPFED_OUTPUT_DIR`` or ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from . import __version__
from .config import PROTOCOLS, RunConfig, load_config
from .data import export_dataset_csv, export_scores_csv, generate_dataset, import_dataset_csv
from .equivalence import check_equivalence
from .experiment import (
    Evaluator,
    initial_params,
    pretrain,
    run_training,
    sweep_subjects,
    write_metrics_jsonl,
    write_sweep_csv,
)
from .federation import check_log_discipline, privacy_audit
from .messages import read_jsonl
from .model import layer_shapes, load_checkpoint, save_checkpoint


class CLIError(Exception):
    pass


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()]


def _build_config(args, **extra) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["output_dir"] = args.out_dir
    overrides.update(extra)
    try:
        return load_config(args.config, overrides)
    except (KeyError, ValueError, OSError) as exc:
        raise CLIError(f"invalid config: {exc}") from exc


def _out_path(cfg: RunConfig, given, default_name) -> Path:
    path = Path(given) if given else Path(cfg.output_dir) / default_name
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {path.parent}: {exc}") from exc
    return path


def _dataset(cfg, args):
    if getattr(args, "data", None):
        return import_dataset_csv(args.data)
    return generate_dataset(cfg.dataset_spec, cfg.seed)


def _load_matching_checkpoint(path, cfg):
    if not path or not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    params = load_checkpoint(path)
    expected = layer_shapes(cfg.input_dim, cfg.widths, cfg.d)
    if params.shapes != expected:
        raise CLIError(f"checkpoint layers {params.shapes} do not match config {expected}")
    return params


def _print_json(obj):
    print(json.dumps(obj, sort_keys=True))


def cmd_gen_data(args):
    cfg = _build_config(args)
    ds = generate_dataset(cfg.dataset_spec, cfg.seed)
    out = _out_path(cfg, args.out, "dataset.csv")
    export_dataset_csv(ds, out)
    _print_json({"dataset": str(out), "pretrain_ids": cfg.num_pretrain_ids, "clients": len(ds.clients), "eval_ids": cfg.num_eval_ids})
    return 0


def cmd_pretrain(args):
    cfg = _build_config(args)
    ds = _dataset(cfg, args)
    params = pretrain(cfg, ds)
    out = _out_path(cfg, args.out, "pretrained.ckpt")
    save_checkpoint(params, out)
    metrics = Evaluator(ds, cfg)(params)
    _print_json({"checkpoint": str(out), "epochs": cfg.pretrain_epochs, **metrics})
    return 0


def cmd_train(args):
    extra = {"protocol": args.protocol} if args.protocol else {}
    cfg = _build_config(args, **extra)
    params = _load_matching_checkpoint(args.checkpoint, cfg)
    ds = _dataset(cfg, args)
    if len(ds.clients) != cfg.num_clients:
        raise CLIError(f"dataset has {len(ds.clients)} clients but config says {cfg.num_clients}")
    result = run_training(cfg, params, ds, Evaluator(ds, cfg))
    metrics_path = _out_path(cfg, args.metrics, f"metrics_{cfg.protocol}.jsonl")
    ckpt_path = _out_path(cfg, args.out, f"final_{cfg.protocol}.ckpt")
    write_metrics_jsonl(result.history, metrics_path)
    save_checkpoint(result.params, ckpt_path)
    if args.message_log:
        if result.log is None:
            raise CLIError("centralized fine-tuning has no message log")
        result.log.write_jsonl(_out_path(cfg, args.message_log, "messages.jsonl"))
    for rec in result.history:
        if rec["tar_at_far"] is not None:
            _print_json(rec)
    return 0


def cmd_eval(args):
    cfg = _build_config(args)
    params = _load_matching_checkpoint(args.checkpoint, cfg) if args.checkpoint else initial_params(cfg)
    ds = _dataset(cfg, args)
    evaluator = Evaluator(ds, cfg)
    if args.scores_out:
        gen, imp = evaluator.scores(params)
        export_scores_csv(gen, imp, _out_path(cfg, args.scores_out, "scores.csv"))
    _print_json({"far_target": cfg.far_target, **evaluator(params)})
    return 0


def cmd_check_equivalence(args):
    cfg = _build_config(args)
    report = check_equivalence(
        trials=args.trials,
        d_list=_int_list(args.d_list),
        c_list=_int_list(args.c_list),
        tolerance=args.tolerance,
        seed=cfg.seed,
        p=cfg.spreadout_params,
    )
    print(report.summary())
    for key, kind, gap in report.failures[:20]:
        print(f"  trial={key[0]} d={key[1]} C={key[2]} {kind}: gap {gap:.3e}")
    return 0 if report.passed else 1


def cmd_sweep_subjects(args):
    cfg = _build_config(args)
    seeds = _int_list(args.seeds) if args.seeds else None
    rows = sweep_subjects(cfg, _int_list(args.subjects), seeds)
    out = _out_path(cfg, args.out, "sweep_subjects.csv")
    write_sweep_csv(rows, out)
    for row in rows:
        _print_json(row)
    return 0


def cmd_audit(args):
    if args.log:
        records = read_jsonl(args.log)
        errors = check_log_discipline(records, args.protocol or "ipfed")
        _print_json({"log": args.log, "messages": len(records), "discipline_errors": errors})
        return 0 if not errors else 1
    extra = {"protocol": args.protocol} if args.protocol else {}
    cfg = _build_config(args, **extra)
    if cfg.protocol == "finetune":
        raise CLIError("centralized fine-tuning has no message layer to audit")
    params = _load_matching_checkpoint(args.checkpoint, cfg) if args.checkpoint else initial_params(cfg)
    ds = _dataset(cfg, args)
    result = run_training(cfg.replace(eval_every=0), params, ds)
    truth = {rep.round: rep.true_embeddings for rep in result.reports}
    report = privacy_audit(result.log, truth, cfg.protocol)
    if args.message_log:
        result.log.write_jsonl(_out_path(cfg, args.message_log, "messages.jsonl"))
    _print_json(
        {
            "protocol": cfg.protocol,
            "transform_mode": cfg.transform_mode,
            "rounds_checked": report.rounds_checked,
            "violations": len(report.violations),
            "flagged_rounds": len(report.flagged_rounds),
            "discipline_errors": report.discipline_errors,
        }
    )
    return 0 if report.ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipfed", description="Identity-protected federated learning simulator")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", help="output directory (default $IPFED_OUTPUT_DIR or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="export the synthetic dataset as CSV")
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", parents=[common], help="centralized pre-training, writes a checkpoint")
    p.add_argument("--data", help="dataset CSV (default: generate from config)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="federated training from a checkpoint")
    p.add_argument("--protocol", choices=PROTOCOLS)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--metrics", help="metrics JSONL path")
    p.add_argument("--out", help="final checkpoint path")
    p.add_argument("--message-log", help="write the message log as JSON lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="verification metrics on held-out identities")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--scores-out", help="write pair scores CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-equivalence", parents=[common], help="projected vs plain spreadout oracle")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--d-list", default="4,16,64")
    p.add_argument("--c-list", default="3,10,50")
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_check_equivalence)

    p = sub.add_parser("sweep-subjects", parents=[common], help="final TAR@FAR per method and client count")
    p.add_argument("--subjects", default="10,50")
    p.add_argument("--seeds", help="comma-separated seeds to average over")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_subjects)

    p = sub.add_parser("audit", parents=[common], help="run a protocol and audit its message log")
    p.add_argument("--protocol", choices=[p for p in PROTOCOLS if p != "finetune"])
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--message-log", help="also write the audited log")
    p.add_argument("--log", help="only check kind/route discipline of an existing JSONL log")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except CLIError as exc:
        print(f"ipfed {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
