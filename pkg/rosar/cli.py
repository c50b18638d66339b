"""
Command line interface.

Every subcommand reads and writes the file artifacts of the package and
records a ``run_manifest.json`` in its output directory::

   rosar gen-data --variant clean --count 10 --seed 7 --out data/clean
   rosar train --data data/clean --out models
   rosar bound-search --model models/model.weights --data data/clean \\
       --property p1 --out search/p1
   rosar pipeline --config configs/benchmark.json --out runs/benchmark

Options given on the command line override the ``--config`` file, which
overrides the built-in defaults. ``ROSAR_SEED`` sets the default seed.
"""

__all__ = ["main", "build_parser"]

# Standard library modules.
import argparse
import logging
import os
import sys
import time

# Third party modules.

# Local modules.
from rosar import __version__
from rosar.rcsetup import rcParams, rc_context, rc_file, read_config
from rosar.detector import DetectorConfig, init_model, save_model, load_model
from rosar.sonar import VARIANTS, generate_dataset, write_dataset, read_dataset
from rosar.properties import P1, P2
from rosar.pgd import AttackConfig
from rosar.bound_search import (
    SearchConfig,
    binary_search_bound,
    write_records,
    read_records,
    assemble_adv_dataset,
)
from rosar.patch import train_patch, save_patch, load_patch, build_patch_dataset, transfer_report
from rosar.training import TrainConfig, train, finetune_sweep
from rosar.metrics import evaluate, report
from rosar.pipeline import Pipeline, StageError, write_run_manifest
from rosar.fileio import write_json, read_json

# Globals and constants variables.
logger = logging.getLogger(__name__)

PROG = "rosar"

_DIRECTIONS = ["high_eps_unsafe", "low_eps_unsafe"]
_SELECTIONS = ["all", "top"]


def _time_limit(value):
    if value.lower() in ("none", "inf"):
        return None
    try:
        seconds = float(value)
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"invalid time limit: {value}") from ex
    if seconds <= 0:
        raise argparse.ArgumentTypeError(
            f"time limit must be > 0, got {value} (use none for no limit)"
        )
    return seconds


def _epoch_list(value):
    try:
        epochs = sorted({int(v) for v in value.split(",") if v.strip()})
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f"invalid epoch list: {value}") from ex
    if not epochs or epochs[0] < 0:
        raise argparse.ArgumentTypeError(f"invalid epoch list: {value}")
    return epochs


def _model_id(path):
    return os.path.splitext(os.path.basename(path))[0]


# Subcommands


def cmd_gen_data(args):
    config = DetectorConfig()
    manifest = generate_dataset(
        args.variant,
        args.count,
        args.seed,
        name=args.name,
        h=config.height,
        w=config.width,
        c=config.channels,
    )
    write_dataset(manifest, args.out)
    return {"variant": args.variant, "count": args.count, "seed": args.seed}, [], [args.out]


def cmd_train(args):
    dataset = read_dataset(args.data)
    options = {"epochs": args.epochs, "lr": args.lr}
    cfg = TrainConfig(seed=args.seed, **{k: v for k, v in options.items() if v is not None})
    model_seed = args.seed if args.model_seed is None else args.model_seed
    model = train(init_model(DetectorConfig(), model_seed), dataset, cfg, progress=args.progress)
    path = os.path.join(args.out, args.name + ".weights")
    save_model(model, path)
    return {"model_seed": model_seed, "train": cfg.to_dict()}, [args.data], [path]


def _attack_config(args):
    options = {"steps": args.steps, "restarts": args.restarts}
    return AttackConfig(seed=args.seed, **{k: v for k, v in options.items() if v is not None})


def cmd_bound_search(args):
    model = load_model(args.model)
    dataset = read_dataset(args.data)
    kwargs = {
        "lower": args.lower,
        "upper": args.upper,
        "direction": args.direction,
        "attack": _attack_config(args),
        "seed": args.seed,
    }
    if args.max_iter is not None:
        kwargs["max_iter"] = args.max_iter
    if "time_limit" in vars(args):
        kwargs["time_limit"] = args.time_limit
    if args.selection is not None:
        kwargs["selection"] = args.selection
    cfg = SearchConfig(args.property, **kwargs)

    records = binary_search_bound(
        model,
        dataset,
        cfg,
        out_dir=args.out,
        workers=args.workers,
        model_id=args.model_id or _model_id(args.model),
        progress=args.progress,
    )
    path = os.path.join(args.out, "records.jsonl")
    write_records(path, records)
    return cfg.to_dict(), [args.model, args.data], [path]


def cmd_gen_adv_dataset(args):
    records = read_records(os.path.join(args.search, "records.jsonl"))
    manifest = assemble_adv_dataset(records, args.search, args.name)
    write_dataset(manifest, args.out)
    return {"name": args.name, "entries": len(manifest)}, [args.search], [args.out]


def cmd_train_patch(args):
    dataset = read_dataset(args.data)
    surrogate = load_model(args.model)
    patch = train_patch(
        surrogate,
        dataset,
        size=args.size,
        epochs=args.epochs,
        w_obj=args.w_obj,
        w_tv=args.w_tv,
        step_size=args.step_size,
        scale=args.scale,
        progress=args.progress,
    )
    prefix = os.path.join(args.out, "patch")
    save_patch(patch, prefix)
    outputs = [prefix + ".json"]
    inputs = [args.model, args.data]
    if args.victim:
        victim = load_model(args.victim)
        path = os.path.join(args.out, "transfer.json")
        write_json(path, transfer_report(patch, surrogate, victim, dataset, args.scale))
        outputs.append(path)
        inputs.append(args.victim)
    params = {k: v for k, v in patch.metadata.items() if k != "loss_history"}
    return params, inputs, outputs


def cmd_patch_dataset(args):
    dataset = read_dataset(args.data)
    patch = load_patch(args.patch)
    manifest = build_patch_dataset(dataset, patch, args.scale, args.name, args.workers)
    write_dataset(manifest, args.out)
    return {"scale": manifest.metadata["scale"]}, [args.patch, args.data], [args.out]


def cmd_retrain(args):
    model = load_model(args.model)
    adv = read_dataset(args.data)
    if len(adv) == 0:
        raise ValueError(f"Adversarial dataset {args.data} is empty")
    epochs = args.epochs or rcParams["finetune.epochs"]
    cfg = TrainConfig(seed=args.seed)
    snapshots = finetune_sweep(model, adv, epochs, cfg, args.lr_factor, progress=args.progress)
    outputs = []
    for count, snapshot in sorted(snapshots.items()):
        path = os.path.join(args.out, f"{args.name}-e{count}.weights")
        save_model(snapshot, path)
        outputs.append(path)
    return {"epochs": epochs, "train": cfg.to_dict()}, [args.model, args.data], outputs


def cmd_evaluate(args):
    evaluations = {}
    for model_path in args.model:
        model = load_model(model_path)
        model_id = _model_id(model_path)
        evaluations[model_id] = {}
        for data in args.data:
            dataset = read_dataset(data)
            result = evaluate(model, dataset, args.iou_threshold, args.conf_threshold, args.workers)
            evaluations[model_id][dataset.name] = result.to_dict()
            logger.info(
                "%s on %s: TP %.1f%%, FP %d, AP %.4f",
                model_id, dataset.name, result.tp_percent, result.fp_count, result.ap,
            )
    path = os.path.join(args.out, "evaluation.json")
    write_json(path, evaluations)
    return {"iou_threshold": args.iou_threshold}, list(args.model) + list(args.data), [path]


def cmd_report(args):
    records = []
    for search in args.search:
        records.extend(read_records(os.path.join(search, "records.jsonl")))
    evaluations = read_json(args.evaluation) if args.evaluation else None
    report(records, args.out, evaluations, baseline_model=args.baseline)
    outputs = [os.path.join(args.out, "robustness.csv"), os.path.join(args.out, "summary.json")]
    inputs = list(args.search) + ([args.evaluation] if args.evaluation else [])
    return {"baseline": args.baseline}, inputs, outputs


def cmd_pipeline(args):
    config = read_config(args.config)
    pipeline = Pipeline(config, args.out, workers=args.workers, progress=args.progress)
    completed = pipeline.run()
    params = {"config": config, "completed": completed, "skipped": pipeline.skipped}
    return params, [args.config], [os.path.join(args.out, "report")]


# Parser


def _add_common(parser, out_required=True, seed_help="random seed"):
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help=seed_help)
    parser.add_argument("--workers", type=int, default=None, help="worker threads")


def _add_search_options(parser):
    parser.add_argument("--model", required=True, help="weight file")
    parser.add_argument("--data", required=True, help="dataset directory")
    parser.add_argument("--model-id", default=None, help="model identifier in records")
    parser.add_argument("--property", choices=[P1, P2], required=True)
    parser.add_argument("--lower", type=float, default=None, help="initial lower bound")
    parser.add_argument("--upper", type=float, default=None, help="initial upper bound")
    parser.add_argument("--max-iter", type=int, default=None, help="bisection steps")
    parser.add_argument(
        "--time-limit", type=_time_limit, default=argparse.SUPPRESS,
        help="seconds per attack (> 0), or none for no limit "
        "(default: rcParams['pgd.time_limit'])",
    )
    parser.add_argument("--direction", choices=_DIRECTIONS, default=None)
    parser.add_argument("--selection", choices=_SELECTIONS, default=None)
    parser.add_argument("--steps", type=int, default=None, help="PGD steps per restart")
    parser.add_argument("--restarts", type=int, default=None, help="PGD restarts")


def build_parser():
    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true", help="hide progress bars")
    parser.add_argument("--config", default=None, help="JSON configuration file")
    subparsers = parser.add_subparsers(dest="command", required=True)

    sub = subparsers.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(sub)
    sub.add_argument("--variant", choices=VARIANTS, required=True)
    sub.add_argument("--count", type=int, required=True)
    sub.add_argument("--name", default=None)
    sub.set_defaults(func=cmd_gen_data)

    sub = subparsers.add_parser("train", help="train a detector")
    _add_common(sub)
    sub.add_argument("--data", required=True)
    sub.add_argument("--name", default="model")
    sub.add_argument("--model-seed", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--lr", type=float, default=None)
    sub.set_defaults(func=cmd_train)

    sub = subparsers.add_parser("bound-search", help="search robustness thresholds")
    _add_common(sub)
    _add_search_options(sub)
    sub.set_defaults(func=cmd_bound_search)

    sub = subparsers.add_parser("gen-adv-dataset", help="collect counter-examples")
    _add_common(sub)
    sub.add_argument("--search", required=True, help="bound-search output directory")
    sub.add_argument("--name", default="adversarial")
    sub.set_defaults(func=cmd_gen_adv_dataset)

    sub = subparsers.add_parser("train-patch", help="train an adversarial patch")
    _add_common(sub)
    sub.add_argument("--model", required=True, help="surrogate weight file")
    sub.add_argument("--data", required=True)
    sub.add_argument("--victim", default=None, help="weight file of the transfer victim")
    sub.add_argument("--size", type=int, default=None)
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--w-obj", type=float, default=None)
    sub.add_argument("--w-tv", type=float, default=None)
    sub.add_argument("--step-size", type=float, default=None)
    sub.add_argument("--scale", type=float, default=None)
    sub.set_defaults(func=cmd_train_patch)

    sub = subparsers.add_parser("patch-dataset", help="paste a patch on a dataset")
    _add_common(sub)
    sub.add_argument("--patch", required=True, help="patch file prefix")
    sub.add_argument("--data", required=True)
    sub.add_argument("--scale", type=float, default=None)
    sub.add_argument("--name", default=None)
    sub.set_defaults(func=cmd_patch_dataset)

    sub = subparsers.add_parser("retrain", help="fine-tune on an adversarial dataset")
    _add_common(sub)
    sub.add_argument("--model", required=True)
    sub.add_argument("--data", required=True, help="adversarial dataset directory")
    sub.add_argument("--name", default="retrained")
    sub.add_argument("--epochs", type=_epoch_list, default=None, help="e.g. 5,10,15,20")
    sub.add_argument("--lr-factor", type=float, default=None)
    sub.set_defaults(func=cmd_retrain)

    sub = subparsers.add_parser("evaluate", help="compute %%TP, FP and AP")
    _add_common(sub)
    sub.add_argument("--model", action="append", required=True)
    sub.add_argument("--data", action="append", required=True)
    sub.add_argument("--iou-threshold", type=float, default=None)
    sub.add_argument("--conf-threshold", type=float, default=None)
    sub.set_defaults(func=cmd_evaluate)

    sub = subparsers.add_parser("report", help="write robustness.csv and summary.json")
    _add_common(sub)
    sub.add_argument("--search", action="append", required=True)
    sub.add_argument("--evaluation", default=None, help="evaluation.json")
    sub.add_argument("--baseline", default=None, help="model id of the deltas")
    sub.set_defaults(func=cmd_report)

    sub = subparsers.add_parser("pipeline", help="run the full pipeline")
    _add_common(sub, seed_help="ignored, the configuration file sets the seed")
    sub.add_argument("pipeline_config", nargs="?", default=None, help="JSON configuration")
    sub.set_defaults(func=cmd_pipeline)

    return parser


def _configure_logging(verbose):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose > 1:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _run(parser, args):
    if args.command == "pipeline":
        args.config = args.pipeline_config or args.config
        if args.config is None:
            parser.error("pipeline requires a configuration file")
    else:
        if args.config is not None:
            rc_file(args.config)
        if args.workers is None:
            args.workers = rcParams["workers"]
    if args.seed is None:
        args.seed = rcParams["seed"]

    os.makedirs(args.out, exist_ok=True)
    started = time.time()
    params, inputs, outputs = args.func(args)
    write_run_manifest(args.out, args.command, params, inputs, outputs, started)


def main(argv=None):
    """
    Entry point of the ``rosar`` command.

    :return: exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as ex:
        return ex.code

    _configure_logging(args.verbose)
    args.progress = not args.quiet

    try:
        with rc_context():
            _run(parser, args)
    except SystemExit as ex:
        return ex.code
    except StageError as ex:
        print(f"{PROG}: error: {ex}", file=sys.stderr)
        return 1
    except KeyError as ex:
        print(f"{PROG}: error: missing key {ex}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as ex:
        print(f"{PROG}: error: {args.command}: {ex}", file=sys.stderr)
        return 1

    return 0
