# ##################################################################
# cli
# every command reads a json config or defaults plus flags, writes into --out
# with a manifest.json, and turns any MalError into exit 2 and one error line

import argparse
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path

import setproctitle
from pydantic import BaseModel

from .benchmark import BenchmarkSettings, format_results, run_benchmark, save_results
from .config import (
    AblationGrid,
    AnchorGridConfig,
    DatasetConfig,
    EvalConfig,
    TrainConfig,
    config_hash,
    load_config,
    parse_config,
)
from .errors import CheckpointError, MalError, ReportError
from .evaluation import ASPECT_BUCKETS, evaluate, read_table
from .mal import fit
from .model import load_checkpoint, save_checkpoint
from .scenes import dataset_summary, generate_dataset, load_dataset, save_dataset

logger = logging.getLogger(__name__)

DATASET_FILE = "scenes.jsonl"
CHECKPOINT_FILE = "checkpoint.malckpt"
METRICS_FILE = "metrics.jsonl"
MANIFEST_FILE = "manifest.json"
ABLATION_COLUMNS = (
    "method",
    "bag_size",
    "selection",
    "depression",
    "seed",
    "ap",
    "ap50",
    "ap75",
    "score_iou_corr",
    "loc_share",
)


# ##################################################################
# manifest
# config + hash + seed, enough to rerun the command that wrote the folder
def write_manifest(out: Path, command: str, config: BaseModel, seed: int | None, inputs: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": config.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "seed": seed,
        "inputs": inputs or {},
    }
    (out / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _inputs(**paths: Path) -> dict[str, str]:
    inputs = {}
    for name, path in paths.items():
        inputs[name] = str(path)
        inputs[f"{name}_sha256"] = file_digest(path)
    return inputs


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _with_overrides(base: BaseModel, overrides: dict) -> BaseModel:
    data = base.model_dump(mode="json")
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            outer, inner = key.split(".", 1)
            data[outer][inner] = value
        else:
            data[key] = value
    return parse_config(data, type(base))


def _load_or_default(path: str | None, model_type: type[BaseModel]) -> BaseModel:
    return load_config(path, model_type) if path else model_type()


# ##################################################################
# generate
# seeded synthetic scenes written as a json-lines dataset
def cmd_generate(args: argparse.Namespace) -> int:
    cfg = _with_overrides(
        _load_or_default(args.config, DatasetConfig),
        {"scene_count": args.scene_count, "seed": args.seed, "workers": args.workers},
    )
    out = _out_dir(args.out)
    dataset = generate_dataset(cfg)
    save_dataset(dataset, out / DATASET_FILE)
    write_manifest(out, "generate", cfg, cfg.seed)
    summary = dataset_summary(dataset)
    logger.info("wrote %d scenes (%d objects) to %s", summary["scenes"], summary["objects"], out / DATASET_FILE)
    return 0


def train_config_from_args(args: argparse.Namespace) -> TrainConfig:
    return _with_overrides(
        _load_or_default(args.config, TrainConfig),
        {
            "method": args.method,
            "iterations": args.iterations,
            "batch_size": args.batch_size,
            "lr": args.lr,
            "bag_size": args.bag_size,
            "selection": args.selection,
            "depression.variant": args.depression,
            "loss.beta": args.beta,
            "seed": args.seed,
            "workers": args.workers,
        },
    )


def checkpoint_meta(cfg: TrainConfig, grid: AnchorGridConfig, num_classes: int, noise_level: float) -> dict:
    return {
        "method": cfg.method,
        "iterations": cfg.iterations,
        "seed": cfg.seed,
        "num_classes": num_classes,
        "noise_level": noise_level,
        "config": cfg.model_dump(mode="json"),
        "config_hash": config_hash(cfg),
        "anchors": grid.model_dump(mode="json"),
    }


# ##################################################################
# train
# mal or baseline training on the train split; writes the checkpoint,
# the per-iteration metrics log and the run manifest
def cmd_train(args: argparse.Namespace) -> int:
    cfg = train_config_from_args(args)
    dataset_path = Path(args.dataset)
    dataset = load_dataset(dataset_path)
    out = _out_dir(args.out)
    snapshot_dir = out / "attention" if cfg.attention_snapshots else None
    with (out / METRICS_FILE).open("w") as metrics_out:
        result = fit(
            dataset.train,
            cfg,
            dataset.class_count,
            metrics_out,
            snapshot_dir,
            progress=not args.quiet,
            noise_level=dataset.noise_level,
        )
    meta = checkpoint_meta(cfg, result.grid, dataset.class_count, dataset.noise_level)
    save_checkpoint(out / CHECKPOINT_FILE, result.params, meta)
    write_manifest(out, "train", cfg, cfg.seed, _inputs(dataset=dataset_path))
    logger.info("wrote %s and %s", out / CHECKPOINT_FILE, out / METRICS_FILE)
    return 0


def _restore_configs(meta: dict, path: Path) -> tuple[TrainConfig, AnchorGridConfig]:
    if "config" not in meta or "anchors" not in meta:
        raise CheckpointError(f"{path} carries no training config")
    return parse_config(meta["config"], TrainConfig), parse_config(meta["anchors"], AnchorGridConfig)


# ##################################################################
# eval
# plain forward + nms on one split; report.txt and report.tsv hold the
# same metrics and depend only on the parameters, never on the method
def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _with_overrides(
        _load_or_default(args.config, EvalConfig),
        {
            "split": args.split,
            "nms_threshold": args.nms_threshold,
            "score_threshold": args.score_threshold,
            "workers": args.workers,
        },
    )
    checkpoint_path = Path(args.checkpoint)
    params, meta = load_checkpoint(checkpoint_path)
    train_cfg, grid = _restore_configs(meta, checkpoint_path)
    dataset_path = Path(args.dataset)
    dataset = load_dataset(dataset_path)
    report = evaluate(
        dataset.split(cfg.split),
        params,
        train_cfg,
        cfg,
        dataset.class_count,
        grid=grid,
        progress=not args.quiet,
        noise_level=dataset.noise_level,
    )
    out = _out_dir(args.out)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.tsv").write_text(report.to_tsv())
    write_manifest(out, "eval", cfg, None, _inputs(checkpoint=checkpoint_path, dataset=dataset_path))
    sys.stdout.write(report.to_text())
    return 0


def _ablation_value(value) -> str:
    if value is None:
        return "NA"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _ablation_cells(grid: AblationGrid):
    for method in grid.methods:
        bag_sizes = grid.bag_sizes if method == "mal" else [None]
        selections = grid.selections if method == "mal" else [None]
        for cell in itertools.product(bag_sizes, selections, grid.depressions, grid.seeds):
            yield (method, *cell)


# ##################################################################
# ablate
# trains and evaluates every method x bag size x selection x depression x
# seed cell on one dataset; one table row per cell. baseline rows have NA
# bag size and selection
def cmd_ablate(args: argparse.Namespace) -> int:
    grid = _load_or_default(args.config, AblationGrid)
    dataset_path = Path(args.dataset)
    dataset = load_dataset(dataset_path)
    val = dataset.split(grid.eval.split)
    rows = ["\t".join(ABLATION_COLUMNS)]
    for method, bag_size, selection, depression, seed in _ablation_cells(grid):
        cfg = _with_overrides(
            grid.train,
            {
                "method": method,
                "bag_size": bag_size,
                "selection": selection,
                "depression.variant": depression,
                "seed": seed,
            },
        )
        result = fit(dataset.train, cfg, dataset.class_count, progress=not args.quiet, noise_level=dataset.noise_level)
        metrics = evaluate(
            val, result.params, cfg, grid.eval, dataset.class_count, grid=result.grid, noise_level=dataset.noise_level
        ).metrics
        cell = {
            "method": method,
            "bag_size": bag_size,
            "selection": selection,
            "depression": depression,
            "seed": seed,
            **metrics,
        }
        rows.append("\t".join(_ablation_value(cell[column]) for column in ABLATION_COLUMNS))
        logger.info("%s k=%s %s %s seed %d: ap %s", method, bag_size, selection, depression, seed, metrics["ap"])
    out = _out_dir(args.out)
    table = "\n".join(rows) + "\n"
    (out / "ablation.tsv").write_text(table)
    write_manifest(out, "ablate", grid, None, _inputs(dataset=dataset_path))
    sys.stdout.write(table)
    return 0


def _labels(paths: list[str], labels: list[str] | None) -> list[str]:
    if labels is None:
        return [Path(p).parent.name or Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise ReportError(f"{len(labels)} labels for {len(paths)} inputs")
    return labels


def read_metrics_log(path: Path) -> dict[int, float]:
    try:
        text = path.read_text()
    except OSError as e:
        raise ReportError(f"cannot read metrics log {path}: {e.strerror}") from e
    losses = {}
    for number, line in enumerate(text.splitlines(), 1):
        try:
            record = json.loads(line)
            losses[int(record["iteration"])] = float(record["loss"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise ReportError(f"{path}:{number}: bad metrics record") from e
    return losses


def _series(path: Path, header: list[str], rows: list[list[str]]) -> None:
    path.write_text("\n".join("\t".join(row) for row in [header, *rows]) + "\n")


def _na(value: float | None) -> str:
    return "NA" if value is None else f"{value:.6f}"


# ##################################################################
# plot
# columnar series for external plotting: loss per iteration for every run,
# ap bars per report and localization error share per aspect bucket
def cmd_plot(args: argparse.Namespace) -> int:
    out = _out_dir(args.out)
    written = []
    if args.metrics:
        labels = _labels(args.metrics, args.labels)
        logs = [read_metrics_log(Path(p)) for p in args.metrics]
        iterations = sorted(set().union(*logs))
        rows = [[str(t)] + [_na(log.get(t)) for log in logs] for t in iterations]
        _series(out / "loss.tsv", ["iteration", *labels], rows)
        written.append("loss.tsv")
    if args.reports:
        labels = _labels(args.reports, args.labels)
        tables = [read_table(p) for p in args.reports]
        ap_keys = ["ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large"]
        rows = [[label] + [_na(table.get(key)) for key in ap_keys] for label, table in zip(labels, tables)]
        _series(out / "ap.tsv", ["run", *ap_keys], rows)
        buckets = ["overall"] + [name for name, _, _ in ASPECT_BUCKETS]
        rows = []
        for bucket in buckets:
            key = "loc_share" if bucket == "overall" else f"loc_share_{bucket}"
            rows.append([bucket] + [_na(table.get(key)) for table in tables])
        _series(out / "error_share.tsv", ["bucket", *labels], rows)
        written += ["ap.tsv", "error_share.tsv"]
    if not written:
        raise ReportError("plot needs --metrics and/or --reports")
    logger.info("wrote %s to %s", ", ".join(written), out)
    return 0


# ##################################################################
# benchmark
# mal vs baseline (and all vs all-top1) over several seeds; exit 1 when
# a gate fails
def cmd_benchmark(args: argparse.Namespace) -> int:
    settings = _load_or_default(args.config, BenchmarkSettings)
    if args.seeds:
        settings = _with_overrides(settings, {"seeds": args.seeds})
    result = run_benchmark(settings, progress=not args.quiet)
    out = _out_dir(args.out)
    save_results(result, out / "benchmark.md")
    write_manifest(out, "benchmark", settings, settings.dataset.seed)
    sys.stdout.write(format_results(result))
    return 0 if result.passed else 1


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars and info logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser("mal-desk", description="Multiple anchor learning on synthetic scenes")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("generate", help="Generate a seeded synthetic dataset")
    gen.add_argument("--config", metavar="file", help="DatasetConfig json")
    gen.add_argument("--out", metavar="dir", required=True, help="Output directory")
    gen.add_argument("--scene-count", metavar="count", type=int, help="Number of scenes")
    gen.add_argument("--seed", metavar="value", type=int, help="Master seed")
    gen.add_argument("--workers", metavar="count", type=int, help="Generator threads")
    gen.set_defaults(handler=cmd_generate)

    train = commands.add_parser("train", help="Train a scorer with mal or the fixed-assignment baseline")
    train.add_argument("--dataset", metavar="file", required=True, help="Dataset file written by generate")
    train.add_argument("--config", metavar="file", help="TrainConfig json")
    train.add_argument("--out", metavar="dir", required=True, help="Output directory")
    train.add_argument("--method", choices=["mal", "baseline"], help="Training method")
    train.add_argument("--iterations", metavar="count", type=int, help="Training iterations T")
    train.add_argument("--batch-size", metavar="count", type=int, help="Scenes per iteration")
    train.add_argument("--lr", metavar="value", type=float, help="Base learning rate")
    train.add_argument("--bag-size", "-k", metavar="count", type=int, help="Anchor bag size k")
    train.add_argument("--selection", choices=["all", "all_top1", "top1"], help="Selection strategy")
    depressions = ["none", "constant", "step", "symmetric_step"]
    train.add_argument("--depression", choices=depressions, help="Depression schedule")
    train.add_argument("--beta", metavar="value", type=float, help="Localization weight in joint confidence")
    train.add_argument("--seed", metavar="value", type=int, help="Training seed")
    train.add_argument("--workers", metavar="count", type=int, help="Scene threads per iteration")
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", metavar="file", required=True, help="Checkpoint written by train")
    ev.add_argument("--dataset", metavar="file", required=True, help="Dataset file written by generate")
    ev.add_argument("--config", metavar="file", help="EvalConfig json")
    ev.add_argument("--out", metavar="dir", required=True, help="Output directory")
    ev.add_argument("--split", choices=["train", "val"], help="Dataset split")
    ev.add_argument("--nms-threshold", metavar="value", type=float, help="NMS IoU threshold")
    ev.add_argument("--score-threshold", metavar="value", type=float, help="Minimum detection score")
    ev.add_argument("--workers", metavar="count", type=int, help="Scene threads")
    ev.set_defaults(handler=cmd_eval)

    ablate = commands.add_parser("ablate", help="Run an ablation grid into one table")
    ablate.add_argument("--dataset", metavar="file", required=True, help="Dataset file written by generate")
    ablate.add_argument("--config", metavar="file", help="AblationGrid json")
    ablate.add_argument("--out", metavar="dir", required=True, help="Output directory")
    ablate.set_defaults(handler=cmd_ablate)

    plot = commands.add_parser("plot", help="Export plot-ready series from logs and reports")
    plot.add_argument("--metrics", metavar="file", nargs="+", help="metrics.jsonl files written by train")
    plot.add_argument("--reports", metavar="file", nargs="+", help="report.tsv files written by eval")
    plot.add_argument("--labels", metavar="name", nargs="+", help="Column labels, one per input")
    plot.add_argument("--out", metavar="dir", required=True, help="Output directory")
    plot.set_defaults(handler=cmd_plot)

    bench = commands.add_parser("benchmark", help="End-to-end mal vs baseline acceptance run")
    bench.add_argument("--config", metavar="file", help="BenchmarkSettings json")
    bench.add_argument("--seeds", metavar="value", type=int, nargs="+", help="Training seeds")
    bench.add_argument("--out", metavar="dir", required=True, help="Output directory")
    bench.set_defaults(handler=cmd_benchmark)

    for sub in (gen, train, ev, ablate, plot, bench):
        _add_common(sub)
    return parser


# ##################################################################
# main
# parse, name the process, configure logging and map errors to exit 2
def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setproctitle.setproctitle(f"mal-desk:{args.command}")
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(format="[%(name)s] %(message)s", stream=sys.stderr)
    logging.getLogger().setLevel(level)
    try:
        return args.handler(args)
    except MalError as e:
        sys.stderr.write(e.one_line() + "\n")
        return 2


# ##################################################################
# entry point
# standard python dispatch for main
if __name__ == "__main__":
    sys.exit(main())
