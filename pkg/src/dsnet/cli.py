"""Command-line entry point: build, train, eval, infer, fold, analyze, bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .data.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data.codecs import CodecError, read_image, write_image, write_label
from .data.dataset import DatasetError, resize_pair, scan_dataset
from .engine.tensor import EngineError
from .evaluator import EvaluationError, benchmark, evaluate_dataset, metrics_to_json, predict
from .model.analysis import analyze
from .model.builder import ConfigError, NetworkConfig, build_dsnet, with_dropout
from .model.fold import fold_batch_norm
from .model.graph import GraphError, ParamError
from .trainer import TrainConfig, TrainingError, train_loop, write_log_csv

log = logging.getLogger("dsnet")


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def parse_dims(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = text.lower().split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise CliError(f"{what} {text!r} is not {n} integers separated by 'x'") from None
    if len(dims) != n or min(dims) < 1:
        raise CliError(f"{what} {text!r} must be {n} positive integers separated by 'x'")
    return dims


def write_json(path: str | os.PathLike, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{what} not found: {path}")
    return p


def _load_model(path: str):
    return load_checkpoint(_require_file(path, "model"))


def default_palette(n: int) -> np.ndarray:
    base = [(128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153), (153, 153, 153), (250, 170, 30),
            (220, 220, 0), (107, 142, 35), (152, 251, 152), (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142),
            (0, 0, 70), (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32)]
    pal = np.array([base[i % len(base)] for i in range(n)], dtype=np.uint8)
    return pal


def load_palette(path: str, n: int) -> np.ndarray:
    try:
        data = json.loads(_require_file(path, "palette").read_text())
        colors = data["colors"] if isinstance(data, dict) else data
        pal = np.asarray(colors, dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"palette {path}: {exc}") from None
    if pal.ndim != 2 or pal.shape[1] != 3 or len(pal) < n or pal.min() < 0 or pal.max() > 255:
        raise CliError(f"palette {path} must list at least {n} [r, g, b] triples in 0..255")
    return pal.astype(np.uint8)


# --------------------------------------------------------------------------
# subcommands


def cmd_build(args) -> None:
    cfg = NetworkConfig(variant=args.variant, num_classes=args.classes, dropout_rate=args.dropout)
    graph, params = build_dsnet(cfg, seed=args.seed)
    save_checkpoint(graph, params, {"seed": args.seed, "stage": "init"}, args.out)


def _train_config(args) -> TrainConfig:
    if args.config:
        try:
            data = json.loads(_require_file(args.config, "config").read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config}: {exc}") from None
        if not isinstance(data, dict):
            raise CliError(f"config {args.config}: expected a JSON object")
    else:
        data = TrainConfig().to_json()
    overrides = {
        "total_iterations": args.iterations,
        "lr_base": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "weight_decay": args.weight_decay,
        "dropout_rate": args.dropout,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_json(data)


def cmd_train(args) -> None:
    try:
        cfg = _train_config(args)
    except (ValueError, TypeError) as exc:
        raise CliError(f"config {args.config or '(defaults)'}: {exc}") from None
    graph, params, meta = _load_model(args.model)
    index = scan_dataset(args.data, args.split, graph.num_classes)
    samples = index.load_all()
    if args.train_size:
        h, w = parse_dims(args.train_size, 2, "--train-size")
        samples = [resize_pair(s, h, w) for s in samples]
    train_graph = with_dropout(graph, cfg.dropout_rate)

    def checkpoint(it, p):
        if args.save_every and (it + 1) % args.save_every == 0 and it + 1 < cfg.total_iterations:
            save_checkpoint(train_graph, p, {**meta, "stage": "train", "iterations": it + 1}, args.out)

    result = train_loop(graph, params, samples, cfg, on_iteration=checkpoint)
    save_checkpoint(
        result.graph,
        result.params,
        {**meta, "stage": "train", "iterations": cfg.total_iterations, "train_config": cfg.to_json()},
        args.out,
    )
    if args.log:
        write_log_csv(result.log, args.log)


def cmd_eval(args) -> None:
    graph, params, _ = _load_model(args.model)
    index = scan_dataset(args.data, args.split, graph.num_classes)
    eval_size = parse_dims(args.eval_size, 2, "--eval-size")
    full_size = parse_dims(args.full_size, 2, "--full-size") if args.full_size else eval_size
    _, cm = evaluate_dataset(graph, params, index, eval_size, full_size, index.ignore_index, args.upsample)
    report = metrics_to_json(cm, index.class_names)
    report.update({"eval_size": list(eval_size), "full_size": list(full_size), "images": len(index), "upsample": args.upsample})
    write_json(args.out, report)


def cmd_infer(args) -> None:
    graph, params, _ = _load_model(args.model)
    image = read_image(_require_file(args.image, "image"))
    seg = predict(graph, params, image)
    write_label(args.out, seg.astype(np.uint8))
    if args.color:
        pal = load_palette(args.palette, graph.num_classes) if args.palette else default_palette(graph.num_classes)
        write_image(args.color, pal[seg].transpose(2, 0, 1).astype(np.float32) / 255.0)


def cmd_fold(args) -> None:
    graph, params, meta = _load_model(args.model)
    folded, fparams = fold_batch_norm(graph, params)
    save_checkpoint(folded, fparams, {**meta, "folded": True}, args.out)


def cmd_analyze(args) -> None:
    graph, params, _ = _load_model(args.model)
    shape = parse_dims(args.input_shape, 3, "--input-shape")
    write_json(args.out, analyze(graph, params, shape))


def cmd_bench(args) -> None:
    graph, params, _ = _load_model(args.model)
    shape = parse_dims(args.input_shape, 3, "--input-shape")
    report = benchmark(graph, params, shape, args.warmup, args.iters)
    report["model"] = str(args.model)
    write_json(args.out, report)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsnet", description="DSNet segmentation engine")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("build", help="construct a randomly initialized model")
    s.add_argument("--variant", choices=["fast", "accurate"], required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("train", help="train a model on a PPM/PGM dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="train")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--iterations", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--dropout", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--train-size", help="resize every pair to HxW before training")
    s.add_argument("--save-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mIoU and global accuracy on a split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--eval-size", required=True, help="HxW fed to the network")
    s.add_argument("--full-size", help="HxW of the ground truth (default: eval size)")
    s.add_argument("--upsample", choices=["logits", "labels"], default="logits")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("infer", help="segment one PPM image")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--color")
    s.add_argument("--palette")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("fold", help="merge batch norms into convolutions")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fold)

    s = sub.add_parser("analyze", help="parameters, MACs, shapes, receptive fields")
    s.add_argument("--model", required=True)
    s.add_argument("--input-shape", required=True, help="CxHxW")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("bench", help="latency benchmark with per-node timings")
    s.add_argument("--model", required=True)
    s.add_argument("--input-shape", required=True, help="CxHxW")
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def _thread_limit():
    raw = os.environ.get("DSNET_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"DSNET_THREADS must be an integer, got {raw!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
        with _thread_limit():
            args.func(args)
    except (CliError, CheckpointError, CodecError, DatasetError, ConfigError, GraphError, ParamError,
            EvaluationError, TrainingError, EngineError, ValueError, OSError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"dsnet: error: {msg}", file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
