"""Command-line front end.

Exit codes: 0 success, 2 bad arguments or configuration, 3 malformed
dataset/checkpoint file, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import SynthSpec, generate_synthetic, read_dataset, write_dataset
from .errors import FormatError, NumericError
from .graph import SkeletonGraph, adjacency_record, kernel_set, ntu_graph, path_graph
from .harness import ScoreFile, TrainConfig, ensemble, evaluate, export_curves, train
from .model import DEFAULT_CHANNELS, ModelConfig, count_flops, count_params
from .stc import StcConfig

EXIT_OK, EXIT_ARGS, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


def _on_off(s: str) -> bool:
    if s not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return s == "on"


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", type=int, choices=(0, 1, 2), default=0, help="dilation scaling factor")
    p.add_argument("--stream", choices=("joint", "bone"), default="joint")
    p.add_argument("--k", type=int, default=4, help="curve candidates per step")
    p.add_argument("--c-mid", type=int, default=None, help="curve aggregation width (default: block width / 4)")
    p.add_argument("--exclude-same-node", type=_on_off, default=True, metavar="{on,off}")
    p.add_argument("--straight-line", action="store_true", help="one candidate per step (k=1 chaining)")
    p.add_argument("--width", type=float, default=1.0, help="multiplier on the default block widths")
    p.add_argument("--no-stc", action="store_true", help="replace every STC module with a pointwise map")


def _add_graph_flags(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--graph", choices=("ntu", "body", "path"), default=default)
    p.add_argument("--nodes", type=int, default=15, help="node count for --graph body/path")


def _graph(args) -> SkeletonGraph:
    if args.graph == "ntu":
        return ntu_graph()
    if args.graph == "path":
        return path_graph(args.nodes)
    from .data import body

    return body(args.nodes).graph


def _model_config(args, graph: SkeletonGraph, num_classes: int) -> ModelConfig:
    channels = tuple(int(round(c * args.width)) for c in DEFAULT_CHANNELS)
    stc = StcConfig(
        k=args.k,
        c_mid=args.c_mid,
        exclude_same_node=args.exclude_same_node,
        straight_line_mode=args.straight_line,
    )
    return ModelConfig(
        graph=graph,
        num_classes=num_classes,
        block_channels=channels,
        stc_blocks=() if args.no_stc else (3, 6, 9),
        sigma=args.sigma,
        stc=stc,
        stream=args.stream,
    )


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# Subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = dict(V=args.nodes, T=args.frames, num_classes=args.classes, noise_std=args.noise, seed=args.seed)
    for split, per_class in (("train", args.per_class), ("val", args.val_per_class)):
        ds = generate_synthetic(SynthSpec(samples_per_class=per_class, **base), split)
        write_dataset(ds, out / f"{split}.stcd")
        print(f"{split}: {len(ds)} samples -> {out / f'{split}.stcd'}")


def cmd_train(args) -> None:
    tr = read_dataset(args.train)
    va = read_dataset(args.val)
    cfg = _model_config(args, tr.graph, args.classes or max(tr.num_classes, va.num_classes))
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, seed=args.seed, warmup_epochs=min(5, args.epochs - 1))
    res = train(tcfg, cfg, tr, va, args.out, target_val_acc=args.target_acc)
    print(json.dumps({"best_epoch": res.best_epoch, "best_val_acc": res.best_val_acc, "checkpoint": str(res.checkpoint)}))


def cmd_eval(args) -> None:
    acc, sf = evaluate(args.checkpoint, args.data)
    if args.out:
        sf.write(args.out)
    print(json.dumps({"accuracy": acc, "samples": len(sf.labels), "stream": sf.stream, "sigma": sf.sigma}))


def cmd_ensemble(args) -> None:
    _emit(ensemble([ScoreFile.read(p) for p in args.scores]), args.out)


def cmd_dump_adjacency(args) -> None:
    ks = kernel_set(_graph(args), args.d)
    kinds = [args.kind] if args.kind else ["cp", "id", "cf"]
    recs = [adjacency_record(ks, k, normalized=not args.raw) for k in kinds]
    _emit(recs[0] if args.kind else recs, args.out)


def cmd_export_curves(args) -> None:
    ids = [int(s) for s in args.ids.split(",") if s.strip()]
    doc = export_curves(args.checkpoint, args.data, ids, args.out, args.svg)
    print(f"{len(doc['records'])} curve records -> {args.out}")


def cmd_count_params(args) -> None:
    print(count_params(_model_config(args, _graph(args), args.classes)))


def cmd_count_flops(args) -> None:
    print(count_flops(_model_config(args, _graph(args), args.classes), args.frames))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stcnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic train/val datasets")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nodes", type=int, default=15)
    p.add_argument("--frames", type=int, default=32)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--val-per-class", type=int, default=25)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one stream")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True, help="run directory (metrics.jsonl, best.stck)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=90)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--target-acc", type=float, default=None, help="stop once val accuracy reaches this")
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a dataset with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="ScoreFile JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="fuse ScoreFiles")
    p.add_argument("scores", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("dump-adjacency", help="print dilated kernels as JSON")
    _add_graph_flags(p, "ntu")
    p.add_argument("--d", type=int, default=1, help="dilation")
    p.add_argument("--kind", choices=("cp", "id", "cf"), help="one direction only")
    p.add_argument("--raw", action="store_true", help="binary matrix before normalization")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_adjacency)

    p = sub.add_parser("export-curves", help="dump curves of chosen samples")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", default="0")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")
    p.set_defaults(func=cmd_export_curves)

    for name, func in (("count-params", cmd_count_params), ("count-flops", cmd_count_flops)):
        p = sub.add_parser(name)
        _add_graph_flags(p, "ntu")
        _add_model_flags(p)
        p.add_argument("--classes", type=int, default=120)
        if name == "count-flops":
            p.add_argument("--frames", type=int, default=64)
        p.set_defaults(func=func)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ARGS
    try:
        args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
