"""Command-line pipeline: ``kerl <command> [flags]``.

Exit codes: 0 success, 2 usage or invalid input, 3 file I/O or format
errors, 4 numeric failures (divergence, gradient check above tolerance).
Relative ``--data`` paths that do not exist are looked up under ``$KERL_DATA``.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data.io import DataFormatError, load_scores, resize_image, save_scores, write_image
from .data.store import feature_file_name, load_data, save_dataset_dir
from .data.synthetic import SyntheticConfig, gen_synthetic
from .fusion import GATED, USES_KNOWLEDGE, VARIANTS
from .gradcheck import gradcheck_all
from .knowledge_graph import GraphFormatError, build_graph, load_graph, save_graph, to_dot
from .regions import location_scores, normalize_map
from .trainer import (
    CheckpointError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    mask_coverage,
    pretrain,
    pretrain_scores,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
BASELINE_CKPT = "baseline.ckpt"


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _scores_name(split: str) -> str:
    return f"scores_{split}.npz"


# shared flag groups -----------------------------------------------------------


def _data_flags(p, split="train"):
    p.add_argument("--data", required=True, help="dataset directory (kerl-dataset or CUB tree)")
    p.add_argument("--split", default=split, choices=("train", "test", "all"))
    p.add_argument("--mode", default="image", choices=("image", "bbox"), help="CUB: full image or box crop")
    p.add_argument("--image-size", type=int, default=64, help="CUB: resize images to this square size")
    p.add_argument("--features", help="directory of precomputed .kft feature maps, one per sample id")


def _config_flags(p):
    p.add_argument("--config", help="JSON file of training options")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--sgd-lr", type=float)
    p.add_argument("--adam-lr", type=float)


def _load(args, split=None):
    return load_data(args.data, split or args.split, args.mode, args.image_size, args.features)


def _train_config(args, **overrides) -> TrainConfig:
    d = {}
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"invalid JSON: {exc.msg}", args.config, exc.lineno) from None
        if not isinstance(d, dict):
            raise DataFormatError("config must be a JSON object", args.config)
    for flag in ("seed", "epochs", "batch_size", "sgd_lr", "adam_lr"):
        if getattr(args, flag, None) is not None:
            d[flag] = getattr(args, flag)
    d.update(overrides)
    return TrainConfig.from_dict(d)


def _read_scores(path, dataset):
    scores, ids = load_scores(path)
    if ids != list(dataset.ids):
        raise CliError(f"score cache {path} was written for different samples than the loaded split")
    return scores


def _write_metrics(path, header: dict, rows: list[dict]) -> None:
    """CSV with ``# key=value`` header lines for every numeric or flag setting."""
    with open(path, "w", newline="") as fh:
        for key, value in header.items():
            fh.write(f"# {key}={json.dumps(value) if isinstance(value, (list, dict)) else value}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)


# commands --------------------------------------------------------------------


def cmd_build_graph(args):
    ds = _load(args)
    graph = build_graph(ds.instances(), ds.registry, per_column=args.per_column_norm)
    save_graph(graph, args.out)
    if args.dot:
        Path(args.dot).write_text(to_dot(graph))
    print(f"wrote {args.out}: {graph.n_categories} categories, {graph.n_attributes} attributes, "
          f"{graph.n_nodes} nodes")


def cmd_gen_synthetic(args):
    cfg = SyntheticConfig(
        n_categories=args.categories, n_attributes=args.attributes, n_parts=args.parts,
        image_size=args.image_size, train_per_class=args.train_per_class, test_per_class=args.test_per_class,
    )
    data = gen_synthetic(cfg, seed=args.seed)
    out = Path(args.out)
    save_dataset_dir(out, {"train": data.train, "test": data.test},
                     extra={"generator": {"seed": args.seed, **cfg.__dict__}})
    save_graph(data.truth, out / "truth.graph")
    print(f"wrote {out}: {len(data.train)} train, {len(data.test)} test samples")


def cmd_pretrain(args):
    config = _train_config(args, variant="baseline")
    train_ds = _load(args, "train")
    ckpt, scores = pretrain(train_ds, config, folds=args.folds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out / BASELINE_CKPT)
    save_scores(out / _scores_name("train"), scores, train_ds.ids)
    written = [BASELINE_CKPT, _scores_name("train")]
    for split in args.score_splits:
        ds = _load(args, split)
        save_scores(out / _scores_name(split), pretrain_scores(ds, ckpt), ds.ids)
        written.append(_scores_name(split))
    print(f"wrote {', '.join(str(out / w) for w in written)}")


def cmd_train(args):
    config = _train_config(args, variant=args.variant)
    ds = _load(args)
    graph = None
    if config.variant in USES_KNOWLEDGE:
        if not args.graph:
            raise CliError(f"variant {config.variant} needs --graph (see build-graph)")
        graph = load_graph(args.graph)
    prior = None
    if config.variant in USES_KNOWLEDGE:
        if not args.scores:
            raise CliError(f"variant {config.variant} needs cached category scores: "
                           f"run `kerl pretrain` first and pass --scores <dir>/{_scores_name(args.split)}")
        prior = _read_scores(args.scores, ds)
    init = load_checkpoint(args.init) if args.init else None
    ckpt, metrics = train(ds, graph, config, prior, graph_path=args.graph, init_from=init)
    save_checkpoint(ckpt, args.out)
    metrics_path = args.metrics or str(Path(args.out).with_suffix(".csv"))
    header = {"command": "train", "data": args.data, "split": args.split, "graph": args.graph,
              "scores": args.scores, "init": args.init, **config.to_dict()}
    _write_metrics(metrics_path, header, metrics)
    last = metrics[-1] if metrics else {}
    print(f"wrote {args.out} and {metrics_path}" + (f"; final loss {last['loss']:.4f}" if last else ""))


def _test_prior(args, ckpt, ds):
    if ckpt.train_config.variant not in USES_KNOWLEDGE:
        return None
    if args.scores:
        return _read_scores(args.scores, ds)
    if args.baseline:
        return pretrain_scores(ds, load_checkpoint(args.baseline))
    raise CliError(f"a {ckpt.train_config.variant} checkpoint needs category scores for this split: "
                   f"pass --scores from `kerl pretrain` or --baseline <baseline.ckpt>")


def cmd_eval(args):
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load(args)
    mode = "with_regions" if args.with_regions else "plain"
    report = evaluate(ds, ckpt, mode=mode, prior_scores=_test_prior(args, ckpt, ds))
    row = {"variant": ckpt.train_config.variant, "mode": mode, "split": args.split, **report.as_row()}
    if args.out:
        _write_metrics(args.out, {"command": "eval", "checkpoint": args.checkpoint, "data": args.data}, [row])
    writer = csv.DictWriter(sys.stdout, fieldnames=list(row), lineterminator="\n")
    writer.writeheader()
    writer.writerow(row)


def _to_gray(unit_map, upsample: int) -> np.ndarray:
    img = np.round(np.clip(unit_map, 0.0, 1.0) * 255).astype(np.uint8)
    return np.kron(img, np.ones((upsample, upsample), dtype=np.uint8)) if upsample > 1 else img


def cmd_visualize(args):
    if args.upsample < 1:
        raise CliError("--upsample must be >= 1")
    ckpt = load_checkpoint(args.checkpoint)
    ds = _load(args)
    if args.limit is not None:
        ds = ds.subset(np.arange(min(args.limit, len(ds))))
    prior = _test_prior(args, ckpt, ds)
    net = ckpt.build_model()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gated = ckpt.train_config.variant in GATED
    coverage = mask_coverage(ds.masks, net.cfg.backbone.stride) if ds.masks is not None else None
    lines = ["# id label heatmap gate_map top_row top_col gate_mean top_in_mask"]
    hits = 0
    for start in range(0, len(ds), 64):
        sl = slice(start, start + 64)
        maps, gates = net.highlight_maps(ds.inputs[sl], None if prior is None else prior[sl])
        heat = normalize_map(location_scores(maps))
        for k in range(len(heat)):
            i = start + k
            stem = feature_file_name(ds.ids[i])[:-4]
            heat_name = f"{stem}.heat.pgm"
            write_image(out / heat_name, _to_gray(heat[k], args.upsample))
            gate_name, gate_mean = "-", "-"
            if gated:
                gmap = gates[k].mean(axis=-1)
                gate_name, gate_mean = f"{stem}.gate.pgm", f"{gmap.mean():.6f}"
                write_image(out / gate_name, _to_gray(gmap, args.upsample))
            r, c = np.unravel_index(int(np.argmax(heat[k])), heat[k].shape)
            in_mask = "-"
            if coverage is not None and coverage.shape[1:] == heat.shape[1:]:
                in_mask = int(coverage[i, r, c] > 0)
                hits += in_mask
            if args.overlay and ds.images is not None:
                size = ds.images.shape[1]
                up = resize_image(np.round(heat[k] * 255).astype(np.uint8), size)
                blend = (0.5 * ds.images[i] + 0.5 * up[..., None]).astype(np.uint8)
                write_image(out / f"{stem}.overlay.ppm", blend)
            lines.append(f"{ds.ids[i]} {ds.labels[i]} {heat_name} {gate_name} {r} {c} {gate_mean} {in_mask}")
    if coverage is not None:
        lines.append(f"# top cell inside a ground-truth mask: {hits}/{len(ds)}, "
                     f"area-fraction chance {float((coverage > 0).mean()):.4f}")
    (out / "index.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(ds)} heatmaps to {out}")


def cmd_gradcheck(args):
    report = gradcheck_all(args.seed)
    for name, err in report.items():
        print(f"{name} max_rel_error={err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    if max(report.values()) >= args.tol:
        raise CliError(f"gradient check above tolerance {args.tol}", EXIT_NUMERIC)


# parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kerl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-graph", help="build the category-attribute graph from annotations")
    _data_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--per-column-norm", action="store_true", help="normalize each attribute column separately")
    p.add_argument("--dot", help="also write a Graphviz DOT rendering here")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("gen-synthetic", help="write a synthetic dataset with ground-truth attribute masks")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--categories", type=int, default=8)
    p.add_argument("--attributes", type=int, default=12)
    p.add_argument("--parts", type=int, default=4)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--train-per-class", type=int, default=40)
    p.add_argument("--test-per-class", type=int, default=20)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="train the baseline and cache its category scores")
    _data_flags(p)
    _config_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--folds", type=int, default=0, help="out-of-fold training scores when > 1")
    p.add_argument("--score-splits", nargs="*", default=["test"], help="extra splits to score")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="train one variant")
    _data_flags(p)
    _config_flags(p)
    p.add_argument("--variant", required=True, choices=VARIANTS)
    p.add_argument("--graph", help="graph file (knowledge variants)")
    p.add_argument("--scores", help="cached category scores for the training split (knowledge variants)")
    p.add_argument("--init", help="warm-start from this checkpoint (normally the pretrained baseline)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="metrics CSV path (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("eval", cmd_eval, "report accuracy"),
                              ("visualize", cmd_visualize, "write heatmaps and gate maps")):
        p = sub.add_parser(name, help=help_)
        _data_flags(p, split="test")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--scores", help="cached category scores for this split")
        p.add_argument("--baseline", help="baseline checkpoint used to score this split instead of --scores")
        p.set_defaults(func=func)
        if name == "eval":
            p.add_argument("--with-regions", action="store_true", help="average in the highlighted-region head")
            p.add_argument("--out", help="also write the report as CSV")
        else:
            p.add_argument("--out-dir", required=True)
            p.add_argument("--upsample", type=int, default=1, help="integer upscaling of the PGM heatmaps")
            p.add_argument("--overlay", action="store_true", help="also write heatmap-over-image PPM blends")
            p.add_argument("--limit", type=int, help="only the first N samples")

    p = sub.add_parser("gradcheck", help="finite-difference check of every hand-written gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"kerl {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (OSError, DataFormatError, GraphFormatError, CheckpointError) as exc:
        print(f"kerl {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"kerl {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"kerl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
