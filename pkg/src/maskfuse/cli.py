"""``maskfuse`` command line.

Exit codes: 0 success, 1 validation error (bad flags, malformed or
inconsistent masks), 2 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FormatError, MaskFuseError
from .evaluation import THRESHOLDS, evaluate, sensitivity_report
from .features import FEATURE_COLUMNS
from .fusion import FusionConfig, ImageCandidates, SOURCES, build_feature_table, fuse, oof_train
from .gbm import GbmModel, TrainingConfig
from .mask_core import instances_from_label_map, label_map_from_instances
from .mask_io import (
    read_label_maps,
    read_png_dir,
    write_binary_png,
    write_label_maps,
)
from .parallel import image_pool
from .postprocess import CleanConfig, WatershedConfig, clean_pipeline
from .synth import CLUMPER, SPLITTER, SceneConfig, make_corpus
from .targets import make_unet_targets

log = logging.getLogger("maskfuse")


class UsageError(MaskFuseError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _digest_path(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    elif path.is_file():
        h.update(path.read_bytes())
    else:
        return "missing"
    return h.hexdigest()


def _write_manifest(out: Path, args, inputs: list, started: float) -> None:
    config = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    manifest = {
        "command": args.command,
        "config": config,
        "version": __version__,
        "inputs": {str(p): _digest_path(Path(p)) for p in inputs if p},
        "output": {str(out): _digest_path(out)},
        "wall_time_s": round(time.time() - started, 3),
    }
    target = out.parent / f"{out.name}.manifest.json"
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_shape(text: str | None):
    if not text:
        return None
    try:
        h, w = (int(v) for v in text.lower().replace("x", ",").split(","))
    except ValueError:
        raise UsageError(f"--shape expects H,W, got {text!r}")
    return (h, w)


def _load(path, shapes=None) -> dict[str, np.ndarray]:
    """Label maps from a PNG directory or an RLE CSV (chosen by path)."""
    path = Path(path)
    if path.is_dir():
        return read_label_maps(path, "png16")
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    if path.suffix.lower() == ".csv":
        return read_label_maps(path, "rle", shapes)
    raise FormatError(f"{path}: expected a directory of PNGs or an RLE .csv file")


def _shapes_of(maps: dict) -> dict:
    return {k: v.shape for k, v in maps.items()}


def _load_gt_and_preds(args, pred_paths: list) -> tuple[dict, list[dict]]:
    shape = _parse_shape(getattr(args, "shape", None))
    gt = _load(args.gt, shape) if getattr(args, "gt", None) else None
    shapes = _shapes_of(gt) if gt is not None else shape
    preds = [_load(p, shapes) for p in pred_paths]
    if gt is not None:
        for path, maps in zip(pred_paths, preds):
            for image_id, lm in maps.items():
                if image_id not in gt:
                    log.warning("%s: image %s has no ground truth; ignored", path, image_id)
                elif lm.shape != gt[image_id].shape:
                    raise MaskFuseError(
                        f"{path}: image {image_id} is {lm.shape[0]}x{lm.shape[1]} but ground truth is "
                        f"{gt[image_id].shape[0]}x{gt[image_id].shape[1]}"
                    )
    return gt, preds


def _named(spec: str) -> tuple[str, str]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem or spec, spec


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _instances(maps: dict, image_id: str, shape) -> list:
    lm = maps.get(image_id)
    if lm is None:
        return []
    return instances_from_label_map(lm)


# --- commands ---------------------------------------------------------------


def cmd_synth(args, pmap):
    scene = SceneConfig(
        height=args.height, width=args.width,
        nucleus_count_range=(args.min_nuclei, args.max_nuclei),
        cluster_probability=args.cluster_prob,
    )
    out = Path(args.out)
    make_corpus(args.images, scene, CLUMPER, SPLITTER, out, master_seed=args.seed, pmap=pmap)
    if args.format == "rle":
        for sub in ("gt", "A", "B"):
            write_label_maps(out / f"{sub}.csv", read_label_maps(out / sub), "rle")
    return out, []


def cmd_make_targets(args, pmap):
    gt = _load(args.gt, _parse_shape(args.shape))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = sorted(gt)
    targets = pmap(lambda i: make_unet_targets(gt[i], args.radius), ids)
    for image_id, t in zip(ids, targets):
        write_binary_png(out / f"{image_id}_nuclei.png", t.nuclei)
        write_binary_png(out / f"{image_id}_borders.png", t.borders)
    return out, [args.gt]


def cmd_postprocess(args, pmap):
    shape = _parse_shape(args.shape)
    preds = _load(args.pred, shape)
    cfg = CleanConfig(
        min_area=args.min_area,
        fill_holes=not args.no_fill_holes,
        watershed=WatershedConfig(markerless_policy="new_label" if args.markerless == "keep" else "drop"),
    )
    borders = None
    if args.watershed:
        if not args.borders_dir:
            raise UsageError("--watershed needs --borders-dir")
        bdir = Path(args.borders_dir)
        borders = read_png_dir(bdir, "_borders") or read_png_dir(bdir)
    ids = sorted(preds)

    def run(image_id):
        raw = preds[image_id]
        b = None
        if borders is not None:
            if image_id not in borders:
                raise MaskFuseError(f"{args.borders_dir}: no border channel for image {image_id}")
            b = borders[image_id] > 0
            if b.shape != raw.shape:
                raise MaskFuseError(f"{args.borders_dir}: border map for {image_id} is {b.shape}, mask is {raw.shape}")
        insts = clean_pipeline(raw, cfg, borders=b)
        return label_map_from_instances([m.with_id(k) for k, m in enumerate(insts, 1)], *raw.shape)

    cleaned = dict(zip(ids, pmap(run, ids)))
    write_label_maps(args.out, cleaned, args.format)
    return Path(args.out), [args.pred, args.borders_dir]


def _candidates(args) -> tuple[list[ImageCandidates], dict | None]:
    paths = [p for p in (args.pred_a, args.pred_b) if p]
    if not paths:
        raise UsageError("need --pred-a and/or --pred-b")
    gt, preds = _load_gt_and_preds(args, paths)
    maps = dict(zip([s for s, p in zip(SOURCES, (args.pred_a, args.pred_b)) if p], preds))
    ids = sorted(gt) if gt is not None else sorted(set().union(*[set(m) for m in maps.values()]))
    items = []
    for image_id in ids:
        shape = gt[image_id].shape if gt is not None else next(m[image_id].shape for m in maps.values() if image_id in m)
        items.append(ImageCandidates(
            image_id,
            _instances(maps.get("A", {}), image_id, shape),
            _instances(maps.get("B", {}), image_id, shape),
            instances_from_label_map(gt[image_id]) if gt is not None else None,
            shape,
        ))
    return items, gt


def cmd_features(args, pmap):
    items, gt = _candidates(args)
    table = build_feature_table(items, with_target=gt is not None, pmap=pmap)
    header = ["ImageId", "InstanceId", "Source", *FEATURE_COLUMNS]
    if gt is not None:
        header.append("TargetIoU")
    rows = []
    for k, (image_id, source, inst_id) in enumerate(table.keys()):
        row = [image_id, inst_id, source, *table.X[k].tolist()]
        if gt is not None:
            row.append(float(table.target[k]))
        rows.append(row)
    _write_csv(Path(args.out), header, rows)
    return Path(args.out), [args.pred_a, args.pred_b, args.gt]


def cmd_train_fuser(args, pmap):
    items, gt = _candidates(args)
    if gt is None:
        raise UsageError("train-fuser needs --gt")
    cfg = TrainingConfig(
        n_trees=args.n_trees, max_depth=args.max_depth, min_samples_leaf=args.min_samples_leaf,
        shrinkage=args.shrinkage, seed=args.seed,
    )
    table = build_feature_table(items, with_target=True, pmap=pmap)
    model, oof = oof_train(items, args.folds, cfg, table=table, pmap=pmap)
    out = Path(args.model_out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out)
    if args.oof_out:
        rows = [
            (image_id, inst_id, source, float(table.target[k]), oof[(image_id, source, inst_id)])
            for k, (image_id, source, inst_id) in enumerate(table.keys())
        ]
        _write_csv(Path(args.oof_out), ["ImageId", "InstanceId", "Source", "TargetIoU", "PredIoU"], rows)
    return out, [args.pred_a, args.pred_b, args.gt]


def _read_scores(path) -> dict:
    scores = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                scores[(row["ImageId"], row["Source"], int(row["InstanceId"]))] = float(row["PredIoU"])
            except (KeyError, ValueError) as exc:
                raise FormatError(f"{path}: bad score row {row}: {exc}") from exc
    return scores


def cmd_fuse(args, pmap):
    items, _ = _candidates(args)
    model = GbmModel.load(args.model)
    cfg = FusionConfig(args.score_threshold, args.nms_threshold)
    scores = _read_scores(args.scores) if args.scores else None

    def run(item):
        given = None
        if scores is not None:
            try:
                given = tuple(
                    np.array([scores[(item.image_id, s, m.id)] for m in item.by_source(s)]) for s in SOURCES
                )
            except KeyError as exc:
                raise MaskFuseError(f"{args.scores}: no score for candidate {exc.args[0]}") from exc
        return fuse(item.cand_a, item.cand_b, model, cfg, shape=item.shape, scores=given)

    results = pmap(run, items)
    fused = {it.image_id: r.label_map for it, r in zip(items, results)}
    write_label_maps(args.out, fused, args.format)
    prov = Path(args.provenance) if args.provenance else Path(args.out).parent / f"{Path(args.out).name}.provenance.csv"
    _write_csv(
        prov, ["ImageId", "FusedId", "Source", "SourceInstanceId", "PredIoU"],
        [(it.image_id, *row) for it, r in zip(items, results) for row in r.provenance],
    )
    return Path(args.out), [args.pred_a, args.pred_b, args.model, args.scores]


def _per_image_sets(args, pmap):
    named = [_named(s) for s in args.pred]
    gt, preds = _load_gt_and_preds(args, [p for _, p in named])
    ids = sorted(gt)
    for (name, path), maps in zip(named, preds):
        missing = [i for i in ids if i not in maps]
        if missing:
            log.warning("%s: %d images without predictions (scored as empty), e.g. %s", path, len(missing), missing[0])
    gts = dict(zip(ids, pmap(lambda i: instances_from_label_map(gt[i]), ids)))
    out = []
    for (name, _), maps in zip(named, preds):
        ps = pmap(lambda i: _instances(maps, i, gt[i].shape), ids)
        out.append((name, list(zip(ps, [gts[i] for i in ids]))))
    return out


def _ap_rows(name, report):
    return [(name, float(t), ap) for t, ap in zip(THRESHOLDS, report.ap_by_threshold)]


def cmd_evaluate(args, pmap):
    sets = _per_image_sets(args, pmap)
    rows, ap_rows = [], []
    for name, per_image in sets:
        rep = evaluate(per_image, args.threshold, args.aggregate, pmap=pmap)
        rows.append((name, *rep.row().values()))
        ap_rows += _ap_rows(name, rep)
    out = Path(args.out)
    _write_csv(out, ["Model", "mAP", "Dice", "Precision", "Recall", "oseg", "useg"], rows)
    ap_path = Path(args.ap_curve) if args.ap_curve else out.parent / "ap_curve.csv"
    _write_csv(ap_path, ["Model", "Threshold", "AP"], ap_rows)
    for row in rows:
        log.info("%s: mAP=%.4f Dice=%.4f P=%.4f R=%.4f oseg=%d useg=%d", *row)
    return out, [args.gt, *(path for _, path in map(_named, args.pred))]


def cmd_ap_curve(args, pmap):
    sets = _per_image_sets(args, pmap)
    ap_rows = []
    for name, per_image in sets:
        ap_rows += _ap_rows(name, evaluate(per_image, 0.7, pmap=pmap))
    out = Path(args.out)
    _write_csv(out, ["Model", "Threshold", "AP"], ap_rows)
    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 4))
        for name, _ in sets:
            pts = [(t, ap) for n, t, ap in ap_rows if n == name]
            ax.plot(*zip(*pts), marker="o", label=name)
        ax.set_xlabel("IoU threshold")
        ax.set_ylabel("AP")
        ax.legend()
        fig.tight_layout()
        fig.savefig(args.plot)
        plt.close(fig)
    return out, [args.gt, *(path for _, path in map(_named, args.pred))]


def cmd_analyze(args, pmap):
    sets = _per_image_sets(args, pmap)
    props = ["area", "eccentricity", "cluster_size"] if args.property == "all" else [args.property]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for prop in props:
        rows = []
        for name, per_image in sets:
            rep = sensitivity_report(per_image, prop, args.bins, args.threshold)
            for k, b in enumerate(rep.bins):
                rows.append((name, prop, k, b.lo, b.hi, b.gt_count, b.matched, b.recall))
        _write_csv(out / f"sensitivity_{prop}.csv",
                   ["Model", "Property", "Bin", "Lo", "Hi", "GtCount", "Matched", "Recall"], rows)
    return out, [args.gt, *(path for _, path in map(_named, args.pred))]


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default: $MASKFUSE_THREADS or 1)")
    common.add_argument("--format", choices=("png16", "rle"), default="png16",
                        help="output mask format; inputs are detected from the path")
    common.add_argument("--shape", help="H,W image size for RLE inputs without a PNG ground truth")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="maskfuse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--images", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--min-nuclei", type=int, default=10)
    s.add_argument("--max-nuclei", type=int, default=40)
    s.add_argument("--cluster-prob", type=float, default=0.5)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("make-targets", parents=[common], help="nuclei + border target channels")
    s.add_argument("--gt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--radius", type=int, default=1)
    s.set_defaults(func=cmd_make_targets)

    s = sub.add_parser("postprocess", parents=[common], help="clean predicted label maps")
    s.add_argument("--pred", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--min-area", type=int, default=10)
    s.add_argument("--watershed", action="store_true")
    s.add_argument("--borders-dir")
    s.add_argument("--markerless", choices=("keep", "drop"), default="keep")
    s.add_argument("--no-fill-holes", action="store_true")
    s.set_defaults(func=cmd_postprocess)

    def sources(s, gt_required=False):
        s.add_argument("--pred-a")
        s.add_argument("--pred-b")
        s.add_argument("--gt", required=gt_required)

    s = sub.add_parser("features", parents=[common], help="region-feature table")
    sources(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("train-fuser", parents=[common], help="out-of-fold IoU regressor training")
    sources(s, gt_required=True)
    s.add_argument("--folds", type=int, default=4)
    s.add_argument("--n-trees", type=int, default=200)
    s.add_argument("--max-depth", type=int, default=3)
    s.add_argument("--min-samples-leaf", type=int, default=5)
    s.add_argument("--shrinkage", type=float, default=0.1)
    s.add_argument("--model-out", required=True)
    s.add_argument("--oof-out")
    s.set_defaults(func=cmd_train_fuser)

    s = sub.add_parser("fuse", parents=[common], help="fuse two candidate sets")
    sources(s)
    s.add_argument("--model", required=True)
    s.add_argument("--scores", help="CSV of precomputed PredIoU (e.g. the train-fuser OOF table)")
    s.add_argument("--score-threshold", type=float, default=0.3)
    s.add_argument("--nms-threshold", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.add_argument("--provenance")
    s.set_defaults(func=cmd_fuse)

    for name, func, helptext in (
        ("evaluate", cmd_evaluate, "mAP / Dice / precision / recall / oseg / useg report"),
        ("ap-curve", cmd_ap_curve, "AP per IoU threshold"),
        ("analyze", cmd_analyze, "recall by nucleus area, eccentricity and cluster size"),
    ):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--gt", required=True)
        s.add_argument("--pred", action="append", required=True, metavar="[NAME=]PATH")
        s.add_argument("--out", required=True)
        s.add_argument("--threshold", type=float, default=0.7)
        if name == "evaluate":
            s.add_argument("--aggregate", choices=("micro", "macro"), default="micro")
            s.add_argument("--ap-curve")
        if name == "ap-curve":
            s.add_argument("--plot")
        if name == "analyze":
            s.add_argument("--property", choices=("area", "eccentricity", "cluster_size", "all"), default="all")
            s.add_argument("--bins", type=int, default=4)
        s.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        with image_pool(args.threads) as pmap:
            out, inputs = args.func(args, pmap)
        _write_manifest(Path(out), args, inputs, started)
    except (MaskFuseError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
