"""Command-line entry point: ``maskclip <subcommand> ...``.

Failures exit with status 1 and print one line ``error: <stage>: <message>``
to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import flops, formats, metrics, rma, synth, training, vit
from .mask_tokens import MaskSet
from .pipeline import (
    DEFAULT_TAU,
    MIN_AREA,
    EmbeddingTable,
    PanopticMap,
    SegmentPrediction,
    clip_baseline,
    merge_panoptic,
    propose_masks,
    segment,
)

log = logging.getLogger("maskclip")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(name, " ".join(str(exc).split()) or type(exc).__name__) from exc
        return inner
    return wrap


def _layers(text: str | None):
    if text is None:
        return None
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t) if text else ()


def _write_json(path, obj) -> None:
    formats.atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def sample_dirs(root) -> list[Path]:
    root = Path(root)
    if (root / "image.ppm").exists():
        return [root]
    return sorted(p.parent for p in root.rglob("image.ppm"))


# ------------------------------------------------------------------ gen-data


@_stage("gen-data")
def cmd_gen_data(args) -> None:
    out = Path(args.out_dir)
    rng = np.random.default_rng(args.seed)
    weights = formats.load_weights(args.weights) if args.weights else vit.init_weights(vit.TOY_CONFIG, args.seed)
    proto = synth.make_prototype_scene(rng, weights.config.image_size)
    table = synth.build_table(proto, weights)
    formats.save_weights(out / "weights.mcw", weights)
    table.save(out / "table.jsonl")
    synth.write_sample(out / "prototypes" / "proto_000", proto)
    for i in range(args.n_samples):
        synth.write_sample(out / "samples" / f"sample_{i:03d}", synth.make_scene(rng, weights.config.image_size))
    print(json.dumps({"out_dir": str(out), "samples": args.n_samples, "categories": table.names}))


# ------------------------------------------------------------------ segment / baseline


def _load_masks(args, image):
    if args.propose:
        return propose_masks("synthetic", image=image, min_area=args.min_area)
    if not args.masks:
        raise ValueError("give --masks or --propose")
    masks = propose_masks(args.masks)
    if args.theta is not None:
        masks = MaskSet(masks.masks, args.theta).validate()
    return masks


def _write_segmentation(out: Path, pan: PanopticMap, scores, table, final_masks=None) -> None:
    pan.save(out / "panoptic", table)
    _write_json(out / "scores.json", {"categories": table.names, "scores": np.asarray(scores).tolist()})
    if final_masks is not None:
        formats.write_masks(out / "refined_masks.mcm", final_masks)


@_stage("segment")
def cmd_segment(args) -> None:
    image = formats.read_image(args.image)
    weights = formats.load_weights(args.weights)
    table = EmbeddingTable.load(args.table)
    masks = _load_masks(args, image)
    params = formats.load_rma(args.rma) if args.rma else None
    pan, scores, final = segment(image, masks, weights, table, params, args.tau, args.eps, args.min_area)
    _write_segmentation(Path(args.out), pan, scores, table, final if params is not None else None)
    print(json.dumps({"segments": len(pan.segments), "out": args.out}))


@_stage("baseline")
def cmd_baseline(args) -> None:
    image = formats.read_image(args.image)
    weights = formats.load_weights(args.weights)
    table = EmbeddingTable.load(args.table)
    masks = _load_masks(args, image)
    with vit.counting() as counter:
        scores = clip_baseline(image, masks, weights, table, args.tau)
    preds = [SegmentPrediction(masks.masks[i], scores[i]) for i in range(len(masks))]
    pan = merge_panoptic(preds, table, min_area=args.min_area)
    _write_segmentation(Path(args.out), pan, scores, table)
    print(json.dumps({"segments": len(pan.segments), "forward_passes": counter.passes, "out": args.out}))


# ------------------------------------------------------------------ train


def load_dataset(root, table: EmbeddingTable) -> list[training.Sample]:
    samples = []
    for d in sample_dirs(root):
        image, props, gts, labels = synth.read_sample(d, table)
        samples.append(training.Sample(image, props.validate(), gts, labels))
    return samples


@_stage("train-toy")
def cmd_train(args) -> None:
    weights = formats.load_weights(args.weights)
    table = EmbeddingTable.load(args.table)
    data = load_dataset(args.data, table)
    if not data:
        raise ValueError(f"no samples under {args.data}")
    if args.rma:
        params = formats.load_rma(args.rma)
    else:
        params = rma.init_rma_params(weights, _layers(args.rma_layers), seed=args.seed)
    before = weights.current_hash()
    result = training.fit(data, weights, params, table, steps=args.steps, lr=args.lr,
                          weight_decay=args.weight_decay, optimizer=args.optimizer, tau=args.tau, eps=args.eps)
    if weights.current_hash() != before:
        raise RuntimeError("backbone weights changed during training")
    out = Path(args.out)
    formats.save_rma(out / "rma.mcw", result.params, weights.config)
    _write_json(out / "losses.json", {"losses": result.losses, "rma_layers": list(result.params.layers)})
    print(json.dumps({"initial_loss": result.losses[0], "final_loss": result.losses[-1], "out": str(out)}))


# ------------------------------------------------------------------ eval


def gt_panoptic(sample_dir: Path, table: EmbeddingTable) -> PanopticMap:
    if (sample_dir / "panoptic.pgm").exists():
        return PanopticMap.load(sample_dir / "panoptic")
    gts, _ = formats.read_masks(sample_dir / "gt_masks.mcm")
    names = json.loads((sample_dir / "gt.json").read_text())["categories"]
    cats = [table.index(n) for n in names]
    return PanopticMap.from_masks(gts, cats, [table.is_thing(c) for c in cats])


def evaluate_dirs(pred_root, gt_root, table: EmbeddingTable) -> dict[str, float]:
    """Compare ``<pred_root>/<name>/panoptic.*`` against ``<gt_root>/<name>``."""
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    gt_dirs = {d.relative_to(gt_root).as_posix(): d for d in sample_dirs(gt_root)}
    if not gt_dirs:
        gt_dirs = {p.parent.relative_to(gt_root).as_posix(): p.parent for p in sorted(gt_root.rglob("panoptic.pgm"))}
    report = metrics.PQReport()
    sem_p, sem_g = [], []
    p_inst, g_inst = [], []
    for idx, (name, gdir) in enumerate(sorted(gt_dirs.items())):
        pdir = pred_root / name if name != "." else pred_root
        if not (pdir / "panoptic.pgm").exists():
            raise FileNotFoundError(f"no prediction for sample {name!r}")
        pred = PanopticMap.load(pdir / "panoptic")
        gt = gt_panoptic(gdir, table)
        report = report.merge(metrics.panoptic_quality(pred, gt))
        sem_p.append(pred.semantic().ravel())
        sem_g.append(gt.semantic().ravel())
        for pan, bucket in ((pred, p_inst), (gt, g_inst)):
            for sid, s in pan.segments.items():
                if s.is_thing:
                    bucket.append(metrics.Instance(pan.segment_id == sid, s.category, s.confidence, idx))
    mean_iou, _ = metrics.miou(np.concatenate(sem_p), np.concatenate(sem_g), len(table))
    ap = metrics.instance_ap(p_inst, g_inst)
    out = report.as_dict()
    out.update(miou=mean_iou, ap=100 * ap["ap"], ap50=100 * ap["ap50"], ap75=100 * ap["ap75"], samples=len(gt_dirs))
    return out


@_stage("eval")
def cmd_eval(args) -> None:
    table = EmbeddingTable.load(args.table)
    out = evaluate_dirs(args.pred, args.gt, table)
    if args.out:
        _write_json(args.out, out)
    print(json.dumps(out, sort_keys=True))


# ------------------------------------------------------------------ flops


@_stage("flops")
def cmd_flops(args) -> None:
    cfg = flops.vit_l14(args.image_size) if args.config == "vit-l14" else vit.TOY_CONFIG
    layers = _layers(args.rma_layers)
    if layers is None:
        layers = rma.default_layers(cfg.depth)
    single = flops.flops_forward(cfg, m=args.num_masks)
    with_rma = flops.flops_forward(cfg, m=args.num_masks, rma_layers=layers)
    base = flops.flops_baseline(cfg, args.num_masks)
    out = {
        "config": args.config,
        "num_masks": args.num_masks,
        "rma_layers": list(layers),
        "tflops": single.tflops,
        "tflops_with_rma": with_rma.tflops,
        "tflops_baseline": base.tflops,
        "ratio": base.macs / single.macs,
        "ratio_with_rma": base.macs / with_rma.macs,
    }
    if args.out:
        _write_json(args.out, out)
    print(json.dumps(out, sort_keys=True))


# ------------------------------------------------------------------ parser


def _add_segment_inputs(p) -> None:
    p.add_argument("--image", required=True)
    p.add_argument("--masks")
    p.add_argument("--propose", action="store_true", help="run the synthetic proposer instead of loading masks")
    p.add_argument("--weights", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--theta", type=float, default=None)
    p.add_argument("--min-area", type=int, default=MIN_AREA)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maskclip", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset, backbone weights and prototype table")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-samples", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--weights", help="reuse an existing backbone instead of a seeded one")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("segment", help="segment one image with mask class tokens (and RMA if --rma)")
    _add_segment_inputs(p)
    p.add_argument("--rma", help="trained RMA parameter file")
    p.add_argument("--eps", type=float, default=rma.DEFAULT_EPS)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("baseline", help="per-mask masked-image baseline (one forward pass per mask)")
    _add_segment_inputs(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("train-toy", help="fit RMA parameters on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--rma", help="initial RMA parameters (default: fresh init)")
    p.add_argument("--rma-layers", help="comma-separated 1-based layers, e.g. 2,4,6,8")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--optimizer", choices=("adamw", "sgd"), default="adamw")
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--eps", type=float, default=rma.DEFAULT_EPS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PQ/SQ/RQ, mIoU and AP of a predictions dir against a ground-truth dir")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytic FLOPs of the single pass vs the per-mask baseline")
    p.add_argument("--config", choices=("vit-l14", "toy"), default="vit-l14")
    p.add_argument("--image-size", type=int, default=640)
    p.add_argument("--num-masks", type=int, default=100)
    p.add_argument("--rma-layers")
    p.add_argument("--out")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
