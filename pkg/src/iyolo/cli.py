"""Command-line entry points: detect, eval, train-toy, gradcheck, info.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import evaluation as ev
from .errors import NoGroundTruthError
from .formats import (Annotation, format_annotation, read_annotations, read_ppm,
                      write_annotations, write_csv, write_ppm)
from .loss import LsrConfig
from .network import count_params, iyolo_spec, layer_table
from .pipeline import DetectConfig, detect, load_network, render, to_annotations
from .trainer import (TrainConfig, grad_check, probe_instance, synth_dataset,
                      train)
from .weights import save_weights

log = logging.getLogger("iyolo")

GRADCHECK_TOL = 1e-3
PR_FLOOR = 0.01  # lowest confidence kept for precision/recall sweeps


def _threshold(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{v} is not in [0, 1]")
    return v


def _workers():
    try:
        return max(1, int(os.environ.get("IYOLO_THREADS", "1")))
    except ValueError:
        return 1


def cmd_detect(args):
    net = load_network(args.weights)
    image = read_ppm(args.image)
    dets = detect(net, image, DetectConfig(args.conf, args.nms))
    anns = to_annotations(dets)
    if args.out:
        write_annotations(args.out, anns, header=f"detections for {Path(args.image).name}")
    else:
        for a in anns:
            print(format_annotation(a))
    if args.render:
        write_ppm(render(image, dets), args.render)
    print(f"{len(dets)} detections", file=sys.stderr)
    return 0


def _load_dets(path):
    return [ev.Detection(a.class_id, a.box(), 1.0 if a.confidence is None else a.confidence)
            for a in read_annotations(path)]


def cmd_eval(args):
    images = sorted(Path(args.images).glob("*.ppm"))
    if not images:
        raise FileNotFoundError(f"no .ppm images in {args.images}")
    labels_dir = Path(args.labels)
    pairs, missing = [], 0
    for img in images:
        lab = labels_dir / (img.stem + ".txt")
        if not lab.exists():
            log.warning("missing annotation for %s", img.name)
            missing += 1
            continue
        pairs.append((img, lab))
    net = load_network(args.weights) if args.weights else None
    floor = min(args.conf, PR_FLOOR)

    def run(pair):
        img, lab = pair
        gts = [a.to_ground_truth() for a in read_annotations(lab)]
        if net is not None:
            dets = detect(net, read_ppm(img), DetectConfig(floor, args.nms))
        else:
            dets = _load_dets(Path(args.dets) / (img.stem + ".txt"))
        return gts, dets

    with ThreadPoolExecutor(max_workers=_workers()) as pool:
        outputs = list(pool.map(run, pairs))
    full = [ev.match(dets, gts, args.iou) for gts, dets in outputs]
    strict = [ev.match([d for d in dets if d.confidence >= args.conf], gts, args.iou)
              for gts, dets in outputs]
    report = ev.metrics(strict)
    curve = ev.pr_curve(full)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "metrics.csv", ev.MetricsReport.COLUMNS, [report.as_row()])
    write_csv(out / "pr.csv", ("threshold", "precision", "recall"), curve)
    for name, value in zip(ev.MetricsReport.COLUMNS, report.as_row()):
        print(f"{name}: {value:.4f}")
    print(f"evaluated {len(pairs)} images, skipped {missing} without annotations")
    return 0


def cmd_train_toy(args):
    out = Path(args.out)
    (out / "data" / "images").mkdir(parents=True, exist_ok=True)
    (out / "data" / "labels").mkdir(parents=True, exist_ok=True)
    dataset = synth_dataset(args.seed, args.n_images)
    for i, s in enumerate(dataset):
        write_ppm(s.image, out / "data" / "images" / f"img_{i:03d}.ppm")
        write_annotations(out / "data" / "labels" / f"img_{i:03d}.txt",
                          [Annotation.from_box(g.class_id, g.box) for g in s.gts])
    runs = [("", True)] + ([("_no_ohem", False)] if args.compare_ohem else [])
    for suffix, ohem in runs:
        cfg = TrainConfig(seed=args.seed, iterations=args.iters, batch_size=args.batch,
                          learning_rate=args.lr, ohem_enabled=ohem,
                          lsr=LsrConfig(args.epsilon, 3))
        net, history = train(cfg, dataset)
        save_weights(net, out / f"weights{suffix}.iyw")
        history.to_csv(out / f"loss{suffix}.csv")
        first, last = history.smoothed(min(20, args.iters))
        print(f"ohem={'on' if ohem else 'off'}: smoothed loss {first:.4f} -> {last:.4f}")
    return 0


def cmd_gradcheck(args):
    worst = 0.0
    for kind in ("linear", "composite"):
        net, x, loss_fn = probe_instance(args.seed, kind)
        result = grad_check(net, x, loss_fn, seed=args.seed)
        print(f"{kind}: max relative error {result.max_relative_error:.3e} "
              f"({result.checked} params, {result.skipped_kinks} kink draws skipped)")
        worst = max(worst, result.max_relative_error)
    ok = worst <= GRADCHECK_TOL
    print(f"max error {worst:.3e} {'<=' if ok else '>'} {GRADCHECK_TOL:g}: "
          f"{'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_info(args):
    if args.weights:
        net = load_network(args.weights)
        spec, total = net.spec, net.num_params()
    else:
        spec = iyolo_spec()
        total = count_params(spec)
    print(f"{'Number':>6}  {'Layer':<13} {'Filters':>7}  {'Size':<6} {'Output':<9}")
    for number, kind, filters, size, output, _channels in layer_table(spec):
        print(f"{number:>6}  {kind:<13} {filters:>7}  {size:<6} {output:<9}")
    print(f"total parameters: {total}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="iyolo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="run the detector on one PPM image")
    d.add_argument("--weights", required=True)
    d.add_argument("--image", required=True)
    d.add_argument("--out", help="annotation output file (default: stdout)")
    d.add_argument("--render", metavar="PPM", help="write the image with boxes drawn")
    d.add_argument("--conf", type=_threshold, default=0.25)
    d.add_argument("--nms", type=_threshold, default=0.45)
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="detection/classification rates and PR curve")
    e.add_argument("--images", required=True)
    e.add_argument("--labels", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights")
    src.add_argument("--dets", help="directory of precomputed detection files")
    e.add_argument("--out", required=True)
    e.add_argument("--conf", type=_threshold, default=0.25)
    e.add_argument("--nms", type=_threshold, default=0.45)
    e.add_argument("--iou", type=_threshold, default=0.5)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train-toy", help="train the tiny network on synthetic rectangles")
    t.add_argument("--seed", type=int, default=3)
    t.add_argument("--iters", type=int, default=300)
    t.add_argument("--out", required=True)
    t.add_argument("--epsilon", type=_threshold, default=0.1)
    t.add_argument("--compare-ohem", action="store_true")
    t.add_argument("--n-images", type=int, default=8)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=1e-3)
    t.set_defaults(func=cmd_train_toy)

    g = sub.add_parser("gradcheck", help="finite-difference check of the backward pass")
    g.add_argument("--seed", type=int, default=1)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("info", help="print the layer table and parameter count")
    i.add_argument("--weights")
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "iters", 1) < 1 or getattr(args, "n_images", 1) < 1 \
            or getattr(args, "batch", 1) < 1:
        parser.error("--iters, --n-images and --batch must be >= 1")
    try:
        return args.func(args)
    except NoGroundTruthError as exc:
        print(f"error: no ground truth: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
