"""Command-line entry point: ``toolpose3d <command> ...``.

Exit status is 0 on success, 2 on a usage error and 1 on any runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import dataset, metrics, pipeline, simulator, streams
from .camera import load_rig, save_rig
from .errors import ToolPoseError

log = logging.getLogger("toolpose3d")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def _rig_arg(text: str):
    """A rig JSON file, or an ``<arrays>x<cameras>`` ring spec."""
    path = Path(text)
    if path.exists():
        return load_rig(path)
    try:
        spec = simulator.RigSpec.parse(text)
    except ToolPoseError:
        raise ToolPoseError(f"{text}: no such rig file and not a ring spec like 2x5") from None
    return simulator.make_rig(spec)


def cmd_simulate(args) -> int:
    rig = _rig_arg(args.rig)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    noise = simulator.NoiseModel(
        sigma_px=args.sigma, dropout_prob=args.dropout, seed=args.seed, tip_swap_prob=args.tip_swap
    )
    save_rig(rig, out / "rig.json")
    with open(out / "detections.txt", "w") as det, open(out / "gt.txt", "w") as gt, \
            open(out / "labels2d.txt", "w") as lab:
        for fr in simulator.simulate(rig, args.frames, noise):
            det.write(streams.format_detection_frame(fr.frame_index, fr.all_detections()))
            lab.write(streams.format_detection_frame(fr.frame_index, fr.all_labels()))
            gt.write(streams.format_gt_frame(fr.frame_index, fr.gt.pose, fr.gt.beans))
    print(f"wrote {args.frames} frames for {len(rig)} cameras to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    rig = load_rig(args.rig)
    options = pipeline.PipelineOptions(alpha=args.alpha, tau_epi=args.tau_epi)
    out = Path(args.out)
    with open(out, "w") as sink:
        result = pipeline.run_pipeline(pipeline.StreamSource(args.input), rig, options, sink)
    timing_path = Path(args.timing) if args.timing else out.with_name(out.name + ".timing.json")
    timing_path.write_text(result.timing.to_json())
    t = result.timing
    print(
        f"{len(result.poses)} frames reconstructed, {result.skipped} skipped; "
        f"mean ms/frame " + " ".join(f"{s}={t.mean(s):.3f}" for s in pipeline.STAGES)
        + f" total={t.total:.3f}"
    )
    return 0


def _image_items(frames):
    items = []
    for f in frames:
        if isinstance(f, streams.DetectionFrame):
            items.extend(((f.frame_index, d.view_id), d) for d in f.detections)
    return items


def cmd_evaluate(args) -> int:
    if args.mode == "bpe":
        if not args.rig:
            raise ToolPoseError("--mode bpe needs --rig (BPE projects into the cameras)")
        rig = load_rig(args.rig)
        size = rig.image_size()
        if size is None:
            raise ToolPoseError(f"{args.rig}: cameras differ in image size")
        dets = {
            f.frame_index: f.batch
            for f in streams.read_detection_stream(args.gt)
            if isinstance(f, streams.DetectionFrame)
        }
        acc = metrics.BpeAccumulator(*size, squared=args.squared)
        for frame in streams.read_poses(args.pred):
            if isinstance(frame, streams.SkipRecord):
                continue
            if frame.frame_index not in dets:
                raise ToolPoseError(f"{args.gt}: no detections for frame {frame.frame_index}")
            pipeline.accumulate_frame_bpe(acc, frame, dets[frame.frame_index], rig)
        text = acc.report().to_text()
    else:
        preds = _image_items(streams.read_detection_stream(args.pred))
        gts = _image_items(streams.read_detection_stream(args.gt))
        mode = "iou" if args.mode == "od" else "oks"
        params = None
        if mode == "oks":
            params = {c: metrics.OksParams.for_class(c, args.oks_k) for c in (metrics.GRASPER, metrics.BEAN)}
        text = metrics.evaluate_detections(preds, gts, mode, params).to_text()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    rig = load_rig(args.rig)
    frames = streams.read_detection_stream(args.input)
    options = pipeline.PipelineOptions(alpha=args.alpha, tau_epi=args.tau_epi)
    table = pipeline.ablate_views(frames, rig, args.k_min, args.k_max, options)
    Path(args.out).write_text(table.to_text())
    print(" ".join(f"k={k}:{n}" for k, n in sorted(table.evaluations.items())))
    return 0


def cmd_augment(args) -> int:
    stems = dataset.augment_corpus(args.images, args.masks, args.textures, args.seed, args.out)
    print(f"augmented {len(stems)} samples into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="toolpose3d", description="Multi-view 3D pose reconstruction for laparoscopic tools.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="render a synthetic detection stream with ground truth")
    s.add_argument("--rig", required=True, help="rig JSON file or ring spec such as 2x5")
    s.add_argument("--frames", type=int, required=True)
    s.add_argument("--sigma", type=float, default=0.0, help="pixel noise std-dev")
    s.add_argument("--dropout", type=float, default=0.0, help="per-keypoint miss probability")
    s.add_argument("--tip-swap", type=float, default=0.5, help="per-view tip order swap probability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="reconstruct poses from a detection stream")
    r.add_argument("--rig", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--alpha", type=float, default=0.0, help="temporal smoothing factor in [0, 1]")
    r.add_argument("--tau-epi", type=float, default=pipeline.DEFAULT_TAU_EPI, help="bean gate in pixels")
    r.add_argument("--timing", help="timing report path (default <out>.timing.json)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("evaluate", help="score poses (bpe) or detections (od, pe)")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True, help="detection stream: observations for bpe, labels for od/pe")
    e.add_argument("--mode", required=True, choices=("bpe", "od", "pe"))
    e.add_argument("--rig", help="rig JSON (bpe mode)")
    e.add_argument("--squared", action="store_true", help="bpe: mean squared distance")
    e.add_argument("--oks-k", type=float, default=metrics.DEFAULT_OKS_K, help="pe: keypoint constant")
    e.add_argument("--out", help="report path (default stdout)")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="BPE averaged over every camera subset per view count")
    a.add_argument("--rig", required=True)
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--k-min", type=int, default=2)
    a.add_argument("--k-max", type=int)
    a.add_argument("--alpha", type=float, default=0.0)
    a.add_argument("--tau-epi", type=float, default=pipeline.DEFAULT_TAU_EPI)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("augment", help="substitute background and marker textures")
    g.add_argument("--images", required=True)
    g.add_argument("--masks", required=True)
    g.add_argument("--textures", required=True, help="directory with bg_*.ppm and marker_*.ppm")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_augment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ToolPoseError, OSError, ValueError) as exc:
        print(f"toolpose3d {args.command}: error: {exc}", file=sys.stderr)
        return 1
