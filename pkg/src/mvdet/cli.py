"""Command-line interface.

Subcommands: synth, project, augment, decode, gradcheck, evaluate, bench.
Every command is deterministic given its inputs and seed: reruns produce
byte-identical output files (bench timing figures, which are measurements
rather than outputs, are the one exception and are kept out of files).

Exit codes: 0 success, 1 check failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import statistics
import sys
import time
from typing import Sequence

import numpy as np

from . import augment as aug
from . import camgeo, decoder, matching, metrics, synth
from .featcore import FeatureError, TensorFormatError, load_pyramid, sample_multiview_many, save_pyramid

_ERRORS = (
    camgeo.GeometryError,
    FeatureError,
    TensorFormatError,
    decoder.DecoderError,
    aug.AugmentError,
    matching.MatchingError,
    metrics.MetricsError,
    synth.ConfigError,
    OSError,
    json.JSONDecodeError,
    KeyError,
    ValueError,
)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit(payload: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return
    for key, value in payload.items():
        print(f"{key}: {value}")


def _parse_floats(text: str, n: int, what: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != n:
        raise ValueError(f"{what} needs {n} comma-separated numbers, got {len(parts)}")
    return np.array([float(p) for p in parts])


# ---------------------------------------------------------------------------
# synth


def _object_depth(box: camgeo.Box3D, rig: camgeo.CameraRig) -> float:
    """Depth channel for an annotation: optical-axis range in the first
    camera that sees the centroid, else the planar range from the origin."""
    for cam in rig:
        if camgeo.is_visible(box.center, cam):
            _, depth = camgeo.project_point(box.center, cam)
            return float(depth)
    return float(np.linalg.norm(box.center[:2]))


def _cmd_synth(args) -> int:
    strides = tuple(int(s) for s in args.strides.split(","))
    scene = synth.make_scene(
        seed=args.seed,
        style=args.style,
        object_count=args.objects,
        field_kind=args.field,
        channels=args.channels,
        strides=strides,
    )
    os.makedirs(args.out, exist_ok=True)
    camgeo.save_rig(os.path.join(args.out, "calib.json"), scene.rig)
    objects = tuple(
        aug.AnnotatedObject(box=b, depth=_object_depth(b, scene.rig)) for b in scene.objects
    )
    frame = aug.AnnotatedFrame(rig=scene.rig, objects=objects)
    aug.save_frames(os.path.join(args.out, "annotations.json"), [frame])
    manifest = save_pyramid(os.path.join(args.out, "pyramid"), scene.pyramid)
    _emit(
        {
            "calib": os.path.join(args.out, "calib.json"),
            "annotations": os.path.join(args.out, "annotations.json"),
            "pyramid": manifest,
            "cameras": len(scene.rig),
            "objects": len(scene.objects),
        },
        args.json,
    )
    return 0


# ---------------------------------------------------------------------------
# project


def _cmd_project(args) -> int:
    rig = camgeo.load_rig(args.calib)
    point = _parse_floats(args.point, 3, "--point")
    cameras = []
    for i, cam in enumerate(rig):
        pixel, depth = camgeo.project_point(point, cam)
        visible = camgeo.is_visible(point, cam)
        cameras.append(
            {
                "id": cam.id,
                "index": i,
                "pixel": None if depth <= 0 else [float(pixel[0]), float(pixel[1])],
                "depth": float(depth),
                "visible": visible,
            }
        )
    payload = {
        "point": [float(x) for x in point],
        "cameras": cameras,
        "visible_cameras": sorted(camgeo.visible_cameras(point, rig)),
    }
    if args.box:
        vals = _parse_floats(args.box, 7, "--box")
        box = camgeo.Box3D(center=vals[:3], size=vals[3:6], yaw=float(vals[6]))
        payload["region"] = camgeo.classify_region(box, rig).value
    if args.out:
        _write_json(args.out, payload)
    _emit(payload, args.json)
    return 0


# ---------------------------------------------------------------------------
# augment


_MODES = {m.value: m for m in aug.ScaleMode}


def _cmd_augment(args) -> int:
    if args.scale_min <= 0 or args.scale_min > args.scale_max:
        raise ValueError(f"invalid scale range [{args.scale_min}, {args.scale_max}]")
    frames = aug.load_frames(args.annotations)
    mode = _MODES[args.mode]
    transformed = []
    log = []
    for idx, frame in enumerate(frames):
        rng = synth.derived_rng(args.seed, 100, idx)
        r = aug.sample_scale((args.scale_min, args.scale_max), rng)
        transformed.append(aug.apply_transform(frame, r, mode))
        log.append({"frame": idx, "scale": r})
    os.makedirs(args.out, exist_ok=True)
    out_frames = os.path.join(args.out, "annotations.json")
    aug.save_frames(out_frames, transformed)
    out_log = os.path.join(args.out, "augment_log.json")
    _write_json(out_log, {"mode": args.mode, "seed": args.seed, "frames": log})
    _emit({"annotations": out_frames, "log": out_log, "scales": [e["scale"] for e in log]}, args.json)
    return 0


# ---------------------------------------------------------------------------
# decode


_AGG_MODES = {m.value: m for m in decoder.AggregationMode}


def _cmd_decode(args) -> int:
    pyramid = load_pyramid(args.pyramid)
    rig = camgeo.load_rig(args.calib)
    if args.params:
        # Bundle metadata wins over the sizing flags.
        layers, head = decoder.load_params(args.params)
        if head is None:
            raise ValueError("parameter bundle does not include a prediction head")
        dim = layers[0].ffn.in_dim
    else:
        dim = args.dim
        layers = decoder.init_decoder(
            args.seed, layers=args.layers, dim=dim, neighbors=args.neighbors, heads=args.heads
        )
        head = decoder.PredictionHead.seeded(args.seed, dim=dim, num_classes=args.classes)
    if pyramid.channels != dim:
        raise ValueError(
            f"pyramid channels ({pyramid.channels}) do not match decoder dim ({dim})"
        )
    bounds = camgeo.SceneBounds(
        lo=_parse_floats(args.bounds_lo, 3, "--bounds-lo"),
        hi=_parse_floats(args.bounds_hi, 3, "--bounds-hi"),
    )
    qs = decoder.init_queries(args.seed, count=args.queries, dim=dim, bounds=bounds)
    refined, refs = decoder.decoder_forward(
        qs, layers, pyramid, rig, mode=_AGG_MODES[args.mode], offset_scale=args.offset_scale
    )
    preds = decoder.decode_predictions(refined, refs[-1], head)
    matching.save_predictions(args.out, preds)
    _emit({"predictions": args.out, "count": len(preds), "mode": args.mode}, args.json)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def _cmd_gradcheck(args) -> int:
    report = decoder.grad_check(
        seed=args.seed, eps=args.eps, tol=args.tol, probes=args.probes
    )
    payload = report.to_dict()
    if args.out:
        _write_json(args.out, payload)
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        for comp in report.components:
            status = "pass" if comp.passed else "FAIL"
            print(
                f"{comp.component}: n={comp.n_checked} jittered={comp.n_jittered} "
                f"max_abs={comp.max_abs_dev:.3e} max_rel={comp.max_rel_dev:.3e} [{status}]"
            )
        print(f"overall: {'pass' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# evaluate


def _cmd_evaluate(args) -> int:
    frames = aug.load_frames(args.gt)
    preds = matching.load_predictions(args.pred)
    rig = camgeo.load_rig(args.calib)
    for frame in frames:
        if len(frame.rig) != len(rig):
            raise ValueError(
                f"camera count mismatch: calibration has {len(rig)}, "
                f"annotations have {len(frame.rig)}"
            )
    gts = [obj.box for frame in frames for obj in frame.objects]
    cfg = metrics.EvalConfig()
    os.makedirs(args.out, exist_ok=True)
    if args.split:
        report = metrics.evaluate_region_split(preds, gts, rig, cfg)
        summary = {
            "overall_NDS": report.overall.nds,
            "overlapping_NDS": report.overlapping.nds,
            "non_overlapping_NDS": report.non_overlapping.nds,
            "overall_mAP": report.overall.mean_ap,
        }
    else:
        report = metrics.evaluate(preds, gts, cfg)
        summary = {"NDS": report.nds, "mAP": report.mean_ap}
    report_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "report.csv")
    metrics.save_report(report_path, report)
    metrics.save_report_csv(csv_path, report)
    _emit({"report": report_path, "csv": csv_path, **summary}, args.json)
    return 0


# ---------------------------------------------------------------------------
# bench


def _bench_times(fn, repeats: int) -> dict:
    fn()  # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    ordered = sorted(times)
    return {
        "median_s": statistics.median(times),
        "p95_s": ordered[min(len(ordered) - 1, int(math.ceil(0.95 * len(ordered))) - 1)],
        "min_s": ordered[0],
        "repeats": repeats,
    }


def _cmd_bench(args) -> int:
    if args.cameras < 1 or args.cameras > 6:
        raise ValueError("--cameras must be between 1 and 6")
    specs = synth.SURROUND_SPECS[: args.cameras]
    rig = synth.gen_rig("custom", specs=specs)
    strides = synth.DEFAULT_STRIDES[: args.levels]
    if len(strides) != args.levels:
        raise ValueError(f"--levels must be between 1 and {len(synth.DEFAULT_STRIDES)}")
    field = synth.random_field(args.seed, "bilinear", args.dim)
    pyramid = synth.render_pyramid(field, rig, strides)
    layers = decoder.init_decoder(
        args.seed, layers=args.layers, dim=args.dim, neighbors=args.neighbors, heads=args.heads
    )
    bounds = synth.DEFAULT_BOUNDS
    qs = decoder.init_queries(args.seed, count=args.queries, dim=args.dim, bounds=bounds)

    refined, refs = decoder.decoder_forward(qs, layers, pyramid, rig)
    checksum = hashlib.sha256(
        refined.embeddings.tobytes() + refs.tobytes()
    ).hexdigest()

    def run_pass():
        decoder.decoder_forward(qs, layers, pyramid, rig)

    # Node-feature sampling isolated: the per-neighbor cost of one layer.
    layer = layers[0]
    emb = qs.embeddings
    refs0 = bounds.lo + decoder.sigmoid(layer.ref_net(emb)) * bounds.extent
    offsets = 2.0 * np.tanh(layer.offset_net(emb)).reshape(len(qs), args.neighbors, 3)
    nodes = (refs0[:, None, :] + offsets).reshape(-1, 3)

    def run_sampling():
        sample_multiview_many(pyramid, rig, nodes)

    timing = {"node_sampling": _bench_times(run_sampling, args.repeats)}
    if not args.sampling_only:
        timing["decoder_pass"] = _bench_times(run_pass, args.repeats)
    payload = {
        "config": {
            "queries": args.queries,
            "neighbors": args.neighbors,
            "cameras": args.cameras,
            "levels": args.levels,
            "dim": args.dim,
            "layers": args.layers,
            "threads": args.threads,
            "seed": args.seed,
        },
        "node_count": int(nodes.shape[0]),
        "output_checksum": checksum,
        "timing": timing,
    }
    _emit(payload, args.json)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvdet",
        description="Multi-view 3D detection toolkit: synthetic scenes, projection, "
        "augmentation, decoding, gradient checks, evaluation, benchmarks.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=int(os.environ.get("MVDET_THREADS", "1")),
        help="worker thread budget; results are identical for any value",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    p.add_argument("--style", choices=("nuscenes-like", "single"), default="nuscenes-like")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--objects", type=int, default=50)
    p.add_argument("--field", choices=("constant", "linear", "bilinear"), default="bilinear")
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--strides", default="8,16,32,64")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("project", help="project a point (and classify a box) against a rig")
    p.add_argument("--calib", required=True)
    p.add_argument("--point", required=True, help="x,y,z in meters")
    p.add_argument("--box", help="cx,cy,cz,w,l,h,yaw")
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_project)

    p = sub.add_parser("augment", help="apply a multi-scale transform to annotation frames")
    p.add_argument("--annotations", required=True)
    p.add_argument("--scale-min", type=float, required=True)
    p.add_argument("--scale-max", type=float, required=True)
    p.add_argument("--mode", choices=sorted(_MODES), default="depth-invariant")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_augment)

    p = sub.add_parser("decode", help="run the query decoder over a pyramid")
    p.add_argument("--pyramid", required=True, help="pyramid manifest path")
    p.add_argument("--calib", required=True)
    p.add_argument("--params", help="parameter bundle manifest; seeded init when omitted")
    p.add_argument("--mode", choices=sorted(_AGG_MODES), default="dynamic-graph")
    p.add_argument("--neighbors", type=int, default=16)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--queries", type=int, default=900)
    p.add_argument("--dim", type=int, default=256)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--offset-scale", type=float, default=2.0)
    p.add_argument("--bounds-lo", default="-40,-40,-0.5")
    p.add_argument("--bounds-hi", default="40,40,3")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_decode)

    p = sub.add_parser("gradcheck", help="finite-difference check of analytic gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--probes", type=int, default=32)
    p.add_argument("--out")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("evaluate", help="score predictions against annotations")
    p.add_argument("--gt", required=True, help="annotation JSON")
    p.add_argument("--pred", required=True, help="prediction JSON")
    p.add_argument("--calib", required=True)
    p.add_argument("--split", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("bench", help="decoder latency and sampling throughput")
    p.add_argument("--queries", type=int, default=900)
    p.add_argument("--neighbors", type=int, default=16)
    p.add_argument("--cameras", type=int, default=6)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sampling-only", action="store_true",
                   help="time node-feature sampling only, skip full decoder passes")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
