"""Command-line front-end.

Subcommands: gen-labels, detect, eval, synth, gradcheck, bench.  Results go
to files or stdout as JSON; diagnostics go to stderr.  Exit codes: 0 on
success, 1 on validation/usage errors, 2 on I/O errors.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import attention, evaluation, geometry as geo, losses, postprocess, synth, tensorops
from .errors import TextGeomError
from .labels import gen_bundle, load_bundle, save_bundle


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="textgeom", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-labels", help="generate ground-truth maps from an annotation file")
    p.add_argument("--gt", required=True, help="annotation file (x1,y1,...,transcription per line)")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--shrink", type=float, default=0.3)
    p.add_argument("--out", required=True, help="output directory for .smap files + meta.json")

    p = sub.add_parser("detect", help="run detection on a map bundle or a scene corpus")
    p.add_argument("--maps", required=True, help="bundle directory, or corpus directory with manifest.json")
    p.add_argument("--tcl-thresh", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.add_argument("--min-pixels", type=int, default=5)
    p.add_argument("--baseline", choices=["p2q", "cc"], default="p2q")
    p.add_argument("--expand-ratio", type=float, default=0.3)
    p.add_argument("--tbo-lookup", choices=["nearest", "bilinear"], default="nearest")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output JSON file (corpus mode: directory)")

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--det", required=True, help="detection JSON file or directory of them")
    p.add_argument("--gt", required=True, help="annotation file, corpus directory, or directory of files")
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--dontcare", choices=["iou", "iod"], default="iou")
    p.add_argument("--scale", type=float, default=4.0, help="IoU rasterization samples per pixel")
    p.add_argument("--out", default=None, help="optional output JSON file (default: stdout)")

    p = sub.add_parser("synth", help="generate a synthetic scene corpus")
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--kind", choices=["quad", "curved", "mixed"], default="quad")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--n-instances", type=int, default=5)
    p.add_argument("--min-gap", type=float, default=10.0)
    p.add_argument("--curvature", type=float, default=0.15)
    p.add_argument("--canvas", default="512x512", help="HxW in input pixels")
    p.add_argument("--adjacent-pairs", type=int, default=0)
    p.add_argument("--pair-gap", type=float, default=2.0)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--shrink", type=float, default=0.3)

    p = sub.add_parser("gradcheck", help="run central-difference gradient checks")
    p.add_argument("--module", choices=["all", "cab", "losses", "tensor"], default="all")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per op")
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", help="time the detect pipeline stages")
    p.add_argument("--maps", required=True)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--baseline", choices=["p2q", "cc"], default="p2q")
    p.add_argument("--tcl-thresh", type=float, default=0.5)
    p.add_argument("--nms-iou", type=float, default=0.3)
    p.add_argument("--min-pixels", type=int, default=5)
    p.add_argument("--out", default=None)
    return parser


def _emit(payload, out_path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).parent.mkdir(parents=True, exist_ok=True)
        Path(out_path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _detections_payload(dets) -> dict:
    return {
        "detections": [
            {
                "polygon": [[float(x), float(y)] for x, y in det.polygon],
                "score": float(det.score),
            }
            for det in dets
        ]
    }


def _load_detections(path) -> list[postprocess.DetectedText]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return [
        postprocess.DetectedText(
            polygon=np.asarray(d["polygon"], dtype=np.float64), score=float(d["score"])
        )
        for d in payload["detections"]
    ]


def _cmd_gen_labels(args) -> int:
    anns = geo.read_annotations(args.gt)
    bundle = gen_bundle(anns, args.height, args.width, stride=args.stride, r=args.shrink)
    save_bundle(bundle, args.out, height=args.height, width=args.width, shrink_ratio=args.shrink)
    print(f"wrote {len(anns)} instances to {args.out}", file=sys.stderr)
    return 0


def _detect_cfg(args) -> postprocess.DetectConfig:
    return postprocess.DetectConfig(
        tcl_thresh=args.tcl_thresh,
        nms_iou=args.nms_iou,
        min_pixels=args.min_pixels,
        baseline=args.baseline,
        expand_ratio=args.expand_ratio,
        tbo_lookup=args.tbo_lookup,
    )


def _detect_one(task):
    maps_dir, cfg = task
    bundle, _ = load_bundle(maps_dir)
    return _detections_payload(postprocess.detect(bundle, cfg))


def _cmd_detect(args) -> int:
    maps = Path(args.maps)
    if not maps.exists():
        raise FileNotFoundError(f"maps directory not found: {maps}")
    cfg = _detect_cfg(args)
    manifest_path = maps / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        names = [e["name"] for e in manifest["scenes"]]
        tasks = [(maps / name / "maps", cfg) for name in names]
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                payloads = list(pool.map(_detect_one, tasks))
        else:
            payloads = [_detect_one(t) for t in tasks]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, payload in zip(names, payloads):
            _emit(payload, out / f"{name}.json")
        print(f"detected {len(names)} scenes into {out}", file=sys.stderr)
    else:
        payload = _detect_one((maps, cfg))
        _emit(payload, args.out)
        print(f"{len(payload['detections'])} detections", file=sys.stderr)
    return 0


def _gt_for(det_file: Path, gt_root: Path) -> Path:
    if gt_root.is_file():
        return gt_root
    stem = det_file.stem
    per_scene = gt_root / stem / "gt.txt"
    if per_scene.exists():
        return per_scene
    flat = gt_root / f"{stem}.txt"
    if flat.exists():
        return flat
    raise FileNotFoundError(f"no ground truth for {det_file.name} under {gt_root}")


def _cmd_eval(args) -> int:
    det_path = Path(args.det)
    gt_path = Path(args.gt)
    if det_path.is_dir():
        det_files = sorted(det_path.glob("*.json"))
        if not det_files:
            raise FileNotFoundError(f"no detection files in {det_path}")
    else:
        if not det_path.exists():
            raise FileNotFoundError(f"detection file not found: {det_path}")
        det_files = [det_path]
    results = []
    per_image = []
    for df in det_files:
        dets = _load_detections(df)
        gts = geo.read_annotations(_gt_for(df, gt_path))
        res = evaluation.evaluate(
            dets, gts, iou_thresh=args.iou, dontcare_mode=args.dontcare, iou_scale=args.scale
        )
        results.append(res)
        per_image.append(
            {
                "name": df.stem,
                "precision": res.precision,
                "recall": res.recall,
                "hmean": res.hmean,
                "true_positives": res.true_positives,
                "n_dets": res.n_dets,
                "n_gts": res.n_gts,
            }
        )
    agg = evaluation.aggregate(results)
    payload = {
        "precision": agg.precision,
        "recall": agg.recall,
        "hmean": agg.hmean,
        "per_image": per_image,
    }
    _emit(payload, args.out)
    return 0


def _cmd_synth(args) -> int:
    try:
        h, w = (int(v) for v in args.canvas.lower().split("x"))
    except ValueError as exc:
        raise ValueError(f"bad --canvas {args.canvas!r}, expected HxW") from exc
    specs = [
        synth.SceneSpec(
            seed=args.seed + i,
            canvas=(h, w),
            n_instances=args.n_instances,
            kind=args.kind,
            min_gap=args.min_gap,
            curvature=args.curvature,
            adjacent_pairs=args.adjacent_pairs,
            pair_gap=args.pair_gap,
        )
        for i in range(args.n_scenes)
    ]
    manifest = synth.write_corpus(args.out, specs, stride=args.stride, shrink_ratio=args.shrink)
    print(f"wrote {len(manifest['scenes'])} scenes to {args.out}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# gradcheck suite
# ---------------------------------------------------------------------------


def _check_matmul(rng):
    a = rng.standard_normal((4, 5))
    b = rng.standard_normal((5, 3))
    v = rng.standard_normal((4, 3))

    def fn(a_, b_):
        out = tensorops.matmul(a_, b_)
        da, db = tensorops.matmul_backward(a_, b_, v)
        return float(np.sum(out * v)), (da, db)

    return tensorops.grad_check(fn, [a, b])


def _check_sigmoid(rng):
    x = rng.standard_normal((3, 4)) * 2.0
    v = rng.standard_normal((3, 4))

    def fn(x_):
        y = tensorops.sigmoid(x_)
        return float(np.sum(y * v)), (tensorops.sigmoid_backward(y, v),)

    return tensorops.grad_check(fn, [x])


def _check_conv1x1(rng):
    x = rng.standard_normal((2, 3, 3, 4))
    w = rng.standard_normal((4, 5)) * 0.5
    b = rng.standard_normal(5) * 0.1
    v = rng.standard_normal((2, 3, 3, 5))

    def fn(x_, w_, b_):
        y = tensorops.conv1x1(x_, w_, b_)
        dx, dw, db = tensorops.conv1x1_backward(x_, w_, v)
        return float(np.sum(y * v)), (dx, dw, db)

    return tensorops.grad_check(fn, [x, w, b])


def _check_dice(rng):
    pred = rng.uniform(0.05, 0.95, size=(6, 6, 1))
    gt = (rng.uniform(size=(6, 6, 1)) > 0.6).astype(np.float64)
    ignore = (rng.uniform(size=(6, 6, 1)) > 0.9).astype(np.float64)

    def fn(p_):
        loss, grad = losses.dice_loss(p_, gt, ignore)
        return loss, (grad,)

    return tensorops.grad_check(fn, [pred])


def _check_smooth_l1(rng):
    pred = rng.standard_normal((6, 6, 4)) * 2.0
    gt = rng.standard_normal((6, 6, 4)) * 2.0
    mask = (rng.uniform(size=(6, 6, 1)) > 0.5).astype(np.float64)

    def fn(p_):
        loss, grad = losses.smooth_l1(p_, gt, mask)
        return loss, (grad,)

    return tensorops.grad_check(fn, [pred])


_CAB_FIELDS = (
    "w_theta", "b_theta", "w_phi", "b_phi", "w_g", "b_g", "w_reduce", "b_reduce",
)


def _check_cab(rng):
    c = 4
    x = rng.standard_normal((1, 3, 3, c)) * 0.5
    w = attention.CabWeights.seeded(c, seed=int(rng.integers(1 << 31)), scale=0.2)
    v = rng.standard_normal(x.shape)

    def fn(x_, *weight_arrays):
        w_ = attention.CabWeights(**dict(zip(_CAB_FIELDS, weight_arrays)))
        y = attention.cab_forward(x_, w_)
        dx, dw = attention.cab_backward(x_, w_, v)
        return float(np.sum(y * v)), (dx, *(getattr(dw, f) for f in _CAB_FIELDS))

    inputs = [x] + [getattr(w, f) for f in _CAB_FIELDS]
    return tensorops.grad_check(fn, inputs)


_GRADCHECK_SUITE = {
    "tensor": [("matmul", _check_matmul), ("sigmoid", _check_sigmoid), ("conv1x1", _check_conv1x1)],
    "losses": [("dice_loss", _check_dice), ("smooth_l1", _check_smooth_l1)],
    "cab": [("cab_forward_backward", _check_cab)],
}


def run_gradchecks(module: str = "all", seed: int = 7, n_seeds: int = 5) -> list[dict]:
    groups = _GRADCHECK_SUITE if module == "all" else {module: _GRADCHECK_SUITE[module]}
    reports = []
    for ops in groups.values():
        for name, check in ops:
            worst = 0.0
            passed = True
            for k in range(n_seeds):
                rng = np.random.default_rng(seed + 1000 * k)
                rep = check(rng)
                worst = max(worst, rep.max_rel_err)
                passed = passed and rep.passed
            reports.append({"op": name, "max_rel_err": worst, "passed": passed})
    return reports


def _cmd_gradcheck(args) -> int:
    reports = run_gradchecks(args.module, args.seed, args.seeds)
    _emit(reports, args.out)
    return 0 if all(r["passed"] for r in reports) else 1


def _percentile(values, q):
    vs = sorted(values)
    idx = min(int(round(q / 100.0 * (len(vs) - 1))), len(vs) - 1)
    return vs[idx]


def bench(maps_dir, iters: int = 20, cfg: postprocess.DetectConfig | None = None) -> dict:
    """Warm up 5 iterations, then time detect stages over ``iters`` runs."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cfg = cfg or postprocess.DetectConfig()
    bundle, _ = load_bundle(maps_dir)
    for _ in range(5):
        postprocess.detect_timed(bundle, cfg)
    stage_samples: dict[str, list[float]] = {}
    totals = []
    n_instances = 0
    for _ in range(iters):
        t0 = time.perf_counter()
        dets, stages = postprocess.detect_timed(bundle, cfg)
        totals.append(time.perf_counter() - t0)
        n_instances = len(dets)
        for name, val in stages.items():
            stage_samples.setdefault(name, []).append(val)

    def stats(samples):
        ms = [s * 1e3 for s in samples]
        return {
            "mean_ms": statistics.fmean(ms),
            "median_ms": statistics.median(ms),
            "p95_ms": _percentile(ms, 95),
        }

    return {
        "stages": {name: stats(vals) for name, vals in stage_samples.items()},
        "total": stats(totals),
        "instances": n_instances,
        "images_per_s": 1.0 / statistics.fmean(totals),
        "iters": iters,
    }


def _cmd_bench(args) -> int:
    cfg = postprocess.DetectConfig(
        tcl_thresh=args.tcl_thresh,
        nms_iou=args.nms_iou,
        min_pixels=args.min_pixels,
        baseline=args.baseline,
    )
    report = bench(args.maps, iters=args.iters, cfg=cfg)
    _emit(report, args.out)
    return 0


_COMMANDS = {
    "gen-labels": _cmd_gen_labels,
    "detect": _cmd_detect,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, IsADirectoryError, PermissionError, json.JSONDecodeError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, TextGeomError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
