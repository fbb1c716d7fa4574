"""Single-shot detection post-processing.

Pipeline: binarize the TCL map, restore one quad candidate per TCL pixel
from the vertex offsets, merge candidates with greedy NMS, cluster the TCL
pixels onto the surviving quads by nearest predicted center (point-to-quad
assignment), then rebuild an arbitrary-shape polygon per instance from the
border offsets.  A connected-components baseline replaces the middle
stages for ablation comparisons.

All stages run on map-resolution arrays; the final polygons are scaled by
the stride back to input-image coordinates.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .errors import DegenerateInstance
from .labels import MapBundle

_CC_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DetectConfig:
    """Tunable knobs of the detect pipeline (defaults match the CLI)."""

    tcl_thresh: float = 0.5
    nms_iou: float = 0.3
    min_pixels: int = 5
    baseline: str = "p2q"  # "p2q" | "cc"
    expand_ratio: float = 0.3  # CC-path end extension, in local heights
    tbo_lookup: str = "nearest"  # "nearest" | "bilinear"
    max_center_dist: float = float("inf")

    def __post_init__(self):
        if not 0.0 < self.tcl_thresh < 1.0:
            raise ValueError("tcl_thresh must be in (0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if self.baseline not in ("p2q", "cc"):
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.tbo_lookup not in ("nearest", "bilinear"):
            raise ValueError(f"unknown tbo_lookup {self.tbo_lookup!r}")


@dataclass(frozen=True)
class QuadCandidate:
    """One restored quad with its TCL score and precomputed center."""

    quad: np.ndarray  # (4, 2) canonical clockwise, map coords
    score: float
    center: np.ndarray  # (2,) mean of the vertices


@dataclass(frozen=True)
class TextInstance:
    """A cluster of TCL pixels bound to one surviving quad candidate."""

    quad: QuadCandidate
    pixels: np.ndarray  # (m, 2) int array of (row, col)


@dataclass(frozen=True)
class DetectedText:
    polygon: np.ndarray  # (2n, 2) input-image coords
    score: float


def binarize_tcl(tcl: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Boolean mask of TCL responses above the threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    t = np.asarray(tcl)
    if t.ndim == 3:
        t = t[:, :, 0]
    return t > threshold


def _propose_arrays(mask: np.ndarray, tcl: np.ndarray, tvo: np.ndarray):
    """Vectorized quad restoration: one candidate per masked pixel.

    Returns (quads, scores, centers) of convex clockwise canonical quads;
    degenerate or non-convex restorations are dropped.
    """
    t = np.asarray(tcl)
    if t.ndim == 3:
        t = t[:, :, 0]
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return (
            np.zeros((0, 4, 2), dtype=np.float64),
            np.zeros(0, dtype=np.float64),
            np.zeros((0, 2), dtype=np.float64),
        )
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    offs = np.asarray(tvo)[rows, cols].reshape(-1, 4, 2).astype(np.float64)
    quads = pts[:, None, :] + offs
    scores = t[rows, cols].astype(np.float64)

    # enforce clockwise orientation, then roll v0 to min(x+y) (ties: min y)
    x, y = quads[:, :, 0], quads[:, :, 1]
    areas = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    ccw = areas < 0
    quads[ccw] = quads[ccw, ::-1]
    keys = quads[:, :, 0] + quads[:, :, 1]
    tie = keys <= keys.min(axis=1, keepdims=True) + 1e-9
    ysel = np.where(tie, quads[:, :, 1], np.inf)
    best = np.argmin(ysel, axis=1)
    ridx = np.arange(len(quads))[:, None]
    cidx = (np.arange(4)[None, :] + best[:, None]) % 4
    quads = quads[ridx, cidx]

    ok = geo.quads_convex_clockwise(quads, min_area=1.0)
    quads, scores = quads[ok], scores[ok]
    centers = quads.mean(axis=1)
    return quads, scores, centers


def propose_quads(mask: np.ndarray, tcl: np.ndarray, tvo: np.ndarray) -> list[QuadCandidate]:
    quads, scores, centers = _propose_arrays(mask, tcl, tvo)
    return [
        QuadCandidate(quad=q, score=float(s), center=c)
        for q, s, c in zip(quads, scores, centers)
    ]


def _nms_arrays(quads: np.ndarray, scores: np.ndarray, centers: np.ndarray, iou_thresh: float):
    """Greedy NMS with score-mean merging.

    Candidates are visited in (score desc, center y, center x) order; each
    pick suppresses every remaining candidate overlapping it with IoU >=
    the threshold and takes the mean score of itself plus the suppressed.
    Returns (kept indices into the input arrays, merged scores).
    """
    n = len(quads)
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.float64)
    order = np.lexsort((centers[:, 0], centers[:, 1], -scores))
    q = quads[order]
    s = scores[order]
    x0 = q[:, :, 0].min(axis=1)
    x1 = q[:, :, 0].max(axis=1)
    y0 = q[:, :, 1].min(axis=1)
    y1 = q[:, :, 1].max(axis=1)
    alive = np.ones(n, dtype=bool)
    kept: list[int] = []
    merged: list[float] = []
    while True:
        remaining = np.nonzero(alive)[0]
        if remaining.size == 0:
            break
        i = remaining[0]
        alive[i] = False
        rest = remaining[1:]
        suppressed_scores = [s[i]]
        if rest.size:
            near = (
                (x0[rest] <= x1[i])
                & (x1[rest] >= x0[i])
                & (y0[rest] <= y1[i])
                & (y1[rest] >= y0[i])
            )
            cand = rest[near]
            if cand.size:
                ious = geo.quad_iou_many(q[i], q[cand])
                hit = cand[ious >= iou_thresh]
                if hit.size:
                    alive[hit] = False
                    suppressed_scores.extend(s[hit].tolist())
        kept.append(order[i])
        merged.append(float(np.mean(suppressed_scores)))
    return np.asarray(kept, dtype=np.int64), np.asarray(merged, dtype=np.float64)


def nms(cands: list[QuadCandidate], iou_thresh: float = 0.3) -> list[QuadCandidate]:
    """Greedy overlap suppression over quad candidates (see _nms_arrays)."""
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    if not cands:
        return []
    quads = np.stack([c.quad for c in cands])
    scores = np.asarray([c.score for c in cands], dtype=np.float64)
    centers = np.stack([c.center for c in cands])
    kept, merged = _nms_arrays(quads, scores, centers, iou_thresh)
    return [
        QuadCandidate(quad=quads[i], score=float(m), center=centers[i])
        for i, m in zip(kept, merged)
    ]


def point_to_quad_assign(
    mask: np.ndarray,
    tco: np.ndarray,
    kept: list[QuadCandidate],
    min_pixels: int = 5,
    max_center_dist: float = float("inf"),
) -> list[TextInstance]:
    """Cluster masked pixels onto the surviving quads.

    Each pixel votes with its predicted low-level center (pixel + TCO) and
    joins the candidate with the nearest center (ties: lower candidate
    index).  Instances below ``min_pixels`` are discarded together with
    their pixels.
    """
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return []
    if not kept:
        warnings.warn("TCL mask is non-empty but no quad candidates survive")
        return []
    pts = np.stack([cols, rows], axis=1).astype(np.float64)
    low_centers = pts + np.asarray(tco)[rows, cols].astype(np.float64)
    centers = np.stack([c.center for c in kept])
    d2 = ((low_centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    owner = np.argmin(d2, axis=1)
    if np.isfinite(max_center_dist):
        owner = np.where(d2[np.arange(len(owner)), owner] <= max_center_dist**2, owner, -1)
    instances = []
    for ci, cand in enumerate(kept):
        sel = owner == ci
        if int(np.count_nonzero(sel)) < min_pixels:
            continue
        pix = np.stack([rows[sel], cols[sel]], axis=1)
        instances.append(TextInstance(quad=cand, pixels=pix))
    return instances


def connected_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected clusters of a boolean mask, in raster-scan order.

    Returns a list of (m, 2) int arrays of (row, col) pixels; clusters are
    ordered by their first pixel in raster order and pixels within each
    cluster are raster-sorted, independent of the labeling backend.
    """
    m = np.asarray(mask).astype(bool)
    labels, count = ndimage.label(m, structure=_CC_STRUCTURE)
    if count == 0:
        return []
    flat = labels.ravel()
    nz = np.nonzero(flat)[0]
    ids, first = np.unique(flat[nz], return_index=True)
    order = np.argsort(nz[first], kind="stable")
    clusters = []
    for lab in ids[order]:
        rr, cc = np.nonzero(labels == lab)
        clusters.append(np.stack([rr, cc], axis=1))
    return clusters


def _bucket_centers(pts: np.ndarray, proj: np.ndarray, n: int) -> np.ndarray:
    """Centroids of n equal projection buckets; empty ones interpolated."""
    pmin, pmax = proj.min(), proj.max()
    span = max(pmax - pmin, 1e-12)
    bi = np.clip(((proj - pmin) / span * n).astype(np.int64), 0, n - 1)
    counts = np.bincount(bi, minlength=n).astype(np.float64)
    sx = np.bincount(bi, weights=pts[:, 0], minlength=n)
    sy = np.bincount(bi, weights=pts[:, 1], minlength=n)
    filled = counts > 0
    idx = np.arange(n, dtype=np.float64)
    cx = np.interp(idx, idx[filled], sx[filled] / counts[filled])
    cy = np.interp(idx, idx[filled], sy[filled] / counts[filled])
    return np.stack([cx, cy], axis=1)


def _lookup_tbo(centers: np.ndarray, pix_pts: np.ndarray, tbo_vals: np.ndarray, mode: str):
    """TBO samples for continuous center points.

    Returns (sample positions, sample values): the effective pixel location
    each value was read from, so callers can anchor border points at the
    exact chain point (pixel + offset).  nearest: the closest instance
    pixel with informative (nonzero) offsets.  bilinear: weighted blend of
    the enclosing instance pixels, falling back to nearest when none of
    the four neighbors qualifies.
    """
    informative = np.abs(tbo_vals).sum(axis=1) > 1e-9
    if informative.any():
        cand_pts = pix_pts[informative]
        cand_vals = tbo_vals[informative]
    else:
        cand_pts = pix_pts
        cand_vals = tbo_vals
    d2 = ((centers[:, None, :] - cand_pts[None, :, :]) ** 2).sum(axis=2)
    near_idx = np.argmin(d2, axis=1)
    near_pts = cand_pts[near_idx]
    near_vals = cand_vals[near_idx]
    if mode == "nearest":
        return near_pts, near_vals
    out_pts = near_pts.copy()
    out_vals = near_vals.copy()
    keyed = {(int(p[1]), int(p[0])): v for p, v in zip(cand_pts, cand_vals)}
    for i, c in enumerate(centers):
        fx, fy = np.floor(c[0]), np.floor(c[1])
        acc_v = np.zeros(4)
        acc_p = np.zeros(2)
        wsum = 0.0
        for dx in (0, 1):
            for dy in (0, 1):
                key = (int(fy + dy), int(fx + dx))
                if key not in keyed:
                    continue
                wgt = (1 - abs(c[0] - (fx + dx))) * (1 - abs(c[1] - (fy + dy)))
                if wgt <= 0:
                    continue
                acc_v += wgt * keyed[key]
                acc_p += wgt * np.array([fx + dx, fy + dy])
                wsum += wgt
        if wsum > 1e-9:
            out_vals[i] = acc_v / wsum
            out_pts[i] = acc_p / wsum
    return out_pts, out_vals


def reconstruct_polygon(
    inst: TextInstance,
    tbo: np.ndarray,
    stride: int = 4,
    expand_ratio: float = 0.3,
    use_quad_extent: bool = True,
    tbo_lookup: str = "nearest",
) -> DetectedText:
    """Rebuild the instance polygon from border offsets.

    Instance pixels are projected on the quad's long axis and split into
    n = clamp(round(extent / mean local height), 2, 64) equal buckets; the
    bucket centroids form the sampled center line.  End samples are pushed
    out to the quad's projected extent (point-to-quad path) or extended by
    ``expand_ratio`` local heights (no-quad baseline path), since the
    ground-truth center line is end-shrunk.  Each sampled point plus its
    up/down border offsets yields one boundary pair; the pairs are linked
    into a clockwise polygon and scaled back to input coordinates.
    """
    pix = inst.pixels
    if len(pix) == 0:
        raise DegenerateInstance("instance has no pixels")
    pts = np.stack([pix[:, 1], pix[:, 0]], axis=1).astype(np.float64)
    quad = inst.quad.quad

    v0, v1, v2, v3 = quad
    top_len = np.linalg.norm(v1 - v0) + np.linalg.norm(v2 - v3)
    side_len = np.linalg.norm(v3 - v0) + np.linalg.norm(v2 - v1)
    if top_len >= side_len:
        direction = (v1 - v0) + (v2 - v3)
    else:
        direction = (v3 - v0) + (v2 - v1)
    nrm = np.linalg.norm(direction)
    if nrm < 1e-12:
        raise DegenerateInstance("instance quad has no run direction")
    direction = direction / nrm
    if direction[0] < -1e-12 or (abs(direction[0]) <= 1e-12 and direction[1] < 0):
        direction = -direction

    proj = pts @ direction
    pmin, pmax = float(proj.min()), float(proj.max())
    extent = pmax - pmin

    tbo_vals = np.asarray(tbo)[pix[:, 0], pix[:, 1]].astype(np.float64)
    up_norm = np.linalg.norm(tbo_vals[:, 0:2], axis=1)
    low_norm = np.linalg.norm(tbo_vals[:, 2:4], axis=1)
    heights = up_norm + low_norm
    informative = heights > 1e-9
    if informative.any():
        mean_h = float(heights[informative].mean())
    else:
        mean_h = float(min(top_len, side_len)) / 2.0
    if mean_h < 1e-9:
        raise DegenerateInstance("instance has zero local height")

    n = int(np.clip(round(extent / mean_h), 2, 64))
    centers = _bucket_centers(pts, proj, n)

    # push the end samples out to the original instance extent
    if use_quad_extent:
        qproj = quad @ direction
        lo = float(np.clip(qproj.min(), pmin - mean_h, pmin))
        hi = float(np.clip(qproj.max(), pmax, pmax + mean_h))
    else:
        end_h = heights[informative].mean() if informative.any() else mean_h
        lo = pmin - expand_ratio * float(end_h)
        hi = pmax + expand_ratio * float(end_h)
    for end, target, inner in ((0, lo, 1), (n - 1, hi, n - 2)):
        tangent = centers[end] - centers[inner]
        tnorm = np.linalg.norm(tangent)
        tangent = tangent / tnorm if tnorm > 1e-9 else direction * (1 if end else -1)
        along = float(tangent @ direction)
        if abs(along) < 0.3:
            tangent, along = direction, 1.0
        centers[end] = centers[end] + tangent * (target - float(centers[end] @ direction)) / along

    # anchor each border pair at the sampled pixel's exact chain points and
    # slide them along the run direction to the bucket's longitudinal
    # position; this keeps borders on the chains (the lookup pixel sits up
    # to a pixel off the sampled center point) and lets the end samples
    # extrapolate past the shrunk TCL extent
    sample_pts, offsets = _lookup_tbo(centers, pts, tbo_vals, tbo_lookup)
    slide = ((centers - sample_pts) @ direction)[:, None] * direction[None, :]
    upper = sample_pts + offsets[:, 0:2] + slide
    lower = sample_pts + offsets[:, 2:4] + slide
    polygon = np.vstack([upper, lower[::-1]]) * float(stride)
    if not geo.is_clockwise(polygon):
        polygon = polygon[::-1].copy()
    if geo.polygon_area(polygon) <= 1e-9:
        raise DegenerateInstance("reconstructed polygon has zero area")
    return DetectedText(polygon=polygon, score=float(inst.quad.score))


def _cc_instances(mask: np.ndarray, tcl2d: np.ndarray, min_pixels: int) -> list[TextInstance]:
    """Connected-components baseline: one instance per cluster with a
    min-area rect fitted to the pixel footprints."""
    instances = []
    for pix in connected_components(mask):
        if len(pix) < min_pixels:
            continue
        pts = np.stack([pix[:, 1], pix[:, 0]], axis=1).astype(np.float64)
        corners = np.concatenate(
            [pts + np.array([dx, dy]) for dx in (-0.5, 0.5) for dy in (-0.5, 0.5)]
        )
        quad = geo.min_enclosing_quad(corners)
        score = float(tcl2d[pix[:, 0], pix[:, 1]].mean())
        cand = QuadCandidate(quad=quad, score=score, center=geo.quad_center(quad))
        instances.append(TextInstance(quad=cand, pixels=pix))
    return instances


def detect(bundle: MapBundle, cfg: DetectConfig = DetectConfig()) -> list[DetectedText]:
    dets, _ = detect_timed(bundle, cfg)
    return dets


def detect_timed(bundle: MapBundle, cfg: DetectConfig = DetectConfig()):
    """Run the pipeline and time each stage (seconds).

    Stages: binarize, propose, nms, assign, reconstruct (the cc baseline
    folds propose/nms/assign into a single components stage).
    """
    times: dict[str, float] = {}
    tcl2d = bundle.tcl[:, :, 0]

    t0 = time.perf_counter()
    mask = binarize_tcl(bundle.tcl, cfg.tcl_thresh)
    times["binarize"] = time.perf_counter() - t0

    if cfg.baseline == "cc":
        t0 = time.perf_counter()
        instances = _cc_instances(mask, tcl2d, cfg.min_pixels)
        times["components"] = time.perf_counter() - t0
        use_quad_extent = False
    else:
        t0 = time.perf_counter()
        quads, scores, centers = _propose_arrays(mask, bundle.tcl, bundle.tvo)
        times["propose"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        kept_idx, merged = _nms_arrays(quads, scores, centers, cfg.nms_iou)
        kept = [
            QuadCandidate(quad=quads[i], score=float(m), center=centers[i])
            for i, m in zip(kept_idx, merged)
        ]
        times["nms"] = time.perf_counter() - t0

        t0 = time.perf_counter()
        instances = point_to_quad_assign(
            mask, bundle.tco, kept, cfg.min_pixels, cfg.max_center_dist
        )
        times["assign"] = time.perf_counter() - t0
        use_quad_extent = True

    t0 = time.perf_counter()
    dets = []
    for inst in instances:
        try:
            dets.append(
                reconstruct_polygon(
                    inst,
                    bundle.tbo,
                    stride=bundle.stride,
                    expand_ratio=cfg.expand_ratio,
                    use_quad_extent=use_quad_extent,
                    tbo_lookup=cfg.tbo_lookup,
                )
            )
        except DegenerateInstance as exc:
            warnings.warn(f"instance dropped during reconstruction: {exc}")
    times["reconstruct"] = time.perf_counter() - t0
    return dets, times
