"""Ground-truth map generation from polygon annotations.

Produces the four aligned raster maps at 1/4 stride (configurable):

* tcl  (H, W, 1): shrunk text-center-line mask in [0, 1]
* tco  (H, W, 2): offset from each TCL pixel to its enclosing quad center
* tvo  (H, W, 8): offsets to the four enclosing-quad vertices
* tbo  (H, W, 4): offsets to the paired points on the top/bottom boundary

plus an ignore mask for don't-care and skipped instances.  Offsets are
stored in map-resolution pixels; pixel (r, c) corresponds to the map-space
point (x=c, y=r).  Every non-TCL pixel has all offset channels exactly 0.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import DegenerateInstance, OutOfRegion
from .tensorops import smap_read, smap_write

MIN_EDGE_INPUT_PX = 8.0


@dataclass
class MapBundle:
    """The four geometry maps plus the ignore mask, aligned at one stride."""

    tcl: np.ndarray
    tco: np.ndarray
    tvo: np.ndarray
    tbo: np.ndarray
    ignore: np.ndarray
    stride: int = 4

    @property
    def height(self) -> int:
        return self.tcl.shape[0]

    @property
    def width(self) -> int:
        return self.tcl.shape[1]

    def copy(self) -> "MapBundle":
        return MapBundle(
            tcl=self.tcl.copy(),
            tco=self.tco.copy(),
            tvo=self.tvo.copy(),
            tbo=self.tbo.copy(),
            ignore=self.ignore.copy(),
            stride=self.stride,
        )


@dataclass(frozen=True)
class BorderOffsetPair:
    """Offsets from a TCL point to its paired top/bottom boundary points."""

    upper: np.ndarray
    lower: np.ndarray


def shrink_to_tcl(poly, r: float) -> np.ndarray:
    """Shrink a chain polygon toward its center line.

    Each top/bottom vertex moves toward its opposite-chain partner by
    r x (local height); the two end vertex pairs additionally move inward
    along the running direction by the same amount.
    """
    if not 0.0 < r < 0.5:
        raise ValueError(f"shrink ratio must be in (0, 0.5), got {r}")
    p = geo.validate_polygon(poly)
    k = len(p) // 2
    top = p[:k].copy()
    bottom_rev = p[k:][::-1].copy()
    heights = np.linalg.norm(top - bottom_rev, axis=1)
    if np.any(heights < 1e-9):
        raise DegenerateInstance("zero local height between chain partners")
    new_top = top + r * (bottom_rev - top)
    new_bot = bottom_rev + r * (top - bottom_rev)

    for end, inner in ((0, 1), (k - 1, k - 2)):
        run_t = top[inner] - top[end]
        run_b = bottom_rev[inner] - bottom_rev[end]
        run = run_t / max(np.linalg.norm(run_t), 1e-12) + run_b / max(
            np.linalg.norm(run_b), 1e-12
        )
        norm = np.linalg.norm(run)
        if norm < 1e-12:
            raise DegenerateInstance("undefined running direction at polygon end")
        run = run / norm
        shift = r * heights[end] * run
        new_top[end] = new_top[end] + shift
        new_bot[end] = new_bot[end] + shift

    shrunk = np.vstack([new_top, new_bot[::-1]])
    if geo.polygon_area(shrunk) <= 1e-9 or not geo.is_simple(shrunk):
        raise DegenerateInstance("shrink collapsed the instance")
    # end shrink must not fold the chain back on itself
    for chain, orig in ((new_top, top), (new_bot, bottom_rev)):
        d_orig = orig[-1] - orig[0]
        d_new = chain[-1] - chain[0]
        if float(np.dot(d_orig, d_new)) <= 0:
            raise DegenerateInstance("shrink collapsed the instance")
    return shrunk


def _quad_run_direction(quad: np.ndarray) -> np.ndarray:
    """Unit average of the top and bottom edge directions (left to right)."""
    v1, v2, v3, v4 = quad
    d_top = v2 - v1
    d_bot = v3 - v4
    d_top = d_top / max(np.linalg.norm(d_top), 1e-12)
    d_bot = d_bot / max(np.linalg.norm(d_bot), 1e-12)
    d = d_top + d_bot
    n = np.linalg.norm(d)
    if n < 1e-12:
        raise DegenerateInstance("opposite top/bottom edge directions")
    return d / n


def _tbo_for_points(quad: np.ndarray, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized border-offset pairs for points inside one chain quad.

    Works in a local frame whose x-axis is the quad's average run direction,
    so near-vertical side edges never produce infinite slopes.  The
    interpolation ratio t is clamped to [0, 1] for points marginally
    outside the quad.
    """
    v1, v2, v3, v4 = quad
    d = _quad_run_direction(quad)
    rot = np.array([[d[0], d[1]], [-d[1], d[0]]])  # rows: run axis, normal axis
    lv1, lv2, lv3, lv4 = (rot @ (v - v1) for v in quad)
    lp = (pts - v1) @ rot.T

    # intersection of the run-direction line through p with the side edges,
    # solved on the normal coordinate
    def edge_ratio(a, b):
        denom = b[1] - a[1]
        if abs(denom) < 1e-9:
            return None
        return (lp[:, 1] - a[1]) / denom

    u_l = edge_ratio(lv1, lv4)
    u_r = edge_ratio(lv2, lv3)
    if u_l is None or u_r is None:
        # side edge parallel to the run direction: fall back to the run-axis
        # extent, which is exact for parallelogram-like quads
        denom = max(lv2[0] - lv1[0], 1e-12)
        t = (lp[:, 0] - lv1[0]) / denom
    else:
        p1 = lv1 + u_l[:, None] * (lv4 - lv1)
        p2 = lv2 + u_r[:, None] * (lv3 - lv2)
        seg = p2 - p1
        seg_len2 = np.maximum((seg * seg).sum(axis=1), 1e-12)
        t = ((lp - p1) * seg).sum(axis=1) / seg_len2
    t = np.clip(t, 0.0, 1.0)

    upper = v1[None, :] + t[:, None] * (v2 - v1)[None, :] - pts
    lower = v4[None, :] + t[:, None] * (v3 - v4)[None, :] - pts
    return upper, lower


def gen_tbo_for_quad(quad, p0) -> BorderOffsetPair:
    """Border-offset pair for a single point inside a chain-ordered quad."""
    q = np.asarray(quad, dtype=np.float64)
    p = np.asarray(p0, dtype=np.float64).reshape(2)
    if not geo.points_in_polygon(p[None, :], q)[0]:
        # boundary points fail the half-open inside test; allow a small slack
        ring = np.vstack([q, q[:1]])
        if geo.points_to_polyline_distance(p[None, :], ring)[0] > 1e-6:
            raise OutOfRegion(f"point {p.tolist()} lies outside the quad")
    upper, lower = _tbo_for_points(q, p[None, :])
    return BorderOffsetPair(upper=upper[0], lower=lower[0])


def gen_bundle(anns, height: int, width: int, stride: int = 4, r: float = 0.3) -> MapBundle:
    """Generate ground-truth maps for one image.

    ``height``/``width`` are input-image dimensions; maps are created at
    ceil(dim / stride).  Instances whose minimum enclosing-quad edge is
    shorter than 8 input px, and don't-care regions, land in the ignore
    mask instead of the TCL.  Overlapping instances overwrite earlier ones
    on contested pixels (with a warning).
    """
    if height <= 0 or width <= 0 or stride <= 0:
        raise ValueError("dimensions and stride must be positive")
    h = math.ceil(height / stride)
    w = math.ceil(width / stride)
    tcl = np.zeros((h, w, 1), dtype=np.float32)
    tco = np.zeros((h, w, 2), dtype=np.float32)
    tvo = np.zeros((h, w, 8), dtype=np.float32)
    tbo = np.zeros((h, w, 4), dtype=np.float32)
    ignore = np.zeros((h, w, 1), dtype=np.float32)

    for ann in anns:
        poly_map = geo.as_points(ann.polygon) / stride
        if ann.dont_care:
            ignore[geo.rasterize_polygon(poly_map, h, w), 0] = 1.0
            continue
        quad = geo.min_enclosing_quad(poly_map)
        edge_lens = np.linalg.norm(np.roll(quad, -1, axis=0) - quad, axis=1)
        if edge_lens.min() * stride < MIN_EDGE_INPUT_PX:
            ignore[geo.rasterize_polygon(poly_map, h, w), 0] = 1.0
            continue
        try:
            tcl_poly = shrink_to_tcl(poly_map, r)
        except DegenerateInstance as exc:
            warnings.warn(f"instance skipped: {exc}")
            ignore[geo.rasterize_polygon(poly_map, h, w), 0] = 1.0
            continue

        mask = geo.rasterize_polygon(tcl_poly, h, w)
        rows, cols = np.nonzero(mask)
        if rows.size == 0:
            warnings.warn("instance TCL rasterized to zero pixels; ignored")
            ignore[geo.rasterize_polygon(poly_map, h, w), 0] = 1.0
            continue
        if np.any(tcl[rows, cols, 0] > 0.5):
            warnings.warn("overlapping instances: later instance overwrites contested pixels")

        pts = np.stack([cols, rows], axis=1).astype(np.float64)  # (m, 2) as (x, y)
        center = geo.quad_center(quad)
        tcl[rows, cols, 0] = 1.0
        tco[rows, cols] = (center[None, :] - pts).astype(np.float32)
        tvo[rows, cols] = (quad[None, :, :] - pts[:, None, :]).reshape(-1, 8).astype(np.float32)

        quads = geo.decompose_to_quads(poly_map)
        assigned = np.full(len(pts), -1, dtype=np.int64)
        for qi, qd in enumerate(quads):
            todo = assigned < 0
            if not todo.any():
                break
            inside = geo.points_in_polygon(pts[todo], qd)
            idx = np.nonzero(todo)[0][inside]
            assigned[idx] = qi
        leftover = np.nonzero(assigned < 0)[0]
        if leftover.size:
            # raster points can straddle shared quad edges; snap to the
            # nearest quad boundary
            dists = np.stack(
                [
                    geo.points_to_polyline_distance(pts[leftover], np.vstack([qd, qd[:1]]))
                    for qd in quads
                ],
                axis=1,
            )
            assigned[leftover] = np.argmin(dists, axis=1)
        up = np.empty((len(pts), 2), dtype=np.float64)
        low = np.empty((len(pts), 2), dtype=np.float64)
        for qi, qd in enumerate(quads):
            sel = assigned == qi
            if not sel.any():
                continue
            u, lo = _tbo_for_points(qd, pts[sel])
            up[sel] = u
            low[sel] = lo
        tbo[rows, cols, 0:2] = up.astype(np.float32)
        tbo[rows, cols, 2:4] = low.astype(np.float32)

    return MapBundle(tcl=tcl, tco=tco, tvo=tvo, tbo=tbo, ignore=ignore, stride=stride)


# ---------------------------------------------------------------------------
# Bundle directory layout: tcl.smap, tco.smap, tvo.smap, tbo.smap,
# ignore.smap, meta.json
# ---------------------------------------------------------------------------

_MAP_NAMES = ("tcl", "tco", "tvo", "tbo", "ignore")


def save_bundle(bundle: MapBundle, out_dir, height: int | None = None, width: int | None = None, shrink_ratio: float = 0.3) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in _MAP_NAMES:
        smap_write(out / f"{name}.smap", getattr(bundle, name))
    meta = {
        "height": int(height if height is not None else bundle.height * bundle.stride),
        "width": int(width if width is not None else bundle.width * bundle.stride),
        "stride": int(bundle.stride),
        "shrink_ratio": float(shrink_ratio),
    }
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_bundle(in_dir) -> tuple[MapBundle, dict]:
    src = Path(in_dir)
    with open(src / "meta.json", encoding="utf-8") as fh:
        meta = json.load(fh)
    maps = {name: smap_read(src / f"{name}.smap") for name in _MAP_NAMES}
    bundle = MapBundle(stride=int(meta["stride"]), **maps)
    return bundle, meta
