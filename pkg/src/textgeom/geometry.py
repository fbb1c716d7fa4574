"""Geometric primitives shared by every stage of the pipeline.

Coordinates are image pixels: +x right, +y down.  Polygons and quads are
``(n, 2)`` float arrays of ``[x, y]`` rows.  A quad has four vertices in
clockwise order (image coordinates); canonical quads start at the vertex
minimizing x+y.  A general text polygon has an even vertex count: the first
half traces the top boundary left to right, the second half the bottom
boundary right to left, so the whole ring is clockwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidPolygon

DONT_CARE_TOKEN = "###"


@dataclass(frozen=True)
class Annotation:
    """One labelled text instance: polygon plus transcription.

    ``dont_care`` is kept in sync with the ``###`` transcription marker.
    """

    polygon: np.ndarray
    transcription: str = ""
    dont_care: bool = field(default=False)

    def __post_init__(self):
        pts = as_points(self.polygon)
        object.__setattr__(self, "polygon", pts)
        if self.transcription == DONT_CARE_TOKEN and not self.dont_care:
            object.__setattr__(self, "dont_care", True)
        if self.dont_care and self.transcription != DONT_CARE_TOKEN:
            object.__setattr__(self, "transcription", DONT_CARE_TOKEN)


def as_points(pts) -> np.ndarray:
    """Coerce to an (n, 2) float64 array and reject non-finite input."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidPolygon(f"expected (n, 2) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidPolygon("non-finite coordinates")
    return arr


def signed_area(pts) -> float:
    """Shoelace sum; positive for clockwise rings in image coordinates."""
    p = np.asarray(pts, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def polygon_area(pts) -> float:
    """Absolute polygon area in px² (shoelace)."""
    p = as_points(pts)
    if len(p) < 3:
        raise InvalidPolygon(f"polygon needs at least 3 points, got {len(p)}")
    return abs(signed_area(p))


def is_clockwise(pts) -> bool:
    return signed_area(pts) > 0.0


def is_simple(pts) -> bool:
    """True when no two non-adjacent edges intersect (O(n²) segment test)."""
    p = as_points(pts)
    n = len(p)
    if n < 3:
        return False
    a = p
    b = np.roll(p, -1, axis=0)
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            if _segments_intersect(a[i], b[i], a[j], b[j]):
                return False
    return True


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(v) < 1e-12:
            return 0
        return 1 if v > 0 else -1

    def on_seg(a, b, c):
        return (
            min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12
            and min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12
        )

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and on_seg(p3, p4, p1):
        return True
    if d2 == 0 and on_seg(p3, p4, p2):
        return True
    if d3 == 0 and on_seg(p1, p2, p3):
        return True
    if d4 == 0 and on_seg(p1, p2, p4):
        return True
    return False


def validate_polygon(pts) -> np.ndarray:
    """Check the text-polygon invariants; returns the coerced array.

    Even vertex count >= 4, finite, simple, positive area.
    """
    p = as_points(pts)
    if len(p) < 4 or len(p) % 2 != 0:
        raise InvalidPolygon(f"text polygon needs an even vertex count >= 4, got {len(p)}")
    if polygon_area(p) <= 1e-9:
        raise InvalidPolygon("zero-area polygon")
    if not is_simple(p):
        raise InvalidPolygon("self-intersecting polygon")
    return p


def validate_quad(q) -> np.ndarray:
    """Check quad invariants: 4 vertices, simple, positive area, clockwise."""
    p = as_points(q)
    if len(p) != 4:
        raise InvalidPolygon(f"quad needs exactly 4 vertices, got {len(p)}")
    if polygon_area(p) <= 1e-9:
        raise InvalidPolygon("zero-area quad")
    if not is_simple(p):
        raise InvalidPolygon("self-intersecting quad")
    if not is_clockwise(p):
        raise InvalidPolygon("quad is not clockwise in image coordinates")
    return p


def canonical_quad(q) -> np.ndarray:
    """Clockwise quad rolled so v[0] minimizes x+y (ties: smaller y)."""
    p = as_points(q)
    if not is_clockwise(p):
        p = p[::-1].copy()
    keys = p[:, 0] + p[:, 1]
    best = np.lexsort((p[:, 1], keys))[0]
    return np.roll(p, -best, axis=0)


def quad_center(q) -> np.ndarray:
    return np.asarray(q, dtype=np.float64).mean(axis=0)


def convex_hull(pts) -> np.ndarray:
    """Monotone-chain convex hull, returned clockwise in image coordinates."""
    p = as_points(pts)
    p = np.unique(p, axis=0)
    if len(p) < 3:
        return p
    order = np.lexsort((p[:, 1], p[:, 0]))
    p = p[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for pt in p:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], pt) <= 1e-12:
            lower.pop()
        lower.append(pt)
    upper = []
    for pt in p[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], pt) <= 1e-12:
            upper.pop()
        upper.append(pt)
    hull = np.array(lower[:-1] + upper[:-1])
    # the monotone chain above is counterclockwise in math coords, which is
    # clockwise with +y down
    if len(hull) >= 3 and not is_clockwise(hull):
        hull = hull[::-1].copy()
    return hull


def min_enclosing_quad(pts) -> np.ndarray:
    """Minimum-area rotated rectangle of the convex hull (rotating calipers).

    Returned as a canonical clockwise quad.  Raises InvalidPolygon for
    degenerate (collinear / zero-area) input.
    """
    p = as_points(pts)
    hull = convex_hull(p)
    if len(hull) < 3:
        raise InvalidPolygon("degenerate polygon: convex hull has fewer than 3 vertices")
    edges = np.roll(hull, -1, axis=0) - hull
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    best_area = np.inf
    best_corners = None
    for i in range(len(hull)):
        if lengths[i] < 1e-12:
            continue
        u = edges[i] / lengths[i]
        v = np.array([-u[1], u[0]])
        pu = hull @ u
        pv = hull @ v
        du = pu.max() - pu.min()
        dv = pv.max() - pv.min()
        area = du * dv
        if area < best_area - 1e-12:
            best_area = area
            lo_u, hi_u = pu.min(), pu.max()
            lo_v, hi_v = pv.min(), pv.max()
            best_corners = np.array(
                [
                    lo_u * u + lo_v * v,
                    hi_u * u + lo_v * v,
                    hi_u * u + hi_v * v,
                    lo_u * u + hi_v * v,
                ]
            )
    if best_corners is None or best_area < 1e-12:
        raise InvalidPolygon("degenerate polygon: zero-area enclosing rectangle")
    return canonical_quad(best_corners)


def points_in_polygon(points, poly) -> np.ndarray:
    """Even-odd inside test for many points at once.

    ``points`` is (m, 2), ``poly`` is (n, 2); returns a boolean (m,) mask.
    Uses the half-open crossing rule so results are deterministic for
    points on horizontal edges.
    """
    pts = np.asarray(points, dtype=np.float64)
    pg = np.asarray(poly, dtype=np.float64)
    x = pts[:, 0][:, None]
    y = pts[:, 1][:, None]
    x1, y1 = pg[:, 0][None, :], pg[:, 1][None, :]
    x2 = np.roll(pg[:, 0], -1)[None, :]
    y2 = np.roll(pg[:, 1], -1)[None, :]
    straddle = (y1 <= y) != (y2 <= y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
    crossing = straddle & (x < xint)
    return (np.count_nonzero(crossing, axis=1) % 2).astype(bool)


def rasterize_polygon(poly, height: int, width: int) -> np.ndarray:
    """Boolean (H, W) mask: pixel (r, c) is set when the lattice point
    (x=c, y=r) lies inside the polygon."""
    pg = np.asarray(poly, dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    if len(pg) < 3:
        return mask
    c0 = max(int(np.floor(pg[:, 0].min())), 0)
    c1 = min(int(np.ceil(pg[:, 0].max())) + 1, width)
    r0 = max(int(np.floor(pg[:, 1].min())), 0)
    r1 = min(int(np.ceil(pg[:, 1].max())) + 1, height)
    if c0 >= c1 or r0 >= r1:
        return mask
    cs, rs = np.meshgrid(np.arange(c0, c1), np.arange(r0, r1))
    pts = np.stack([cs.ravel(), rs.ravel()], axis=1).astype(np.float64)
    inside = points_in_polygon(pts, pg).reshape(rs.shape)
    mask[r0:r1, c0:c1] = inside
    return mask


def polygon_bounds(poly) -> tuple[float, float, float, float]:
    p = np.asarray(poly, dtype=np.float64)
    return float(p[:, 0].min()), float(p[:, 1].min()), float(p[:, 0].max()), float(p[:, 1].max())


def polygon_iou(a, b, scale: float = 4.0) -> float:
    """Rasterized IoU of two (possibly concave) polygons.

    Both polygons are sampled on a shared grid of ``scale`` samples per pixel
    over their joint bounding box; at the default scale the error is ~1%.
    A zero-area union yields 0.0.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    pa = np.asarray(a, dtype=np.float64)
    pb = np.asarray(b, dtype=np.float64)
    ax0, ay0, ax1, ay1 = polygon_bounds(pa)
    bx0, by0, bx1, by1 = polygon_bounds(pb)
    # disjoint boxes cannot overlap; sample each alone for the union
    x0, y0 = min(ax0, bx0), min(ay0, by0)
    x1, y1 = max(ax1, bx1), max(ay1, by1)
    nx = max(int(np.ceil((x1 - x0) * scale)), 1)
    ny = max(int(np.ceil((y1 - y0) * scale)), 1)
    xs = x0 + (np.arange(nx) + 0.5) / scale
    ys = y0 + (np.arange(ny) + 0.5) / scale
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    in_a = points_in_polygon(pts, pa)
    in_b = points_in_polygon(pts, pb)
    inter = np.count_nonzero(in_a & in_b)
    union = np.count_nonzero(in_a | in_b)
    if union == 0:
        return 0.0
    return float(inter) / float(union)


def decompose_to_quads(poly) -> np.ndarray:
    """Split a 2k-vertex chain polygon into its k-1 constituent quads.

    Quad i is (top[i], top[i+1], bottom_rev[i+1], bottom_rev[i]) where
    bottom_rev is the bottom chain reversed to run left to right.  Chain
    order is preserved (not canonicalized) because the upper/lower edge
    roles carry meaning downstream.
    """
    p = as_points(poly)
    n = len(p)
    if n < 4 or n % 2 != 0:
        raise InvalidPolygon(f"chain polygon needs an even vertex count >= 4, got {n}")
    k = n // 2
    top = p[:k]
    bottom_rev = p[k:][::-1]
    quads = np.empty((k - 1, 4, 2), dtype=np.float64)
    for i in range(k - 1):
        quads[i, 0] = top[i]
        quads[i, 1] = top[i + 1]
        quads[i, 2] = bottom_rev[i + 1]
        quads[i, 3] = bottom_rev[i]
    return quads


# ---------------------------------------------------------------------------
# Exact convex-quad overlap (used by NMS; rasterized IoU stays the general
# route for arbitrary polygons).
# ---------------------------------------------------------------------------


def quads_convex_clockwise(quads, min_area: float = 0.0) -> np.ndarray:
    """Mask of quads that are convex, clockwise and above the area floor.

    ``quads`` is (K, 4, 2).
    """
    q = np.asarray(quads, dtype=np.float64)
    e = np.roll(q, -1, axis=1) - q
    nxt = np.roll(e, -1, axis=1)
    cross = e[:, :, 0] * nxt[:, :, 1] - e[:, :, 1] * nxt[:, :, 0]
    convex_cw = np.all(cross >= -1e-9, axis=1)
    x, y = q[:, :, 0], q[:, :, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1, axis=1) - np.roll(x, -1, axis=1) * y, axis=1)
    return convex_cw & (area >= max(min_area, 1e-12))


def quad_iou_many(quad, quads) -> np.ndarray:
    """Exact IoU of one convex clockwise quad against (K, 4, 2) convex quads.

    Sutherland-Hodgman half-plane clipping vectorized over K; after four
    clips the intersections have at most 8 vertices.
    """
    clip = np.asarray(quad, dtype=np.float64)
    subj = np.asarray(quads, dtype=np.float64)
    k = subj.shape[0]
    if k == 0:
        return np.zeros(0, dtype=np.float64)
    maxv = 9
    polys = np.zeros((k, maxv, 2), dtype=np.float64)
    polys[:, :4] = subj
    counts = np.full(k, 4, dtype=np.int64)
    for i in range(4):
        a = clip[i]
        b = clip[(i + 1) % 4]
        polys, counts = _clip_half_plane(polys, counts, a, b)
        if not np.any(counts >= 3):
            break
    inter = _areas_padded(polys, counts)
    area_clip = abs(signed_area(clip))
    areas_subj = np.abs(
        0.5
        * np.sum(
            subj[:, :, 0] * np.roll(subj[:, :, 1], -1, axis=1)
            - np.roll(subj[:, :, 0], -1, axis=1) * subj[:, :, 1],
            axis=1,
        )
    )
    union = area_clip + areas_subj - inter
    out = np.zeros(k, dtype=np.float64)
    pos = union > 1e-12
    out[pos] = inter[pos] / union[pos]
    return np.clip(out, 0.0, 1.0)


def quad_iou(a, b) -> float:
    return float(quad_iou_many(a, np.asarray(b, dtype=np.float64)[None])[0])


def _clip_half_plane(polys, counts, a, b):
    """Clip padded polygons by the half-plane right of directed edge a->b.

    Interior for clockwise rings in image coordinates satisfies
    cross(b-a, p-a) >= 0.
    """
    k, maxv, _ = polys.shape
    d = b - a
    idx = np.arange(maxv)
    valid = idx[None, :] < counts[:, None]
    safe = np.maximum(counts, 1)
    nxt_idx = (idx[None, :] + 1) % safe[:, None]
    rows = np.arange(k)[:, None]
    cur = polys
    nxt = polys[rows, nxt_idx]
    f_cur = d[0] * (cur[:, :, 1] - a[1]) - d[1] * (cur[:, :, 0] - a[0])
    f_nxt = d[0] * (nxt[:, :, 1] - a[1]) - d[1] * (nxt[:, :, 0] - a[0])
    cur_in = (f_cur >= -1e-12) & valid
    nxt_in = (f_nxt >= -1e-12) & valid
    crossing = (cur_in != nxt_in) & valid
    denom = f_cur - f_nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-300, f_cur / denom, 0.0)
    isect = cur + t[:, :, None] * (nxt - cur)

    emit = cur_in.astype(np.int64) + crossing.astype(np.int64)
    offsets = np.cumsum(emit, axis=1) - emit
    new_counts = emit.sum(axis=1)
    out = np.zeros_like(polys)
    rr, cc = np.nonzero(cur_in)
    out[rr, offsets[rr, cc]] = cur[rr, cc]
    rr, cc = np.nonzero(crossing)
    out[rr, offsets[rr, cc] + cur_in[rr, cc]] = isect[rr, cc]
    return out, new_counts


def _areas_padded(polys, counts) -> np.ndarray:
    k, maxv, _ = polys.shape
    idx = np.arange(maxv)
    valid = idx[None, :] < counts[:, None]
    safe = np.maximum(counts, 1)
    nxt_idx = (idx[None, :] + 1) % safe[:, None]
    rows = np.arange(k)[:, None]
    x, y = polys[:, :, 0], polys[:, :, 1]
    xn = polys[rows, nxt_idx, 0]
    yn = polys[rows, nxt_idx, 1]
    terms = np.where(valid, x * yn - xn * y, 0.0)
    area = 0.5 * np.abs(terms.sum(axis=1))
    area[counts < 3] = 0.0
    return area


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------


def points_to_polyline_distance(points, chain) -> np.ndarray:
    """Per-point distance to an open polyline (m points vs n-1 segments)."""
    pts = np.asarray(points, dtype=np.float64)
    ch = np.asarray(chain, dtype=np.float64)
    s = ch[:-1][None, :, :]
    e = ch[1:][None, :, :]
    d = e - s
    seg_len2 = np.maximum((d * d).sum(axis=2), 1e-300)
    t = ((pts[:, None, :] - s) * d).sum(axis=2) / seg_len2
    t = np.clip(t, 0.0, 1.0)
    proj = s + t[:, :, None] * d
    dist = np.linalg.norm(pts[:, None, :] - proj, axis=2)
    return dist.min(axis=1)


def polygon_min_distance(a, b) -> float:
    """Minimum distance between two polygon boundaries (0 if they overlap)."""
    pa = as_points(a)
    pb = as_points(b)
    if points_in_polygon(pa, pb).any() or points_in_polygon(pb, pa).any():
        return 0.0
    na, nb = len(pa), len(pb)
    for i in range(na):
        for j in range(nb):
            if _segments_intersect(pa[i], pa[(i + 1) % na], pb[j], pb[(j + 1) % nb]):
                return 0.0
    ring_a = np.vstack([pa, pa[:1]])
    ring_b = np.vstack([pb, pb[:1]])
    d1 = points_to_polyline_distance(pa, ring_b).min()
    d2 = points_to_polyline_distance(pb, ring_a).min()
    return float(min(d1, d2))


# ---------------------------------------------------------------------------
# Annotation text I/O (ICDAR-style): x1,y1,...,xn,yn,transcription per line
# ---------------------------------------------------------------------------


def parse_annotation_line(line: str) -> Annotation:
    parts = line.rstrip("\n").split(",")
    coords: list[float] = []
    i = 0
    while i + 1 < len(parts):
        try:
            x = float(parts[i])
            y = float(parts[i + 1])
        except ValueError:
            break
        coords.extend((x, y))
        i += 2
    if len(coords) < 8:
        raise InvalidPolygon(f"annotation line has fewer than 4 points: {line!r}")
    transcription = ",".join(parts[i:])
    poly = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return Annotation(polygon=poly, transcription=transcription)


def read_annotations(path) -> list[Annotation]:
    anns = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                anns.append(parse_annotation_line(line))
    return anns


def write_annotations(path, anns) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in anns:
            coords = ",".join(f"{v:.3f}" for v in np.asarray(ann.polygon).reshape(-1))
            fh.write(f"{coords},{ann.transcription}\n")
