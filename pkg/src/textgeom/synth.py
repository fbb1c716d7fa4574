"""Synthetic scenes and corruption models.

Scenes are deterministic functions of their spec: rotated-rectangle words
and sine-bent 14-vertex ribbons placed without overlap, optionally with
word pairs lying a couple of pixels apart.  Corruptions reproduce the two
classic segmentation failure modes (instance fragmentation, adjacent
instances bleeding together) plus Gaussian map noise, so the pipeline can
be exercised without a trained network.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry as geo
from .errors import SceneInfeasible
from .geometry import Annotation
from .labels import MapBundle, gen_bundle, save_bundle
from .postprocess import connected_components

_CHAIN_SAMPLES = 7  # 14-vertex ribbons
_MAX_TRIES = 300
_BORDER_MARGIN = 4.0
_MAX_QUAD_OVERLAP = 0.05


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    canvas: tuple[int, int] = (512, 512)  # (H, W) input px
    n_instances: int = 5
    kind: str = "quad"  # "quad" | "curved" | "mixed"
    min_gap: float = 10.0
    curvature: float = 0.15  # bend amplitude as a fraction of height
    adjacent_pairs: int = 0
    pair_gap: float = 2.0
    min_aspect: float = 2.0

    def __post_init__(self):
        if self.kind not in ("quad", "curved", "mixed"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.min_gap < 0 or self.curvature < 0 or self.pair_gap <= 0:
            raise ValueError("min_gap/curvature must be >= 0 and pair_gap > 0")
        if self.min_aspect < 2.0:
            raise ValueError("min_aspect must be >= 2")


@dataclass(frozen=True)
class CorruptionSpec:
    tcl_noise_sigma: float = 0.0
    offset_noise_sigma: float = 0.0
    n_fragments: int = 0
    fragment_gap: float = 0.0  # map px
    bridge_max_dist: float = 0.0  # map px; 0 disables adjacency bridging

    def __post_init__(self):
        vals = (
            self.tcl_noise_sigma,
            self.offset_noise_sigma,
            self.n_fragments,
            self.fragment_gap,
            self.bridge_max_dist,
        )
        if min(vals) < 0:
            raise ValueError("corruption parameters must be non-negative")


def _rot(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _make_quad(length: float, height: float, angle: float) -> np.ndarray:
    base = np.array(
        [
            [-length / 2, -height / 2],
            [length / 2, -height / 2],
            [length / 2, height / 2],
            [-length / 2, height / 2],
        ]
    )
    return base @ _rot(angle).T


def _make_ribbon(length: float, height: float, angle: float, curvature: float, phase: float) -> np.ndarray:
    # half-period bend with amplitude scaled by height keeps the ribbon
    # reconstructible at the adaptive sample count n ~ length/height
    s = np.linspace(0.0, 1.0, _CHAIN_SAMPLES)
    amp = curvature * height
    cx = (s - 0.5) * length
    cy = amp * np.sin(np.pi * s + phase)
    center = np.stack([cx, cy], axis=1)
    top = center + np.array([0.0, -height / 2])
    bottom = center + np.array([0.0, height / 2])
    pts = np.vstack([top, bottom[::-1]])
    return pts @ _rot(angle).T


def _sample_instance(rng, spec: SceneSpec, kind: str, for_pair: bool = False):
    max_len = 0.85 * min(spec.canvas)
    if for_pair:
        # pairs stay short enough to fit twice and flat enough that the
        # shrunk TCLs remain within bridging reach of the pair gap
        height = rng.uniform(16.0, 32.0)
        lo_aspect = max(4.0, spec.min_aspect)
        hi_aspect = min(8.0, (max_len - spec.pair_gap) / (2.0 * height))
    elif kind == "curved":
        lo_aspect = max(4.0, spec.min_aspect)
        height = rng.uniform(16.0, min(48.0, max_len / lo_aspect))
        hi_aspect = min(10.0, max_len / height)
    else:
        lo_aspect = spec.min_aspect
        height = rng.uniform(16.0, min(64.0, max_len / lo_aspect))
        hi_aspect = min(12.0, max_len / height)
    aspect = rng.uniform(lo_aspect, max(hi_aspect, lo_aspect + 1e-6))
    length = height * aspect
    angle = rng.uniform(0.0, np.pi)
    if kind == "curved":
        phase = rng.uniform(0.0, np.pi)
        poly = _make_ribbon(length, height, angle, spec.curvature, phase)
    else:
        poly = _make_quad(length, height, angle)
    return poly, length, angle


def _place(rng, poly: np.ndarray, spec: SceneSpec):
    h, w = spec.canvas
    x0, y0, x1, y1 = geo.polygon_bounds(poly)
    bw, bh = x1 - x0, y1 - y0
    if bw > w - 2 * _BORDER_MARGIN or bh > h - 2 * _BORDER_MARGIN:
        return None
    cx = rng.uniform(_BORDER_MARGIN + bw / 2, w - _BORDER_MARGIN - bw / 2)
    cy = rng.uniform(_BORDER_MARGIN + bh / 2, h - _BORDER_MARGIN - bh / 2)
    shift = np.array([cx - (x0 + x1) / 2, cy - (y0 + y1) / 2])
    return poly + shift


def _fits(poly: np.ndarray, placed: list[np.ndarray], quads: list[np.ndarray], min_gap: float) -> bool:
    try:
        quad = geo.min_enclosing_quad(poly)
    except Exception:
        return False
    for other_poly, other_quad in zip(placed, quads):
        if geo.polygon_min_distance(poly, other_poly) < min_gap:
            return False
        if geo.quad_iou(quad, other_quad) > _MAX_QUAD_OVERLAP:
            return False
    return True


def gen_scene(spec: SceneSpec, strict: bool = False) -> list[Annotation]:
    """Deterministic annotation list for one scene.

    Places ``n_instances`` single instances plus ``adjacent_pairs`` word
    pairs separated by ``pair_gap`` px along their run direction.  When the
    canvas cannot host everything, the partial scene is returned with a
    warning (or raised inside SceneInfeasible when ``strict``).
    """
    rng = np.random.default_rng(spec.seed)
    placed: list[np.ndarray] = []
    quads: list[np.ndarray] = []

    def commit(poly):
        placed.append(poly)
        quads.append(geo.min_enclosing_quad(poly))

    for i in range(spec.n_instances):
        if spec.kind == "mixed":
            kind = str(rng.choice(["quad", "curved"]))
        else:
            kind = spec.kind
        done = False
        for _ in range(_MAX_TRIES):
            poly, _, _ = _sample_instance(rng, spec, kind)
            poly = _place(rng, poly, spec)
            if poly is None:
                continue
            if _fits(poly, placed, quads, spec.min_gap):
                commit(poly)
                done = True
                break
        if not done:
            break

    for _ in range(spec.adjacent_pairs):
        done = False
        for _ in range(_MAX_TRIES):
            poly, length, angle = _sample_instance(rng, spec, "quad", for_pair=True)
            run = np.array([np.cos(angle), np.sin(angle)])
            poly = _place(rng, poly, spec)
            if poly is None:
                continue
            second = poly + run * (length + spec.pair_gap)
            sx0, sy0, sx1, sy1 = geo.polygon_bounds(second)
            h, w = spec.canvas
            if sx0 < _BORDER_MARGIN or sy0 < _BORDER_MARGIN:
                continue
            if sx1 > w - _BORDER_MARGIN or sy1 > h - _BORDER_MARGIN:
                continue
            if not _fits(poly, placed, quads, spec.min_gap):
                continue
            commit(poly)
            if _fits(second, placed[:-1], quads[:-1], spec.min_gap):
                commit(second)
                done = True
                break
            placed.pop()
            quads.pop()
        if not done:
            break

    anns = [Annotation(polygon=p, transcription=f"T{i}") for i, p in enumerate(placed)]
    wanted = spec.n_instances + 2 * spec.adjacent_pairs
    if len(anns) < wanted:
        msg = f"placed {len(anns)}/{wanted} instances for seed {spec.seed}"
        if strict:
            raise SceneInfeasible(msg, partial=anns)
        warnings.warn(msg)
    return anns


def render_perfect_bundle(anns, spec: SceneSpec, stride: int = 4, shrink_ratio: float = 0.3) -> MapBundle:
    """Ground-truth maps for a generated scene (round-trip oracle input)."""
    h, w = spec.canvas
    return gen_bundle(anns, h, w, stride=stride, r=shrink_ratio)


def corrupt(bundle: MapBundle, c: CorruptionSpec, seed: int = 0) -> MapBundle:
    """Apply adjacency bridging, fragmentation and Gaussian noise.

    Stages run in that order, each against the pristine instance clusters,
    so bridges join instances while fragment gaps still split them.  A
    zero spec returns a bitwise-identical copy.
    """
    out = bundle.copy()
    tcl2d = out.tcl[:, :, 0]
    pristine = connected_components(tcl2d > 0.5)

    if c.bridge_max_dist > 0 and len(pristine) > 1:
        for i in range(len(pristine)):
            for j in range(i + 1, len(pristine)):
                a, b = pristine[i], pristine[j]
                d2 = (
                    (a[:, None, 0] - b[None, :, 0]) ** 2
                    + (a[:, None, 1] - b[None, :, 1]) ** 2
                )
                flat = np.argmin(d2)
                ai, bj = np.unravel_index(flat, d2.shape)
                if np.sqrt(d2[ai, bj]) > c.bridge_max_dist:
                    continue
                pa, pb = a[ai].astype(np.float64), b[bj].astype(np.float64)
                steps = max(int(np.ceil(np.linalg.norm(pb - pa))) * 2, 2)
                line = pa[None, :] + np.linspace(0, 1, steps)[:, None] * (pb - pa)[None, :]
                rr = np.clip(np.rint(line[:, 0]).astype(int), 0, out.tcl.shape[0] - 1)
                cc = np.clip(np.rint(line[:, 1]).astype(int), 0, out.tcl.shape[1] - 1)
                tcl2d[rr, cc] = 1.0

    if c.n_fragments > 1 and c.fragment_gap > 0:
        for pix in pristine:
            if len(pix) < 3:
                continue
            pts = np.stack([pix[:, 1], pix[:, 0]], axis=1).astype(np.float64)
            corners = np.concatenate(
                [pts + np.array([dx, dy]) for dx in (-0.5, 0.5) for dy in (-0.5, 0.5)]
            )
            quad = geo.min_enclosing_quad(corners)
            edges = np.roll(quad, -1, axis=0) - quad
            direction = edges[np.argmax(np.linalg.norm(edges, axis=1))]
            direction = direction / max(np.linalg.norm(direction), 1e-12)
            proj = pts @ direction
            pmin, pmax = proj.min(), proj.max()
            for f in range(1, c.n_fragments):
                cut = pmin + (pmax - pmin) * f / c.n_fragments
                gap = np.abs(proj - cut) <= c.fragment_gap / 2.0
                tcl2d[pix[gap, 0], pix[gap, 1]] = 0.0

    if c.tcl_noise_sigma > 0 or c.offset_noise_sigma > 0:
        rng = np.random.default_rng(seed)
        if c.tcl_noise_sigma > 0:
            noise = rng.normal(0.0, c.tcl_noise_sigma, size=out.tcl.shape)
            out.tcl = np.clip(out.tcl + noise.astype(np.float32), 0.0, 1.0).astype(np.float32)
        if c.offset_noise_sigma > 0:
            for name in ("tco", "tvo", "tbo"):
                arr = getattr(out, name)
                noise = rng.normal(0.0, c.offset_noise_sigma, size=arr.shape)
                setattr(out, name, (arr + noise.astype(np.float32)).astype(np.float32))
    return out


# ---------------------------------------------------------------------------
# Scene corpus on disk (used by the CLI): per-scene annotation file + bundle
# directory + top-level manifest.json
# ---------------------------------------------------------------------------


def write_scene(out_dir, anns, spec: SceneSpec, stride: int = 4, shrink_ratio: float = 0.3) -> MapBundle:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    geo.write_annotations(out / "gt.txt", anns)
    bundle = render_perfect_bundle(anns, spec, stride=stride, shrink_ratio=shrink_ratio)
    h, w = spec.canvas
    save_bundle(bundle, out / "maps", height=h, width=w, shrink_ratio=shrink_ratio)
    return bundle


def write_corpus(out_dir, specs: list[SceneSpec], stride: int = 4, shrink_ratio: float = 0.3) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, spec in enumerate(specs):
        name = f"scene_{i:04d}"
        anns = gen_scene(spec)
        write_scene(out / name, anns, spec, stride=stride, shrink_ratio=shrink_ratio)
        entries.append(
            {
                "name": name,
                "seed": spec.seed,
                "kind": spec.kind,
                "n_instances": len(anns),
                "canvas": list(spec.canvas),
            }
        )
    manifest = {"scenes": entries, "stride": stride, "shrink_ratio": shrink_ratio}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
