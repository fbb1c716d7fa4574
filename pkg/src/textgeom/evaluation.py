"""Detection evaluation: one-to-one IoU matching with don't-care handling.

Detections overlapping a don't-care region beyond the threshold are removed
from consideration first; the remaining detections are greedily matched to
the care ground truths in descending IoU order.  Precision and recall come
from the matched counts; Hmean is their harmonic mean.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    hmean: float
    matches: list[tuple[int, int, float]] = field(default_factory=list)
    n_dets: int = 0
    n_gts: int = 0

    @property
    def true_positives(self) -> int:
        return len(self.matches)


def _hmean(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _bbox_overlaps(a, b) -> bool:
    ax0, ay0, ax1, ay1 = geo.polygon_bounds(a)
    bx0, by0, bx1, by1 = geo.polygon_bounds(b)
    return ax0 <= bx1 and ax1 >= bx0 and ay0 <= by1 and ay1 >= by0


def evaluate(
    dets,
    gts,
    iou_thresh: float = 0.5,
    dontcare_mode: str = "iou",
    iou_scale: float = 4.0,
) -> EvalResult:
    """Score one image.

    ``dets`` are DetectedText (or anything with .polygon), ``gts`` are
    Annotations.  ``dontcare_mode`` selects the suppression measure for
    don't-care regions: "iou" (default) or "iod" (intersection over
    detection area), since benchmark scripts differ.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError("iou_thresh must be in (0, 1)")
    if dontcare_mode not in ("iou", "iod"):
        raise ValueError(f"unknown dontcare_mode {dontcare_mode!r}")
    det_polys = [np.asarray(d.polygon, dtype=np.float64) for d in dets]
    care = [g for g in gts if not g.dont_care]
    dont_care = [g for g in gts if g.dont_care]

    considered = []
    for di, dp in enumerate(det_polys):
        absorbed = False
        for g in dont_care:
            if not _bbox_overlaps(dp, g.polygon):
                continue
            if dontcare_mode == "iou":
                measure = geo.polygon_iou(dp, g.polygon, scale=iou_scale)
            else:
                inter = geo.polygon_iou(dp, g.polygon, scale=iou_scale)
                # recover intersection-over-detection from IoU via areas
                a_d = geo.polygon_area(dp)
                a_g = geo.polygon_area(g.polygon)
                inter_area = inter * (a_d + a_g) / (1.0 + inter) if inter > 0 else 0.0
                measure = inter_area / a_d if a_d > 0 else 0.0
            if measure > iou_thresh:
                absorbed = True
                break
        if not absorbed:
            considered.append(di)

    pairs = []
    for di in considered:
        for gi, g in enumerate(care):
            if not _bbox_overlaps(det_polys[di], g.polygon):
                continue
            iou = geo.polygon_iou(det_polys[di], g.polygon, scale=iou_scale)
            if iou >= iou_thresh:
                pairs.append((iou, di, gi))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    matched_d: set[int] = set()
    matched_g: set[int] = set()
    matches = []
    for iou, di, gi in pairs:
        if di in matched_d or gi in matched_g:
            continue
        matched_d.add(di)
        matched_g.add(gi)
        matches.append((di, gi, float(iou)))

    n_dets = len(considered)
    n_gts = len(care)
    tp = len(matches)
    if n_dets == 0 and n_gts == 0:
        precision = recall = 1.0
    else:
        precision = tp / n_dets if n_dets else 0.0
        recall = tp / n_gts if n_gts else 0.0
    return EvalResult(
        precision=precision,
        recall=recall,
        hmean=_hmean(precision, recall),
        matches=matches,
        n_dets=n_dets,
        n_gts=n_gts,
    )


def aggregate(results: list[EvalResult]) -> EvalResult:
    """Micro-average over images: sum TP / detection / ground-truth counts."""
    tp = sum(r.true_positives for r in results)
    n_dets = sum(r.n_dets for r in results)
    n_gts = sum(r.n_gts for r in results)
    if n_dets == 0 and n_gts == 0:
        p = r = 1.0
    else:
        p = tp / n_dets if n_dets else 0.0
        r = tp / n_gts if n_gts else 0.0
    return EvalResult(precision=p, recall=r, hmean=_hmean(p, r), matches=[], n_dets=n_dets, n_gts=n_gts)
