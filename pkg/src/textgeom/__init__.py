"""Geometry engine for single-shot arbitrarily-shaped text detection.

Label-map generation, detection post-processing (quad restoration, NMS,
point-to-quad assignment, polygon reconstruction), criss-cross attention
numerics with verified gradients, the multi-task loss, ICDAR-style
evaluation and a synthetic-scene oracle.
"""

from .attention import CabWeights, cab_backward, cab_forward, cab_stack2
from .errors import (
    DegenerateInstance,
    InvalidPolygon,
    NumericError,
    OutOfRegion,
    SceneInfeasible,
    ShapeError,
    TextGeomError,
)
from .evaluation import EvalResult, aggregate, evaluate
from .geometry import (
    Annotation,
    decompose_to_quads,
    min_enclosing_quad,
    polygon_area,
    polygon_iou,
    read_annotations,
    write_annotations,
)
from .labels import BorderOffsetPair, MapBundle, gen_bundle, gen_tbo_for_quad, load_bundle, save_bundle, shrink_to_tcl
from .losses import LossBreakdown, LossWeights, dice_loss, smooth_l1, total_loss
from .postprocess import (
    DetectConfig,
    DetectedText,
    QuadCandidate,
    TextInstance,
    binarize_tcl,
    connected_components,
    detect,
    nms,
    point_to_quad_assign,
    propose_quads,
    reconstruct_polygon,
)
from .synth import CorruptionSpec, SceneSpec, corrupt, gen_scene, render_perfect_bundle
from .tensorops import GradCheckReport, conv1x1, grad_check, matmul, sigmoid, smap_read, smap_write

__version__ = "0.1.0"
