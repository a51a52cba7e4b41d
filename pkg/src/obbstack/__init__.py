"""Stacking ensemble for oriented-bounding-box object detections.

Detections from several models are clustered per image and category, a
logistic-regression meta-learner is fit on a validation split, and each
cluster is fused into one calibrated oriented box. NMS and WBF baselines,
a VOC-style mAP evaluator, and a synthetic detector simulator round out
the toolkit.
"""

from .clustering import Cluster, build_feature_vector, cluster_detections
from .errors import (
    CalibrationError,
    ConfigError,
    ContractError,
    ConvergenceWarning,
    DataError,
    DegenerateDataError,
    InvalidGeometryError,
    NumericalError,
    ObbStackError,
    ParseError,
    SchemaError,
)
from .evaluation import EvalResult, average_precision, evaluate, match_detections
from .fusion import (
    FusedDetection,
    apply_score_floor,
    calibrated_score,
    ensemble_nms,
    ensemble_stacking,
    ensemble_wbf,
    fuse_cluster,
    fuse_geometry,
    fuse_orientation,
)
from .geometry import (
    OBB,
    canonicalize,
    corners_to_obb,
    intersection_area,
    iou,
    obb_to_corners,
    reduce_mod_pi,
    relative_angle,
)
from .ingest import (
    Detection,
    DetectionRun,
    GroundTruth,
    GroundTruthObject,
    group_all,
    parse_dota_detections,
    parse_ground_truth,
    read_run_json,
    write_dota_detections,
    write_dota_ground_truth,
    write_run_json,
)
from .metalearner import (
    CalibrationParams,
    LabeledCluster,
    MetaLearner,
    decompose_weights,
    fit,
    fit_temperature,
    label_clusters,
    nll,
    read_meta_json,
    score_correlation,
    sigma_wa,
    write_meta_json,
)
from .synth import (
    DetectorProfile,
    ScenarioConfig,
    SyntheticScene,
    generate_scenes,
    run_benchmark,
    simulate_detector,
    simulate_scene,
)

__version__ = "0.1.0"
