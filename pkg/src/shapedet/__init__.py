"""Multi-anatomy detection and dense shape correspondence prediction on 3D volumes.

The pipeline detects each anatomy with a strided center-heatmap decoder,
regresses image-space ("local") correspondence points as bounded
displacements from a template, and maps them into a population ("world")
frame through a differentiable rigid alignment.
"""

__version__ = "0.1.0"

from .geometry import (
    CorrespondenceSet,
    Frame,
    RigidTransform,
    TemplateShape,
    TriangleMesh,
    apply_transform,
    center_at,
    procrustes_align,
    procrustes_backward,
    select_medoid,
    template_from_cohort,
)
from .detection import (
    BoundingBox,
    DetectionMaps,
    decode_center,
    extract_detections,
    render_ground_truth,
)
from .backbone import Backbone, DetectionHeadSet, FeaturePyramid, RoiFeature, roi_pool
from .heads import (
    LocalHead,
    local_loss,
    predict_local,
    predict_world,
    world_loss,
)
from .metrics import (
    EvalReport,
    evaluate,
    reconstruct_mesh,
    rmse,
    rmse_points,
    surface_to_surface,
)
from .model import Model, ModelConfig, infer_sample, load_model_checkpoint
from .synth import (
    SyntheticSpec,
    default_spec,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .train import (
    TrainConfig,
    fit,
    learning_rate_at,
    prepare_resume,
    schedule_at,
)
from .report import write_report

__all__ = [
    "Backbone",
    "BoundingBox",
    "CorrespondenceSet",
    "DetectionHeadSet",
    "DetectionMaps",
    "EvalReport",
    "FeaturePyramid",
    "Frame",
    "LocalHead",
    "Model",
    "ModelConfig",
    "RigidTransform",
    "RoiFeature",
    "SyntheticSpec",
    "TemplateShape",
    "TrainConfig",
    "TriangleMesh",
    "apply_transform",
    "center_at",
    "decode_center",
    "default_spec",
    "evaluate",
    "extract_detections",
    "fit",
    "generate_dataset",
    "infer_sample",
    "learning_rate_at",
    "load_model_checkpoint",
    "local_loss",
    "predict_local",
    "predict_world",
    "procrustes_align",
    "procrustes_backward",
    "read_dataset",
    "reconstruct_mesh",
    "render_ground_truth",
    "rmse",
    "rmse_points",
    "roi_pool",
    "schedule_at",
    "select_medoid",
    "surface_to_surface",
    "template_from_cohort",
    "train",
    "write_dataset",
    "write_report",
    "__version__",
]
