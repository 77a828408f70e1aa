"""Black-box label calibration for segmentation probability maps.

Builds confidence-weighted soft-label prototypes from unlabeled model
outputs in a single streaming pass and re-predicts each pixel as the class
of the Euclidean-nearest prototype.
"""

__version__ = "0.1.0"

from .core import (
    PredictionMap,
    ProbMap,
    PrototypeAccumulator,
    PrototypeSet,
    accumulate,
    argmax_class,
    calibrated_class,
    confidence_weight,
    finalize,
    merge,
    predict_map,
)
from .errors import DimensionError, FormatError, ValidationError
from .evaluation import (
    ConfusionMatrix,
    EvalReport,
    build_report,
    compare_reports,
    iou,
    miou,
    update_confusion,
)
from .labelspace import LabelSpace
from .shiftsim import (
    ExperimentReport,
    SceneSpec,
    ShiftModel,
    apply_shift,
    confusion_mixing,
    gen_scene,
    run_experiment,
)
from .tensorio import (
    DatasetManifest,
    ManifestEntry,
    export_prototypes,
    import_prototypes,
    read_label_map,
    read_prob_map,
    stream_dataset,
    write_label_map,
    write_prob_map,
)

__all__ = [
    "PredictionMap",
    "ProbMap",
    "PrototypeAccumulator",
    "PrototypeSet",
    "accumulate",
    "argmax_class",
    "calibrated_class",
    "confidence_weight",
    "finalize",
    "merge",
    "predict_map",
    "DimensionError",
    "FormatError",
    "ValidationError",
    "ConfusionMatrix",
    "EvalReport",
    "build_report",
    "compare_reports",
    "iou",
    "miou",
    "update_confusion",
    "LabelSpace",
    "ExperimentReport",
    "SceneSpec",
    "ShiftModel",
    "apply_shift",
    "confusion_mixing",
    "gen_scene",
    "run_experiment",
    "DatasetManifest",
    "ManifestEntry",
    "export_prototypes",
    "import_prototypes",
    "read_label_map",
    "read_prob_map",
    "stream_dataset",
    "write_label_map",
    "write_prob_map",
]
