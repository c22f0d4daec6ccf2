"""Motion-corrected quantitative T2* mapping toolkit.

Pipeline: multi-echo dynamic series -> MP-PCA denoising -> voxelwise
T2* fitting -> motion QC -> slice-to-volume reconstruction with
deformable refinement and T2* channel propagation -> organ statistics
and growth curves. A digital phantom provides ground-truth data for
end-to-end validation.
"""

from .denoise import MeasurementStack, NoiseMap, mppca_denoise
from .errors import (
    ConfigError,
    ContractViolation,
    GeometryError,
    IntegrityError,
    ParseError,
    ReconstructionError,
    RegressionError,
    ToolkitError,
)
from .grid import (
    GridSpec,
    PsfKernel,
    PsfSpec,
    VoxelGrid,
    ncc,
    psf_weights,
    psnr,
    resample,
    sample_trilinear,
)
from .nifti import read_volume, write_volume
from .phantom import (
    DigitalPhantom,
    MotionScript,
    SimulatedSeries,
    SinusoidDeform,
    make_phantom,
    simulate_acquisition,
)
from .qc import apply_qc, score_dynamics
from .relaxometry import (
    FitSummary,
    MultiEchoDynamic,
    T2StarMap,
    decay_signal,
    fit_voxel,
    map_dynamic,
)
from .stats import (
    ConsistencyResult,
    GrowthCurve,
    LabelMap,
    OrganStats,
    consistency_check,
    dice,
    fit_growth_curve,
    organ_stats,
)
from .svr import ReconConfig, ReconResult, SliceModel, propagate_channel, reconstruct
from .transforms import BSplineField, RigidTransform

__version__ = "0.1.0"

__all__ = [
    "BSplineField",
    "ConfigError",
    "ConsistencyResult",
    "ContractViolation",
    "DigitalPhantom",
    "FitSummary",
    "GeometryError",
    "GridSpec",
    "GrowthCurve",
    "IntegrityError",
    "LabelMap",
    "MeasurementStack",
    "MotionScript",
    "MultiEchoDynamic",
    "NoiseMap",
    "OrganStats",
    "ParseError",
    "PsfKernel",
    "PsfSpec",
    "ReconConfig",
    "ReconResult",
    "ReconstructionError",
    "RegressionError",
    "RigidTransform",
    "SimulatedSeries",
    "SinusoidDeform",
    "SliceModel",
    "T2StarMap",
    "ToolkitError",
    "VoxelGrid",
    "apply_qc",
    "consistency_check",
    "decay_signal",
    "dice",
    "fit_growth_curve",
    "fit_voxel",
    "make_phantom",
    "map_dynamic",
    "mppca_denoise",
    "ncc",
    "organ_stats",
    "propagate_channel",
    "psf_weights",
    "psnr",
    "read_volume",
    "reconstruct",
    "resample",
    "sample_trilinear",
    "score_dynamics",
    "simulate_acquisition",
    "write_volume",
    "__version__",
]
