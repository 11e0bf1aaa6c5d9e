"""Diffusion-based radiotherapy dose prediction with inter-slice aware
structure encoding, a synthetic phantom oracle, and a clinical metric suite."""

from .attention import InterSliceBlock, MultiHeadSliceAttention, SliceAttentionHead
from .config import ExperimentConfig, desk_profile, paper_profile
from .diffusion import analytic_denoise, forward_sample, reverse_step, sample
from .encoder import StructureEncoder
from .loss import build_weight_map, weighted_noise_loss
from .metrics import (
    DVHCurve,
    MetricReport,
    ape,
    ci,
    dose_at_volume,
    dose_score,
    dvh,
    hi,
    volume_at_dose,
)
from .phantom import PhantomParams, generate_phantom
from .predictor import NoisePredictor
from .schedule import NoiseSchedule, make_cosine_schedule, subsample_schedule
from .volume import (
    PatientVolume,
    SliceBatch,
    denormalize_dose,
    normalize_ct,
    normalize_dose,
    read_volume,
    slice_volume,
    write_volume,
)

__all__ = [
    "InterSliceBlock",
    "MultiHeadSliceAttention",
    "SliceAttentionHead",
    "ExperimentConfig",
    "desk_profile",
    "paper_profile",
    "analytic_denoise",
    "forward_sample",
    "reverse_step",
    "sample",
    "StructureEncoder",
    "build_weight_map",
    "weighted_noise_loss",
    "DVHCurve",
    "MetricReport",
    "ape",
    "ci",
    "dose_at_volume",
    "dose_score",
    "dvh",
    "hi",
    "volume_at_dose",
    "PhantomParams",
    "generate_phantom",
    "NoisePredictor",
    "NoiseSchedule",
    "make_cosine_schedule",
    "subsample_schedule",
    "PatientVolume",
    "SliceBatch",
    "denormalize_dose",
    "normalize_ct",
    "normalize_dose",
    "read_volume",
    "slice_volume",
    "write_volume",
]

__version__ = "0.1.0"
