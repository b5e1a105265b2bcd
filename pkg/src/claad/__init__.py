"""Contrastive-learning auditory attention decoding from EEG."""

__version__ = "0.1.0"

from .sigproc import (
    Waveform,
    MultiChannelRecording,
    FilterSpec,
    EnvelopeConfig,
    bandpass_filter,
    resample,
    rereference,
    gammatone_envelope,
)
from .csp import CspModel, LabeledEpoch, csp_fit, csp_transform

__all__ = [
    "Waveform",
    "MultiChannelRecording",
    "FilterSpec",
    "EnvelopeConfig",
    "bandpass_filter",
    "resample",
    "rereference",
    "gammatone_envelope",
    "CspModel",
    "LabeledEpoch",
    "csp_fit",
    "csp_transform",
]
