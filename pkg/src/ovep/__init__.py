"""Overlapping-block expectation propagation (OvEP) for correlated MIMO detection."""

from ovep.channel import ChannelInstance, CorrelationSpec, exp_correlation_matrix, generate_channel, transmit
from ovep.detector import (
    DetectorConfig,
    EpState,
    GaussianMessage,
    PartitionPlan,
    Variant,
    lmmse_baseline,
    make_partition,
    run_ep,
    verify_fixed_point,
)
from ovep.errors import OvepError
from ovep.modem import Constellation, DenoiserOutput, demap_hard, denoise, denoise_qpsk, map_bits

__version__ = "0.1.0"

__all__ = [
    "ChannelInstance",
    "Constellation",
    "CorrelationSpec",
    "DenoiserOutput",
    "DetectorConfig",
    "EpState",
    "GaussianMessage",
    "OvepError",
    "PartitionPlan",
    "Variant",
    "demap_hard",
    "denoise",
    "denoise_qpsk",
    "exp_correlation_matrix",
    "generate_channel",
    "lmmse_baseline",
    "make_partition",
    "map_bits",
    "run_ep",
    "transmit",
    "verify_fixed_point",
]
