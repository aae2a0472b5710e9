"""Gaussian-state simulation, retrodiction and inference for stiffness-pulse
delocalization of a levitated nanoparticle."""

__version__ = "0.1.0"

from .dynamics import (  # noqa: E402
    GaussianState,
    PulseProtocol,
    PulseSegment,
    coherence_length,
    evolve_segment,
    hold,
    loop_protocol,
    one_pulse,
    predict_recompression_energy,
    predict_two_pulse,
    purity,
    run_protocol,
    squeezing_db,
    stray_noise,
    thermal_state,
    two_pulse,
)
from .params import PhysicalParams  # noqa: E402

__all__ = [
    "GaussianState",
    "PhysicalParams",
    "PulseProtocol",
    "PulseSegment",
    "coherence_length",
    "evolve_segment",
    "hold",
    "loop_protocol",
    "one_pulse",
    "predict_recompression_energy",
    "predict_two_pulse",
    "purity",
    "run_protocol",
    "squeezing_db",
    "stray_noise",
    "thermal_state",
    "two_pulse",
]
