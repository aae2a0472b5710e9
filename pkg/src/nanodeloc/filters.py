"""Backward-in-time high-pass conditioning of homodyne records."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import signal


@dataclass(frozen=True)
class FilterSpec:
    """Cascade of Butterworth high-pass stages, run on the reversed record."""

    hp_cutoffs: tuple[float, ...] = (3000.0, 9000.0)
    hp_order: int = 2
    direction: str = "backward"

    def __post_init__(self):
        object.__setattr__(self, "hp_cutoffs", tuple(float(c) for c in self.hp_cutoffs))
        if not self.hp_cutoffs or any(c <= 0 for c in self.hp_cutoffs):
            raise ValueError("cutoffs must be positive")
        if self.hp_order < 1:
            raise ValueError("hp_order must be >= 1")
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"unknown direction {self.direction!r}")

    def validate(self, dt: float):
        nyq = 0.5 / dt
        for c in self.hp_cutoffs:
            if c >= nyq:
                raise ValueError(f"cutoff {c} Hz is not below the Nyquist frequency {nyq} Hz")

    def warmup(self) -> float:
        """Seconds at the start of the filtered (reversed) record to discard."""
        return 10.0 / (2 * math.pi * min(self.hp_cutoffs))

    def sos(self, dt: float) -> np.ndarray:
        self.validate(dt)
        fs = 1.0 / dt
        return np.vstack([signal.butter(self.hp_order, c, btype="highpass", fs=fs, output="sos")
                          for c in self.hp_cutoffs])

    def to_dict(self) -> dict:
        return {"hp_cutoffs": list(self.hp_cutoffs), "hp_order": self.hp_order,
                "direction": self.direction}

    @classmethod
    def from_dict(cls, d: dict) -> "FilterSpec":
        return cls(tuple(d.get("hp_cutoffs", (3000.0, 9000.0))), int(d.get("hp_order", 2)),
                   d.get("direction", "backward"))


def highpass_backward(record, spec: FilterSpec, dt: float) -> np.ndarray:
    """High-pass ``record`` along its last axis.

    With ``direction='backward'`` the cascade runs from the last sample toward
    the first. The filter state is initialised to the steady state for the
    first processed sample, which removes a DC offset without a transient.
    """
    x = np.asarray(record, dtype=float)
    sos = spec.sos(dt)
    if spec.direction == "backward":
        x = x[..., ::-1]
    zi = signal.sosfilt_zi(sos)
    # sosfilt wants zi of shape (n_sections, *x.shape[:-1], 2)
    zi = zi.reshape(zi.shape[0], *([1] * (x.ndim - 1)), 2) * x[np.newaxis, ..., 0, np.newaxis]
    y, _ = signal.sosfilt(sos, x, axis=-1, zi=zi)
    if spec.direction == "backward":
        y = y[..., ::-1]
    return np.ascontiguousarray(y)


def highpass_response(spec: FilterSpec, dt: float, freq_hz) -> np.ndarray:
    """Complex gain seen by a tone at ``freq_hz`` after :func:`highpass_backward`.

    Running the causal cascade on the reversed record conjugates its
    frequency response.
    """
    _, h = signal.sosfreqz(spec.sos(dt), worN=np.atleast_1d(np.asarray(freq_hz, dtype=float)),
                           fs=1.0 / dt)
    return np.conj(h) if spec.direction == "backward" else h


def highpass_phase(spec: FilterSpec, dt: float, omega: float) -> float:
    """Phase (rad) of :func:`highpass_response` at angular frequency ``omega``."""
    return float(np.angle(highpass_response(spec, dt, omega / (2 * math.pi))[0]))
