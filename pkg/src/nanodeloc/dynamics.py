"""Closed-form Gaussian-state propagation through constant-stiffness segments.

A segment softens the trap to ``omega_m / r`` for an accumulated phase
``omega_m / r * t``. Inside a segment the motion is a scaled rotation about
the shifted equilibrium ``f0 (r^2 - 1) / omega_m``, and photon recoil adds a
covariance block that depends only on the segment phase. Stray-force
fluctuations are carried as a sensitivity vector ``d(mean)/d f0`` so that
their ensemble covariance ``v_f0 * s s^T`` composes across segments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidStateError
from .params import PhysicalParams

HEISENBERG_DET = 0.25


@dataclass(frozen=True)
class GaussianState:
    """First and second moments of the mode, in zero-point units.

    ``vz, vp, czp`` hold the covariance conditioned on the stray force of a
    repetition; the ensemble covariance adds ``v_f0 * sens sens^T``
    (see :func:`total_covariance`).
    """

    mean_z: float
    mean_p: float
    vz: float
    vp: float
    czp: float
    sens: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (self.vz > 0 and self.vp > 0):
            raise InvalidStateError(f"variances must be positive, got vz={self.vz}, vp={self.vp}")

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mean_z, self.mean_p])

    def covariance(self) -> np.ndarray:
        return np.array([[self.vz, self.czp], [self.czp, self.vp]])

    @property
    def det(self) -> float:
        return self.vz * self.vp - self.czp**2

    @property
    def energy(self) -> float:
        """Mean fluctuation energy (vz + vp) / 2."""
        return 0.5 * (self.vz + self.vp)


@dataclass(frozen=True)
class PulseSegment:
    """Constant trap stiffness for a given phase at the segment frequency."""

    ratio: float
    phase: float

    def __post_init__(self):
        if not self.ratio > 0:
            raise ValueError(f"ratio must be > 0, got {self.ratio}")
        if not self.phase >= 0:
            raise ValueError(f"phase must be >= 0, got {self.phase}")

    def duration(self, omega_m: float) -> float:
        """Segment length in seconds."""
        return self.phase * self.ratio / omega_m


@dataclass(frozen=True)
class PulseProtocol:
    segments: tuple[PulseSegment, ...] = field(default_factory=tuple)
    kind: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("a protocol needs at least one segment")

    def duration(self, omega_m: float) -> float:
        return sum(seg.duration(omega_m) for seg in self.segments)

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)


def thermal_state(n_bar: float) -> GaussianState:
    if n_bar < 0:
        raise ValueError(f"n_bar must be >= 0, got {n_bar}")
    v = n_bar + 0.5
    return GaussianState(0.0, 0.0, v, v, 0.0)


def _check_softening(r: float):
    if r < 1:
        raise ValueError(f"frequency ratio must be >= 1 for a softening protocol, got {r}")


def two_pulse(r: float) -> PulseProtocol:
    """Quarter period at the soft trap, quarter at full power, quarter soft again."""
    _check_softening(r)
    h = math.pi / 2
    return PulseProtocol(
        (PulseSegment(r, h), PulseSegment(1.0, h), PulseSegment(r, h)), kind="two_pulse"
    )


def one_pulse(r: float) -> PulseProtocol:
    _check_softening(r)
    return PulseProtocol((PulseSegment(r, math.pi / 2),), kind="one_pulse")


def loop_protocol(r: float, gap_phase: float = 0.0) -> PulseProtocol:
    """Two half-period soft pulses separated by ``gap_phase`` at full power."""
    _check_softening(r)
    if gap_phase < 0:
        raise ValueError(f"gap_phase must be >= 0, got {gap_phase}")
    return PulseProtocol(
        (PulseSegment(r, math.pi), PulseSegment(1.0, gap_phase), PulseSegment(r, math.pi)),
        kind="loop",
    )


def hold() -> PulseProtocol:
    """No stiffness change: measurement starts straight from the thermal state."""
    return PulseProtocol((PulseSegment(1.0, 0.0),), kind="hold")


def segment_maps(r, phase, omega_m, gamma_qba):
    """Linear map, unit-force offset and recoil covariance of one segment.

    Works element-wise on arrays of ``phase`` (trailing 2x2 / 2 axes).

    Returns
    -------
    m : ndarray (..., 2, 2)
        Homogeneous flow ``x -> m @ x``.
    b : ndarray (..., 2)
        Mean displacement produced by a unit stray force.
    q : ndarray (..., 2, 2)
        Covariance added by photon recoil.
    """
    phase = np.asarray(phase, dtype=float)
    c, s = np.cos(phase), np.sin(phase)
    c2, s2 = np.cos(2 * phase), np.sin(2 * phase)
    shape = phase.shape
    m = np.empty(shape + (2, 2))
    m[..., 0, 0] = c
    m[..., 0, 1] = r * s
    m[..., 1, 0] = -s / r
    m[..., 1, 1] = c
    e = (r * r - 1.0) / omega_m
    b = np.empty(shape + (2,))
    b[..., 0] = e * (1.0 - c)
    b[..., 1] = e * s / r
    g = gamma_qba / omega_m
    q = np.empty(shape + (2, 2))
    q[..., 0, 0] = r * g * (phase - s2 / 2)
    q[..., 1, 1] = g / r * (phase + s2 / 2)
    q[..., 0, 1] = q[..., 1, 0] = 0.5 * g * (1.0 - c2)
    return m, b, q


def evolve_segment(state: GaussianState, seg: PulseSegment, params: PhysicalParams) -> GaussianState:
    r, phi = seg.ratio, seg.phase
    m, b, q = segment_maps(r, phi, params.omega_m, params.gamma_qba)
    mean = m @ state.mean + params.f0_mean * b
    sens = m @ np.asarray(state.sens) + b
    cov = m @ state.covariance() @ m.T + q
    return GaussianState(
        float(mean[0]),
        float(mean[1]),
        float(cov[0, 0]),
        float(cov[1, 1]),
        float(0.5 * (cov[0, 1] + cov[1, 0])),
        (float(sens[0]), float(sens[1])),
    )


def run_protocol(state: GaussianState, protocol: PulseProtocol | Sequence[PulseSegment],
                 params: PhysicalParams) -> GaussianState:
    for seg in protocol:
        state = evolve_segment(state, seg, params)
    return state


def total_covariance(state: GaussianState, params: PhysicalParams) -> np.ndarray:
    """Ensemble covariance including stray-force fluctuations between repetitions."""
    s = np.asarray(state.sens)
    return state.covariance() + params.v_f0 * np.outer(s, s)


# -- analytic predictions -----------------------------------------------------

def predict_two_pulse(r, params: PhysicalParams, v_n: float = 0.0):
    """Estimated variances after the two-pulse sequence, main-text closed form.

    ``vz = v_n + r^4 V0 + (gamma pi / omega_m)(r + r^2 + r^3)`` and the momentum
    analogue with inverse powers. Note that composing :func:`evolve_segment`
    gives half of this recoil term; see :func:`composed_two_pulse`.
    """
    r = np.asarray(r, dtype=float)
    if np.any(r < 1):
        raise ValueError("frequency ratio must be >= 1")
    g = params.gamma_qba * math.pi / params.omega_m
    v0 = params.v0
    vz = v_n + r**4 * v0 + g * (r + r**2 + r**3)
    vp = v_n + v0 / r**4 + g * (1 / r + 1 / r**2 + 1 / r**3)
    if vz.ndim == 0:
        return float(vz), float(vp)
    return vz, vp


def composed_two_pulse(r, params: PhysicalParams, v_n: float = 0.0):
    """Diagonal of ``run_protocol(two_pulse(r))`` in closed form, plus its
    residual correlation ``gamma / omega_m``."""
    r = np.asarray(r, dtype=float)
    g = params.gamma_qba * math.pi / (2 * params.omega_m)
    v0 = params.v0
    vz = v_n + r**4 * v0 + g * (r + r**2 + r**3)
    vp = v_n + v0 / r**4 + g * (1 / r + 1 / r**2 + 1 / r**3)
    czp = np.full_like(r, params.gamma_qba / params.omega_m)
    if vz.ndim == 0:
        return float(vz), float(vp), float(czp)
    return vz, vp, czp


def predict_recompression_energy(r, params: PhysicalParams, v_n: float = 0.0):
    """Energy after the loop protocol: ``v_n + V0 + (gamma pi / omega_m)(r + 1/r)``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 1):
        raise ValueError("frequency ratio must be >= 1")
    e = v_n + params.v0 + params.gamma_qba * math.pi / params.omega_m * (r + 1 / r)
    return float(e) if e.ndim == 0 else e


def stray_noise(kind: str, d, params: PhysicalParams):
    """Stray-force covariance block (vz, vp, czp) for a delocalization factor ``d``.

    ``kind='one_pulse'`` uses d = r, ``kind='two_pulse'`` uses d = r^2.
    """
    d = np.asarray(d, dtype=float)
    if np.any(d < 1):
        raise ValueError("delocalization factor must be >= 1")
    k = params.v_f0 / params.omega_m**2
    if kind == "one_pulse":
        base = k * (d**2 - 1) ** 2
        out = (base, base / d**2, base / d)
    elif kind == "two_pulse":
        base = k * (d - 1) ** 2 * (np.sqrt(d) - 1) ** 2
        out = (base, base / d**2, -base / d)
    else:
        raise ValueError(f"unknown protocol kind {kind!r}")
    if d.ndim == 0:
        return tuple(float(x) for x in out)
    return out


# -- figures of merit ---------------------------------------------------------

def _as_cov(x) -> np.ndarray:
    if isinstance(x, GaussianState):
        return x.covariance()
    cov = np.asarray(x, dtype=float)
    if cov.shape != (2, 2):
        raise ValueError(f"expected a 2x2 covariance, got shape {cov.shape}")
    return cov


def purity(state) -> float:
    cov = _as_cov(state)
    det = float(np.linalg.det(cov))
    if det <= 0:
        raise InvalidStateError(f"covariance determinant {det} is not positive")
    return 1.0 / (2.0 * math.sqrt(det))


def _lambda_min(cov: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(cov)[0])


def _require_physical(cov: np.ndarray, tol: float = 1e-9):
    det = float(np.linalg.det(cov))
    if det < HEISENBERG_DET - tol or cov[0, 0] <= 0:
        raise InvalidStateError(f"covariance with det={det:.6g} violates the uncertainty relation")


def coherence_length(state, params: PhysicalParams) -> float:
    """``z_zpf * sqrt(2 / lambda_min)`` in meters."""
    cov = _as_cov(state)
    _require_physical(cov)
    return params.z_zpf * math.sqrt(2.0 / _lambda_min(cov))


def coherence_length_purity(state, params: PhysicalParams) -> float:
    """``sqrt(8 P) * dz`` in meters. Agrees with :func:`coherence_length`
    only for minimum-uncertainty states."""
    cov = _as_cov(state)
    _require_physical(cov)
    return params.z_zpf * math.sqrt(8.0 * purity(cov) * cov[0, 0])


def squeezing_db(state) -> float:
    """Smallest quadrature variance relative to zero point, in dB."""
    return 10.0 * math.log10(_lambda_min(_as_cov(state)) / 0.5)
