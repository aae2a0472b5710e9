"""Steady-state retrodiction of position and momentum from a homodyne record.

The estimate at time ``t`` uses only the record after ``t``. In backward time
``tau = -t`` the estimator is a Kalman-Bucy filter for the mirrored dynamics,

    d x/d tau = F x + K i,   F = -A - K sqrt(k) e1^T,   K = sqrt(k) (Vz, Czp),

with ``A = [[0, w], [-w, 0]]``, ``k = 8 Gamma_meas`` and ``(Vz, Vp, Czp)`` the
fixed point of the backward Riccati equation

    dV/d tau = -A V - V A^T + diag(0, 2 Gamma_qba) - k V e1 e1^T V.

Because the backward model carries no prior, the estimation error is
independent of the state: ensemble variances of the estimates are the true
variances plus the conditional covariance.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from . import kernels
from .errors import ConvergenceError, DivergenceError
from .params import PhysicalParams


@dataclass(frozen=True)
class RetrodictionGains:
    v_z: float
    v_p: float
    c_zp: float
    lam: float
    gamma_meas: float

    def __post_init__(self):
        vals = (self.v_z, self.v_p, self.c_zp)
        if not all(math.isfinite(v) for v in vals) or self.v_z <= 0 or self.v_p <= 0:
            raise DivergenceError(f"non-physical conditional covariance {vals}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.v_z, self.c_zp], [self.c_zp, self.v_p]])


def conditional_covariance(eta: float, lam: float) -> tuple[float, float, float]:
    """Closed-form steady state ``(Vz, Vp, Czp)`` for efficiency ``eta`` and
    backaction strength ``lam = 4 Gamma_qba / omega_m``."""
    if not eta > 0 or not lam > 0:
        raise DivergenceError(
            f"no measurement information (eta={eta}, lambda={lam}); the estimate diverges"
        )
    x = eta * lam * lam
    root = math.sqrt(1.0 + x)
    # root - 1 without cancellation for weak measurements
    s = x / (1.0 + root)
    vz = math.sqrt(s) / (math.sqrt(2.0) * eta * lam)
    return vz, root * vz, -s / (2.0 * eta * lam)


def steady_state_gains(params: PhysicalParams) -> RetrodictionGains:
    vz, vp, c = conditional_covariance(params.eta, params.lam)
    return RetrodictionGains(vz, vp, c, params.lam, params.gamma_meas)


def _riccati_rhs(v, g, kappa):
    # dimensionless time s = omega_m * tau
    vz, vp, c = v
    return np.array([
        -2.0 * c - kappa * vz * vz,
        2.0 * c + 2.0 * g - kappa * c * c,
        vz - vp - kappa * vz * c,
    ])


def riccati_steady_state_numeric(params: PhysicalParams, tol: float = 1e-12, step: float = 0.05,
                                 max_steps: int = 2_000_000,
                                 v_init=(1.0, 1.0, 0.0)) -> RetrodictionGains:
    """Integrate the backward Riccati equation with fixed-step RK4 until the
    rate of change drops below ``tol`` (per radian of oscillation)."""
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if not params.gamma_meas > 0:
        raise DivergenceError("measurement rate is zero; the conditional covariance diverges")
    g = params.gamma_qba / params.omega_m
    kappa = 8.0 * params.gamma_meas / params.omega_m
    v = np.asarray(v_init, dtype=float)
    h = step
    for _ in range(max_steps):
        k1 = _riccati_rhs(v, g, kappa)
        k2 = _riccati_rhs(v + 0.5 * h * k1, g, kappa)
        k3 = _riccati_rhs(v + 0.5 * h * k2, g, kappa)
        k4 = _riccati_rhs(v + h * k3, g, kappa)
        dv = h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        v = v + dv
        if not np.all(np.isfinite(v)):
            raise ConvergenceError("Riccati integration blew up; reduce the step")
        if np.max(np.abs(dv)) < tol * h:
            return RetrodictionGains(float(v[0]), float(v[1]), float(v[2]), params.lam,
                                     params.gamma_meas)
    raise ConvergenceError(f"Riccati integration did not settle within {max_steps} steps")


def relaxation_time(params: PhysicalParams, gains: RetrodictionGains | None = None) -> float:
    """Decay time of the filter transient, 1 / (4 Gamma_meas Vz)."""
    gains = gains or steady_state_gains(params)
    return 1.0 / (4.0 * params.gamma_meas * gains.v_z)


def filter_matrices(params: PhysicalParams, gains: RetrodictionGains | None = None):
    """Continuous backward-time system ``(F, K)``."""
    gains = gains or steady_state_gains(params)
    k = 8.0 * params.gamma_meas
    w = params.omega_m
    f = np.array([[-k * gains.v_z, -w], [w - k * gains.c_zp, 0.0]])
    g = math.sqrt(k) * np.array([gains.v_z, gains.c_zp])
    return f, g


def filter_poles_zeros(params: PhysicalParams, gains: RetrodictionGains | None = None):
    """Poles shared by both outputs and the zeros of the position and momentum
    transfer functions, in the Laplace variable of backward time."""
    gains = gains or steady_state_gains(params)
    gm = params.gamma_meas
    w = params.omega_m
    re = -4.0 * gm * gains.v_z
    im = np.sqrt(complex(w * w - 8.0 * gm * gains.c_zp * w - 16.0 * gm * gm * gains.v_z ** 2))
    poles = np.array([re + 1j * im, re - 1j * im])
    zero_z = w * gains.c_zp / gains.v_z
    zero_p = -w * gains.v_z / gains.c_zp
    return poles, zero_z, zero_p


def tustin(params: PhysicalParams, dt: float, gains: RetrodictionGains | None = None):
    """Trapezoidal discretization ``(Ad, Bd)`` of the backward filter."""
    f, g = filter_matrices(params, gains)
    eye = np.eye(2)
    lhs = eye - 0.5 * dt * f
    ad = np.linalg.solve(lhs, eye + 0.5 * dt * f)
    bd = np.linalg.solve(lhs, 0.5 * dt * g)
    return ad, bd


@dataclass
class RetrodictionResult:
    z: np.ndarray
    p: np.ndarray
    dt: float
    unconverged: np.ndarray  # bool per sample; True near the late edge
    warnings: list[str] = field(default_factory=list)

    @property
    def converged_until(self) -> int:
        """Exclusive index of the last sample with a settled estimate."""
        bad = np.flatnonzero(self.unconverged)
        return int(bad[0]) if bad.size else self.z.shape[-1]


def _edge_mask(n: int, dt: float, tau: float, settle: float) -> np.ndarray:
    remaining = (n - 1 - np.arange(n)) * dt
    return remaining < settle * tau


def _finish(z, p, dt, params, gains, settle):
    n = z.shape[-1]
    tau = relaxation_time(params, gains)
    mask = _edge_mask(n, dt, tau, settle)
    msgs = []
    if mask.all():
        msgs.append(f"record of {n * dt:.3g} s is shorter than {settle} relaxation times "
                    f"({settle * tau:.3g} s); no estimate has converged")
        warnings.warn(msgs[-1], RuntimeWarning, stacklevel=3)
    return RetrodictionResult(z, p, dt, mask, msgs)


def retrodict(record, params: PhysicalParams, dt: float, gains: RetrodictionGains | None = None,
              settle: float = 5.0, use_numba=None) -> RetrodictionResult:
    """Reference path: state-space recursion from the last sample backward."""
    gains = gains or steady_state_gains(params)
    x = np.asarray(record, dtype=float)
    squeeze = x.ndim == 1
    x2 = np.atleast_2d(x)
    ad, bd = tustin(params, dt, gains)
    out = kernels.filter2(x2[:, ::-1], ad, bd, use_numba=use_numba)[:, ::-1]
    z, p = out[..., 0], out[..., 1]
    if squeeze:
        z, p = z[0], p[0]
    return _finish(np.ascontiguousarray(z), np.ascontiguousarray(p), dt, params, gains, settle)


def iir_coefficients(params: PhysicalParams, dt: float, gains: RetrodictionGains | None = None):
    """Digital ``(b_z, b_p, a)`` from the continuous poles and zeros via the
    bilinear transform."""
    gains = gains or steady_state_gains(params)
    poles, zero_z, zero_p = filter_poles_zeros(params, gains)
    sk = math.sqrt(8.0 * params.gamma_meas)
    fs = 1.0 / dt
    out = []
    for zero, gain in ((zero_z, sk * gains.v_z), (zero_p, sk * gains.c_zp)):
        zd, pd, kd = signal.bilinear_zpk([zero], poles, gain, fs)
        b, a = signal.zpk2tf(zd, pd, kd)
        out.append((np.real(b), np.real(a)))
    return out[0][0], out[1][0], out[0][1]


def retrodict_iir(record, params: PhysicalParams, dt: float,
                  gains: RetrodictionGains | None = None, settle: float = 5.0) -> RetrodictionResult:
    """Fast path: the same transfer functions as pole/zero IIR filters."""
    gains = gains or steady_state_gains(params)
    x = np.asarray(record, dtype=float)
    b_z, b_p, a = iir_coefficients(params, dt, gains)
    rev = x[..., ::-1]
    z = signal.lfilter(b_z, a, rev, axis=-1)[..., ::-1]
    p = signal.lfilter(b_p, a, rev, axis=-1)[..., ::-1]
    return _finish(np.ascontiguousarray(z), np.ascontiguousarray(p), dt, params, gains, settle)
