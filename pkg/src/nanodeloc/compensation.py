"""Stray-force compensation by half-period frequency kicks.

Softening the trap for half a period while a net force ``f`` acts displaces
the particle by ``2 f (r^2 - 1) / omega_m``; after recapture it oscillates
with that amplitude around the full-power equilibrium. Sweeping a DC
electrode voltage that adds ``-coupling * V`` to the force and locating the
minimum of the mean amplitude gives the compensating voltage.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, signal

from .dynamics import PulseProtocol, PulseSegment, run_protocol, thermal_state, two_pulse
from .errors import OutOfRangeError
from .params import PhysicalParams
from .simulate import SimConfig, simulate_ensemble


@dataclass(frozen=True)
class CompensationConfig:
    coupling: float
    v_grid: tuple[float, ...]
    r: float = 1.5
    n_traces: int = 20
    bp_center: float | None = None  # Hz; defaults to the trap frequency
    bp_bandwidth: float = 2000.0
    dt: float = 2e-7
    record_duration: float = 1e-3
    demod_window: tuple[float, float] = (0.0, 0.1e-3)

    def __post_init__(self):
        object.__setattr__(self, "v_grid", tuple(float(v) for v in self.v_grid))
        if self.n_traces < 2:
            raise ValueError("n_traces must be >= 2")
        if len(self.v_grid) < 3:
            raise ValueError("the voltage grid needs at least three points")
        if self.coupling == 0:
            raise ValueError("coupling must be non-zero")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.bp_center is not None and not self.bp_bandwidth < self.bp_center:
            raise ValueError("bandwidth must be below the centre frequency")
        lo, hi = self.demod_window
        if not 0 <= lo < hi <= self.record_duration:
            raise ValueError("demodulation window must lie inside the record")

    def center_hz(self, params: PhysicalParams) -> float:
        return self.bp_center if self.bp_center is not None else params.omega_m / (2 * math.pi)

    def with_(self, **changes) -> "CompensationConfig":
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d.update(changes)
        return CompensationConfig(**d)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in ((k, getattr(self, k)) for k in self.__dataclass_fields__)}

    @classmethod
    def from_dict(cls, d: dict) -> "CompensationConfig":
        d = dict(d)
        d["v_grid"] = tuple(d["v_grid"])
        if "demod_window" in d:
            d["demod_window"] = tuple(d["demod_window"])
        return cls(**d)


def kick_protocol(r: float) -> PulseProtocol:
    return PulseProtocol((PulseSegment(r, math.pi),), kind="kick")


def mean_amplitude_model(r, f_net, omega_m: float):
    """Mean oscillation amplitude after a half-period kick, in zero-point units."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 1):
        raise ValueError("r must be >= 1")
    a = 2.0 * r * r / omega_m * np.abs(np.asarray(f_net, dtype=float) * (1.0 - 1.0 / (r * r)))
    return float(a) if a.ndim == 0 else a


@dataclass
class AmplitudeSweep:
    voltages: np.ndarray
    amplitudes: np.ndarray
    sems: np.ndarray
    coupling: float
    r: float
    phasors: np.ndarray | None = None  # coherent mean complex amplitude per voltage

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["voltage", "amplitude", "sem"])
            for row in zip(self.voltages, self.amplitudes, self.sems):
                out.writerow([repr(float(x)) for x in row])


def _bandpass_backward(records, center, bandwidth, dt):
    b, a = signal.butter(1, [center - bandwidth / 2, center + bandwidth / 2], btype="bandpass",
                         fs=1.0 / dt)
    return signal.lfilter(b, a, records[..., ::-1], axis=-1)[..., ::-1]


def trace_phasors(records, time, omega: float, center_hz: float, bandwidth: float, dt: float,
                  window: tuple[float, float]) -> np.ndarray:
    """Complex oscillation amplitude of each trace at ``omega``.

    The trace is band-passed anti-causally (second order, ``bandwidth`` wide)
    and demodulated; ``y = A cos(omega t + phi)`` gives ``A exp(i phi)``.
    """
    y = _bandpass_backward(np.atleast_2d(records), center_hz, bandwidth, dt)
    m = (time >= window[0]) & (time <= window[1])
    lo = np.exp(-1j * omega * time[m])
    return 2.0 * (y[:, m] * lo).mean(axis=1)


def simulate_amplitude_sweep(config: CompensationConfig, true_f0: float, params: PhysicalParams,
                             seed: int) -> AmplitudeSweep:
    """Mean kick amplitude versus electrode voltage.

    Each voltage runs ``n_traces`` repetitions (thermal start, half period at
    ``omega_m / r``, then a free record). The amplitude at a voltage is the
    magnitude of the coherent mean of the trace phasors, so random-phase
    thermal and recoil motion averages out instead of building a floor.
    Voltages use separate random streams derived from ``(seed, index)``.
    """
    scale = math.sqrt(8.0 * params.gamma_meas)
    amps, sems, phasors = [], [], []
    center = config.center_hz(params)
    for j, v in enumerate(config.v_grid):
        p = params.replace(f0_mean=true_f0 - config.coupling * v)
        sub_seed = int(np.random.SeedSequence(int(seed), spawn_key=(j,)).generate_state(1)[0])
        sim = SimConfig(p, kick_protocol(config.r), dt=config.dt, duration=config.record_duration,
                        repetitions=config.n_traces, seed=sub_seed)
        ens = simulate_ensemble(sim)
        ph = trace_phasors(ens.measurement_records(), ens.measurement_time(), params.omega_m,
                           center, config.bp_bandwidth, config.dt, config.demod_window) / scale
        mean = ph.mean()
        spread = np.sqrt(np.mean(np.abs(ph - mean) ** 2) * config.n_traces / (config.n_traces - 1))
        amps.append(abs(mean))
        sems.append(spread / math.sqrt(config.n_traces))
        phasors.append(mean)
    return AmplitudeSweep(np.array(config.v_grid), np.array(amps), np.array(sems),
                          config.coupling, config.r, np.array(phasors))


@dataclass
class CompensationFit:
    v_star: float
    v_star_sigma: float
    slope: float
    floor: float
    f0_hat: float
    r: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _vee(params, v):
    v_star, c, eps = params
    return np.sqrt((c * (v - v_star)) ** 2 + eps ** 2)


def fit_compensation(sweep: AmplitudeSweep) -> CompensationFit:
    """Fit ``A(V) = sqrt(c^2 (V - V*)^2 + eps^2)``, a smoothed ``c |V - V*|``."""
    v = np.asarray(sweep.voltages, dtype=float)
    a = np.asarray(sweep.amplitudes, dtype=float)
    i_min = int(np.argmin(a))
    if i_min == 0 or i_min == len(a) - 1:
        raise OutOfRangeError(
            f"amplitude minimum at the grid edge (V = {v[i_min]:.4g}); widen the voltage range"
        )
    sem = np.asarray(sweep.sems, dtype=float)
    w = 1.0 / np.maximum(sem, 1e-6 * max(float(np.max(a)), 1e-300))
    slope0 = max(float(np.ptp(a) / max(np.ptp(v) / 2, 1e-300)), 1e-12)
    x0 = [v[i_min], slope0, max(float(a[i_min]), 1e-9)]
    res = optimize.least_squares(lambda p: w * (_vee(p, v) - a), x0, method="lm", x_scale="jac")
    v_star, c, eps = res.x
    cov = np.full((3, 3), np.nan)
    try:
        dof = max(len(v) - 3, 1)
        chi2 = float(np.sum(res.fun ** 2)) / dof
        cov = np.linalg.inv(res.jac.T @ res.jac) * max(chi2, 1.0)
    except np.linalg.LinAlgError:
        pass
    if not v.min() <= v_star <= v.max():
        raise OutOfRangeError(f"fitted V* = {v_star:.4g} lies outside the sweep")
    return CompensationFit(float(v_star), float(math.sqrt(max(cov[0, 0], 0.0))), float(abs(c)),
                           float(abs(eps)), float(sweep.coupling * v_star), sweep.r)


def compensate(config: CompensationConfig, true_f0: float, params: PhysicalParams, seed: int,
               r_schedule=(1.5, 2.0), zoom: float = 0.25) -> list[CompensationFit]:
    """Coarse sweep at the first ratio, then re-sweep around each estimate at
    the next ratio on a grid ``zoom`` times as wide."""
    fits = []
    grid = np.asarray(config.v_grid)
    for k, r in enumerate(r_schedule):
        cfg = config.with_(r=float(r), v_grid=tuple(grid))
        fit = fit_compensation(simulate_amplitude_sweep(cfg, true_f0, params, seed + k))
        fits.append(fit)
        half = 0.5 * np.ptp(grid) * zoom
        grid = np.linspace(fit.v_star - half, fit.v_star + half, len(grid))
    return fits


def residual_displacement(f_residual: float, f_reference: float, params: PhysicalParams,
                          r: float = 2.45) -> float:
    """Mean phase-space displacement after the two-pulse sequence with a
    residual force, relative to the uncompensated force ``f_reference``."""
    def disp(f):
        st = run_protocol(thermal_state(params.n_bar), two_pulse(r), params.replace(f0_mean=f))
        return math.hypot(st.mean_z, st.mean_p)

    ref = disp(f_reference)
    if ref == 0:
        raise ValueError("reference force produces no displacement")
    return disp(f_residual) / ref
