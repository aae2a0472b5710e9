"""Stochastic repetitions of the experiment and the homodyne record they produce.

Every sampling interval is propagated with the exact Gaussian transition of
the linear Langevin dynamics (affine flow plus the recoil covariance
integrated over the interval), so the only effect of ``dt`` is the density of
the record. Segment edges that fall between samples are handled by splitting
the interval at the edge and composing the two exact maps.

Record model, for sample ``k`` at trap ratio ``r_k``::

    y_k = gain * (sqrt(8 eta gamma_qba / r_k^2) * z_k + w_k),   w_k ~ N(0, 1/dt)

which is ``i dt = sqrt(8 Gamma_meas) z dt + dW`` with ``<dW^2> = dt``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import kernels
from .dynamics import PulseProtocol, PulseSegment, hold, segment_maps
from .params import PhysicalParams

MAGIC = b"NDLENSMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIQQQd32s")


@dataclass(frozen=True)
class SimConfig:
    params: PhysicalParams
    protocol: PulseProtocol = field(default_factory=hold)
    dt: float = 2e-7
    duration: float = 1.5e-3
    repetitions: int = 400
    seed: int = 0
    gain: float = 1.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.dt * self.params.omega_m > 0.1 + 1e-12:
            raise ValueError(
                f"dt * omega_m = {self.dt * self.params.omega_m:.3g} exceeds 0.1; "
                "the oscillation would be under-resolved"
            )
        if not self.duration > 0:
            raise ValueError("duration must be > 0")
        if int(self.repetitions) < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.gain != 0:
            raise ValueError("gain must be non-zero")

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "protocol": protocol_to_dict(self.protocol),
            "dt": self.dt,
            "duration": self.duration,
            "repetitions": int(self.repetitions),
            "seed": int(self.seed),
            "gain": self.gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return cls(
            params=PhysicalParams.from_dict(d["params"]),
            protocol=protocol_from_dict(d["protocol"]),
            dt=float(d["dt"]),
            duration=float(d["duration"]),
            repetitions=int(d["repetitions"]),
            seed=int(d["seed"]),
            gain=float(d.get("gain", 1.0)),
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()

    @property
    def marker(self) -> int:
        """Index of the first sample at or after the end of the protocol."""
        t_p = self.protocol.duration(self.params.omega_m)
        return int(math.floor(t_p / self.dt + 1e-9))

    @property
    def n_samples(self) -> int:
        return self.marker + int(round(self.duration / self.dt))


def protocol_to_dict(protocol: PulseProtocol) -> dict:
    return {"kind": protocol.kind, "segments": [[s.ratio, s.phase] for s in protocol]}


def protocol_from_dict(d: dict) -> PulseProtocol:
    return PulseProtocol(tuple(PulseSegment(float(r), float(ph)) for r, ph in d["segments"]),
                         kind=d.get("kind", "custom"))


@dataclass
class MeasurementEnsemble:
    records: np.ndarray  # (R, N)
    truths: np.ndarray  # (R, N, 2)
    time_axis: np.ndarray  # (N,)
    marker: int
    dt: float
    config_digest: bytes = b"\x00" * 32

    def __post_init__(self):
        n = self.time_axis.shape[0]
        if self.records.shape[-1] != n or self.truths.shape[1] != n:
            raise ValueError("records, truths and time axis must share N")
        if not 0 <= self.marker < n:
            raise ValueError("marker outside the time axis")

    @property
    def repetitions(self) -> int:
        return self.records.shape[0]

    def measurement_records(self) -> np.ndarray:
        return self.records[:, self.marker:]

    def measurement_truths(self) -> np.ndarray:
        return self.truths[:, self.marker:]

    def measurement_time(self) -> np.ndarray:
        return self.time_axis[self.marker:]


# -- transition plan ------------------------------------------------------------

def _segment_table(protocol: PulseProtocol, omega_m: float):
    """Start, end and ratio of each segment; the protocol ends at t = 0."""
    t_p = protocol.duration(omega_m)
    starts, ends, ratios = [], [], []
    t = -t_p
    for seg in protocol:
        d = seg.duration(omega_m)
        starts.append(t)
        ends.append(t + d)
        ratios.append(seg.ratio)
        t += d
    ends[-1] = 0.0
    # measurement step at full power
    starts.append(0.0)
    ends.append(math.inf)
    ratios.append(1.0)
    return np.array(starts), np.array(ends), np.array(ratios)


def _ratio_at(t, starts, ends, ratios):
    idx = np.searchsorted(ends, t, side="right")
    return ratios[np.minimum(idx, len(ratios) - 1)]


def _compose_interval(ta, tb, table, params):
    starts, ends, ratios = table
    m_tot = np.eye(2)
    b_tot = np.zeros(2)
    q_tot = np.zeros((2, 2))
    for s, e, r in zip(starts, ends, ratios):
        lo, hi = max(s, ta), min(e, tb)
        if hi <= lo:
            continue
        m, b, q = segment_maps(r, (hi - lo) * params.omega_m / r, params.omega_m, params.gamma_qba)
        m_tot = m @ m_tot
        b_tot = m @ b_tot + b
        q_tot = m @ q_tot @ m.T + q
    return m_tot, b_tot, q_tot


def _chol2(q):
    l = np.zeros_like(q)
    l00 = np.sqrt(np.maximum(q[..., 0, 0], 0.0))
    safe = np.where(l00 > 0, l00, 1.0)
    l10 = np.where(l00 > 0, q[..., 1, 0] / safe, 0.0)
    l[..., 0, 0] = l00
    l[..., 1, 0] = l10
    l[..., 1, 1] = np.sqrt(np.maximum(q[..., 1, 1] - l10**2, 0.0))
    return l


@dataclass(frozen=True)
class TransitionPlan:
    """Per-interval maps from the initial instant through every sample."""

    times: np.ndarray  # (N,)
    m: np.ndarray  # (N, 2, 2); entry 0 maps the initial instant to times[0]
    b: np.ndarray  # (N, 2)
    q: np.ndarray  # (N, 2, 2)
    chol: np.ndarray  # (N, 2, 2)
    meas_scale: np.ndarray  # (N,)


def transition_plan(config: SimConfig) -> TransitionPlan:
    params = config.params
    om = params.omega_m
    table = _segment_table(config.protocol, om)
    n = config.n_samples
    marker = config.marker
    times = (np.arange(n) - marker) * config.dt
    t_init = -config.protocol.duration(om)

    lo = np.concatenate(([t_init], times[:-1]))
    hi = times
    starts, ends, ratios = table
    inner = [e for e in ends[:-1] if t_init < e]
    crossing = np.zeros(n, dtype=bool)
    for edge in inner:
        crossing |= (lo < edge - 1e-15) & (hi > edge + 1e-15)

    mid = 0.5 * (lo + hi)
    r = _ratio_at(mid, starts, ends, ratios)
    m, b, q = segment_maps(r, (hi - lo) * om / r, om, params.gamma_qba)
    for k in np.flatnonzero(crossing):
        m[k], b[k], q[k] = _compose_interval(lo[k], hi[k], table, params)

    r_sample = _ratio_at(times, starts, ends, ratios)
    meas_scale = np.sqrt(8.0 * params.gamma_meas) / r_sample
    return TransitionPlan(times, m, b, q, _chol2(q), meas_scale)


# -- simulation ----------------------------------------------------------------

def _rep_rng(seed: int, rep: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(rep),)))


def _simulate_block(config: SimConfig, plan: TransitionPlan, reps: list[int], use_numba=None):
    params = config.params
    n = plan.times.shape[0]
    x0 = np.empty((len(reps), 2))
    f0 = np.empty(len(reps))
    xi = np.empty((len(reps), n, 2))
    w = np.empty((len(reps), n))
    sd0 = math.sqrt(params.v0)
    sdf = math.sqrt(params.v_f0)
    for j, rep in enumerate(reps):
        rng = _rep_rng(config.seed, rep)
        x0[j] = sd0 * rng.standard_normal(2)
        f0[j] = params.f0_mean + sdf * rng.standard_normal()
        xi[j] = rng.standard_normal((n, 2))
        w[j] = rng.standard_normal(n)
    traj = kernels.propagate(x0, f0, plan.m, plan.b, plan.chol, xi, use_numba=use_numba)[:, 1:]
    records = config.gain * (plan.meas_scale * traj[:, :, 0] + w / math.sqrt(config.dt))
    return records, traj


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NANODELOC_WORKERS", "1")))
    except ValueError:
        return 1


def simulate_ensemble(config: SimConfig, reps: Iterable[int] | None = None,
                      use_numba=None) -> MeasurementEnsemble:
    """Simulate repetitions ``reps`` (default ``range(config.repetitions)``).

    Each repetition draws from its own stream derived from ``(seed, rep)``, so
    the content of a repetition does not depend on which others are run or
    in which order.
    """
    reps = list(range(config.repetitions) if reps is None else reps)
    plan = transition_plan(config)
    workers = _workers()
    if workers > 1 and len(reps) > workers:
        chunks = [reps[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda c: _simulate_block(config, plan, c, use_numba), chunks))
        records = np.empty((len(reps), plan.times.shape[0]))
        truths = np.empty((len(reps), plan.times.shape[0], 2))
        for i, (rec, tr) in enumerate(parts):
            records[i::workers] = rec
            truths[i::workers] = tr
    else:
        records, truths = _simulate_block(config, plan, reps, use_numba)
    return MeasurementEnsemble(records, truths, plan.times, config.marker, config.dt, config.digest())


def simulate_repetition(config: SimConfig, rep_index: int):
    """Record (N,) and ground truth (N, 2) of a single repetition."""
    ens = simulate_ensemble(config, [rep_index])
    return ens.records[0], ens.truths[0]


# -- persistence ---------------------------------------------------------------

def save_ensemble(ensemble: MeasurementEnsemble, path) -> None:
    """Write the little-endian binary container (header + time, records, truths)."""
    r, n = ensemble.records.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, 0, r, n, ensemble.marker, ensemble.dt,
                          ensemble.config_digest)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in (ensemble.time_axis, ensemble.records, ensemble.truths):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_ensemble(path) -> MeasurementEnsemble:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise ValueError(f"{path}: file too short for an ensemble header")
    magic, version, _, r, n, marker, dt, digest = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not an ensemble file")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    off = _HEADER.size
    data = np.frombuffer(blob, dtype="<f8", offset=off)
    if data.size != n + r * n + 2 * r * n:
        raise ValueError(f"{path}: truncated payload")
    time_axis = data[:n].astype(float)
    records = data[n:n + r * n].reshape(r, n).astype(float)
    truths = data[n + r * n:].reshape(r, n, 2).astype(float)
    return MeasurementEnsemble(records, truths, time_axis, int(marker), float(dt), digest)


def export_csv(ensemble: MeasurementEnsemble, path, what: str = "records") -> None:
    """Wide CSV: a ``time_s`` column followed by one column per repetition."""
    if what == "records":
        cols = ensemble.records
    elif what in ("z", "p"):
        cols = ensemble.truths[:, :, 0 if what == "z" else 1]
    else:
        raise ValueError(f"unknown export {what!r}")
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["time_s"] + [f"rep_{i}" for i in range(cols.shape[0])])
        for k, t in enumerate(ensemble.time_axis):
            out.writerow([repr(float(t))] + [repr(float(v)) for v in cols[:, k]])
