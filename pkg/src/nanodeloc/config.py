"""Experiment configuration, JSON round-tripping and named presets."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .dynamics import PulseProtocol, hold, loop_protocol, one_pulse, two_pulse
from .filters import FilterSpec
from .params import PhysicalParams
from .simulate import SimConfig

TWO_PI = 2 * math.pi

# Nominal values for the three feedback gains; the ratio grid is approximate.
_BASE = {
    "omega_m": TWO_PI * 56.5e3,
    "gamma_qba": TWO_PI * 3.77e3,
    "eta": 0.21,
    "z_zpf": 15.6e-12,
}
_SIGMA = {"gamma_qba": TWO_PI * 0.26e3, "eta": 0.01, "v_n": 0.1}
R_GRID = (1.2, 1.5, 1.8, 2.1, 2.45)

PRESETS = {
    "paper-39dB": {"n_bar": 0.68, "n_bar_sigma": 0.09},
    "paper-30dB": {"n_bar": 1.66, "n_bar_sigma": 0.20},
    "paper-20dB": {"n_bar": 5.65, "n_bar_sigma": 0.35},
}

PROTOCOLS = ("two_pulse", "one_pulse", "loop", "hold")


@dataclass(frozen=True)
class ExperimentConfig:
    params: PhysicalParams
    protocol: str = "two_pulse"
    r: float = 2.45
    gap_phase: float = 0.0
    dt: float = 2e-7
    duration: float = 1.5e-3
    repetitions: int = 400
    seed: int = 0
    gain: float = 1.0
    filter: FilterSpec = field(default_factory=FilterSpec)
    fit_window: float = 360e-6
    n_draws: int = 3200
    inference_seed: int = 0
    mc_mode: str = "full"
    norm: str = "spectral"
    r_grid: tuple[float, ...] = R_GRID
    sigmas: dict = field(default_factory=dict)
    preset: str | None = None
    compensation: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "r_grid", tuple(float(r) for r in self.r_grid))
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if not self.fit_window > 0:
            raise ValueError("fit_window must be > 0")
        if self.n_draws < 1:
            raise ValueError("n_draws must be >= 1")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        self.filter.validate(self.dt)
        # surfaces SimConfig invariants early
        self.sim_config()

    def build_protocol(self, r: float | None = None) -> PulseProtocol:
        r = self.r if r is None else r
        if self.protocol == "two_pulse":
            return two_pulse(r)
        if self.protocol == "one_pulse":
            return one_pulse(r)
        if self.protocol == "loop":
            return loop_protocol(r, self.gap_phase)
        return hold()

    def sim_config(self, r: float | None = None, protocol: str | None = None) -> SimConfig:
        cfg = self if protocol is None else replace(self, protocol=protocol)
        return SimConfig(self.params, cfg.build_protocol(r), dt=self.dt, duration=self.duration,
                         repetitions=self.repetitions, seed=self.seed, gain=self.gain)

    def with_(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "params":
                v = v.to_dict()
            elif f.name == "filter":
                v = v.to_dict()
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "preset" in d and d["preset"] is not None and "params" not in d:
            base = preset_config(d["preset"])
            d = {**base.to_dict(), **d}
        d["params"] = PhysicalParams.from_dict(d["params"])
        if "filter" in d:
            d["filter"] = FilterSpec.from_dict(d["filter"])
        if "r_grid" in d:
            d["r_grid"] = tuple(d["r_grid"])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def preset_params(name: str) -> PhysicalParams:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PhysicalParams(n_bar=PRESETS[name]["n_bar"], **_BASE)


def preset_config(name: str, **overrides) -> ExperimentConfig:
    params = preset_params(name)
    sigmas = dict(_SIGMA, n_bar=PRESETS[name]["n_bar_sigma"])
    cfg = ExperimentConfig(params=params, preset=name, sigmas=sigmas)
    return replace(cfg, **overrides) if overrides else cfg


def load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json(Path(path).read_text())
