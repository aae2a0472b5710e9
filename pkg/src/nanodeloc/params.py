"""Physical parameters of the levitated oscillator (single longitudinal mode).

All rates are angular (rad/s). State quantities elsewhere in the package are
expressed in zero-point units of the full-power trap; ``z_zpf`` is only used
to convert lengths to meters when reporting.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace


@dataclass(frozen=True)
class PhysicalParams:
    """Trap, decoherence and detection parameters.

    Attributes
    ----------
    omega_m : float
        Trap angular frequency at full tweezer power (rad/s).
    gamma_qba : float
        Photon-recoil heating rate at full power (phonons/s).
    eta : float
        Detection efficiency in (0, 1].
    n_bar : float
        Mean phonon occupancy of the initial thermal state.
    f0_mean : float
        Mean stray force, as a rate of normalized momentum change (rad/s).
    v_f0 : float
        Variance of the stray force across repetitions ((rad/s)^2).
    z_zpf : float
        Zero-point length in meters.
    """

    omega_m: float
    gamma_qba: float
    eta: float = 1.0
    n_bar: float = 0.0
    f0_mean: float = 0.0
    v_f0: float = 0.0
    z_zpf: float = 1e-12

    def __post_init__(self):
        if not self.omega_m > 0:
            raise ValueError(f"omega_m must be > 0, got {self.omega_m}")
        if not self.gamma_qba >= 0:
            raise ValueError(f"gamma_qba must be >= 0, got {self.gamma_qba}")
        if not 0 < self.eta <= 1:
            raise ValueError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.n_bar >= 0:
            raise ValueError(f"n_bar must be >= 0, got {self.n_bar}")
        if not self.v_f0 >= 0:
            raise ValueError(f"v_f0 must be >= 0, got {self.v_f0}")
        if not self.z_zpf > 0:
            raise ValueError(f"z_zpf must be > 0, got {self.z_zpf}")
        if not math.isfinite(self.f0_mean):
            raise ValueError("f0_mean must be finite")

    @property
    def v0(self) -> float:
        """Initial thermal variance n_bar + 1/2."""
        return self.n_bar + 0.5

    @property
    def gamma_meas(self) -> float:
        """Measurement rate entering the record, eta * gamma_qba."""
        return self.eta * self.gamma_qba

    @property
    def lam(self) -> float:
        """Dimensionless backaction strength 4 gamma_qba / omega_m."""
        return 4.0 * self.gamma_qba / self.omega_m

    def replace(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhysicalParams":
        return cls(**{k: float(v) for k, v in d.items()})


def z_zpf_from_uncertainty(delta_z: float, n_bar: float) -> float:
    """Zero-point length from a thermal position spread, dz = sqrt(n_bar + 1/2) z_zpf."""
    return delta_z / math.sqrt(n_bar + 0.5)
