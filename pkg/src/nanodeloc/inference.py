"""Physical covariance from a noise-biased estimate.

The estimated covariance is the physical one plus the conditional covariance
of the filter. Subtracting the latter can leave a matrix that violates the
uncertainty relation, so the subtraction is posed as the nearest physical
covariance: ``min ||C_meas - C_tilde - C||`` subject to ``C >= 0`` and
``det C >= 1/4``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .dynamics import HEISENBERG_DET, coherence_length, coherence_length_purity, purity, squeezing_db
from .params import PhysicalParams

_FEAS_TOL = 1e-12


def _sym(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {a.shape}")
    return 0.5 * (a + a.T)


def _is_physical(m: np.ndarray) -> bool:
    return m[0, 0] > 0 and m[1, 1] > 0 and np.linalg.det(m) >= HEISENBERG_DET - _FEAS_TOL


def _norm(d: np.ndarray, norm: str) -> float:
    if norm == "spectral":
        return float(np.linalg.norm(d, 2))
    if norm == "frobenius":
        return float(np.linalg.norm(d, "fro"))
    raise ValueError(f"unknown norm {norm!r}")


def project_spectral(vz, vp, czp):
    """Closed-form nearest physical covariance in the spectral norm.

    Shifting by ``delta I`` with ``delta = max(0, sqrt(1/4 + rho^2) - x)``
    (``x`` the mean eigenvalue, ``rho`` the eigen half-gap) lands on the
    ``det = 1/4`` boundary. No feasible matrix is closer: ``C <= M + d I``
    and ``det C >= 1/4`` force ``det(M + d I) >= 1/4``. Vectorized.
    """
    vz, vp, czp = (np.asarray(a, dtype=float) for a in (vz, vp, czp))
    x = 0.5 * (vz + vp)
    rho = np.hypot(0.5 * (vz - vp), czp)
    delta = np.maximum(0.0, np.sqrt(HEISENBERG_DET + rho * rho) - x)
    return vz + delta, vp + delta, czp, delta


def _param_to_cov(v):
    th, s, t = v
    a = 0.5 * math.exp(s + t)
    b = 0.5 * math.exp(s - t)
    c, sn = math.cos(th), math.sin(th)
    return np.array([[a * c * c + b * sn * sn, (a - b) * c * sn],
                     [(a - b) * c * sn, a * sn * sn + b * c * c]])


def _cov_to_param(m):
    w, v = np.linalg.eigh(m)
    a, b = max(w[1], 1e-12), max(w[0], 1e-12)
    th = math.atan2(v[1, 1], v[0, 1])
    s = 0.5 * math.log(4 * a * b)
    t = 0.5 * math.log(a / b)
    return np.array([th, max(s, 0.0), t])


def _search(m: np.ndarray, norm: str, restarts: int, seed: int):
    start = np.array(project_spectral(m[0, 0], m[1, 1], m[0, 1])[:3], dtype=float)
    x0 = _cov_to_param(np.array([[start[0], start[2]], [start[2], start[1]]]))
    rng = np.random.default_rng(seed)
    bounds = [(None, None), (0.0, None), (None, None)]

    def obj(v):
        return _norm(m - _param_to_cov(v), norm)

    best = None
    for k in range(restarts + 1):
        guess = x0 if k == 0 else x0 + rng.normal(0.0, [0.3, 0.3, 0.3])
        guess[1] = max(guess[1], 0.0)
        res = optimize.minimize(obj, guess, method="Powell", bounds=bounds,
                                options={"xtol": 1e-10, "ftol": 1e-12, "maxfev": 20000})
        if best is None or res.fun < best.fun:
            best = res
    c = _param_to_cov(best.x)
    return c, float(best.fun)


@dataclass
class PhysicalCovariance:
    vz: float
    vp: float
    czp: float
    distance: float
    ci95: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    samples: np.ndarray | None = None
    n_draws: int = 0
    seed: int | None = None

    def __post_init__(self):
        if not (self.vz > 0 and self.vp > 0):
            raise ValueError("physical covariance needs positive variances")
        if self.vz * self.vp - self.czp ** 2 < HEISENBERG_DET - 1e-9:
            raise ValueError("covariance violates the uncertainty relation")

    def matrix(self) -> np.ndarray:
        return np.array([[self.vz, self.czp], [self.czp, self.vp]])

    @property
    def eigs(self) -> tuple[float, float]:
        w = np.linalg.eigvalsh(self.matrix())
        return float(w[1]), float(w[0])

    def to_dict(self) -> dict:
        return {
            "vz": self.vz, "vp": self.vp, "czp": self.czp, "distance": self.distance,
            "lambda_max": self.eigs[0], "lambda_min": self.eigs[1],
            "ci95": {k: list(v) for k, v in self.ci95.items()},
            "means": dict(self.means), "n_draws": self.n_draws, "seed": self.seed,
        }


def psd_subtract(c_meas, c_tilde, tol: float = 1e-9, norm: str = "spectral",
                 method: str = "auto", restarts: int = 8, seed: int = 0) -> PhysicalCovariance:
    """Nearest physical covariance to ``c_meas - c_tilde``.

    Parameters
    ----------
    norm : {'spectral', 'frobenius'}
    method : {'auto', 'closed', 'search'}
        ``'closed'`` is exact for the spectral norm. ``'search'`` runs a
        bounded local search over ``R(theta) diag(a, b) R(theta)^T`` with
        ``a b >= 1/4`` from the closed-form point plus ``restarts`` perturbed
        starts; ``'auto'`` picks ``closed`` for the spectral norm.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    m = _sym(c_meas) - _sym(c_tilde)
    if _is_physical(m):
        return PhysicalCovariance(float(m[0, 0]), float(m[1, 1]), float(m[0, 1]), 0.0)
    if method == "auto":
        method = "closed" if norm == "spectral" else "search"
    if method == "closed":
        if norm != "spectral":
            raise ValueError("the closed form only applies to the spectral norm")
        vz, vp, czp, delta = project_spectral(m[0, 0], m[1, 1], m[0, 1])
        c = np.array([[float(vz), float(czp)], [float(czp), float(vp)]])
    elif method == "search":
        c, _ = _search(m, norm, restarts, seed)
    else:
        raise ValueError(f"unknown method {method!r}")
    # land exactly on the feasible side of the boundary
    det = float(np.linalg.det(c))
    if det < HEISENBERG_DET:
        c = c + (math.sqrt(HEISENBERG_DET + (0.5 * (c[0, 0] - c[1, 1])) ** 2 + c[0, 1] ** 2)
                 - 0.5 * np.trace(c)) * np.eye(2)
    return PhysicalCovariance(float(c[0, 0]), float(c[1, 1]), float(c[0, 1]),
                              _norm(m - c, norm))


def _draw_factor(element_cov: np.ndarray, mode: str) -> np.ndarray:
    cov = np.asarray(element_cov, dtype=float)
    if cov.shape == (3,):
        cov = np.diag(np.asarray(cov) ** 2)
    if cov.shape != (3, 3):
        raise ValueError("uncertainties must be three standard errors or a 3x3 covariance")
    if mode == "independent":
        cov = np.diag(np.diag(cov))
    elif mode != "full":
        raise ValueError(f"unknown mode {mode!r}")
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    return v * np.sqrt(np.clip(w, 0.0, None))


def derived_quantities(vz, vp, czp, z_zpf: float) -> dict:
    """Per-draw eigenvalues, coherence length, squeezing and purity."""
    x = 0.5 * (vz + vp)
    rho = np.hypot(0.5 * (vz - vp), czp)
    lmin, lmax = x - rho, x + rho
    det = vz * vp - czp * czp
    return {
        "lambda_min": lmin,
        "lambda_max": lmax,
        "xi_m": z_zpf * np.sqrt(2.0 / lmin),
        "squeezing_db": 10.0 * np.log10(lmin / 0.5),
        "purity": 1.0 / (2.0 * np.sqrt(det)),
    }


def monte_carlo_infer(c_meas, uncertainties, c_tilde, n_draws: int = 3200, seed: int = 0,
                      z_zpf: float = 1e-12, mode: str = "full", norm: str = "spectral",
                      keep_samples: bool = False) -> PhysicalCovariance:
    """Propagate fit uncertainty through the constrained subtraction.

    Covariance-element draws ``(vz, vp, czp)`` are Gaussian around ``c_meas``
    with the given element covariance; each draw is projected and reduced to
    derived quantities, summarised by their mean and 2.5/97.5 percentiles.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    c_meas = _sym(c_meas)
    c_tilde = _sym(c_tilde)
    point = psd_subtract(c_meas, c_tilde, norm=norm)
    factor = _draw_factor(uncertainties, mode)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    xi = rng.standard_normal((n_draws, 3))
    base = np.array([c_meas[0, 0], c_meas[1, 1], c_meas[0, 1]])
    tilde = np.array([c_tilde[0, 0], c_tilde[1, 1], c_tilde[0, 1]])
    draws = base + xi @ factor.T - tilde
    if norm == "spectral":
        vz, vp, czp, _ = project_spectral(draws[:, 0], draws[:, 1], draws[:, 2])
        phys = np.column_stack([vz, vp, czp])
    else:
        phys = np.empty_like(draws)
        for i, (a, b, c) in enumerate(draws):
            r = psd_subtract(np.array([[a, c], [c, b]]), np.zeros((2, 2)), norm=norm, seed=seed + i)
            phys[i] = (r.vz, r.vp, r.czp)
    q = derived_quantities(phys[:, 0], phys[:, 1], phys[:, 2], z_zpf)
    q.update({"vz": phys[:, 0], "vp": phys[:, 1], "czp": phys[:, 2]})
    ci = {k: (float(np.percentile(v, 2.5)), float(np.percentile(v, 97.5))) for k, v in q.items()}
    means = {k: float(np.mean(v)) for k, v in q.items()}
    return PhysicalCovariance(point.vz, point.vp, point.czp, point.distance, ci95=ci, means=means,
                              samples=phys if keep_samples else None, n_draws=n_draws, seed=seed)


def report_coherence(phys: PhysicalCovariance, params: PhysicalParams) -> dict:
    """Coherence length, squeezing and purity of a physical covariance, with
    Monte Carlo intervals when available (generally asymmetric)."""
    cov = phys.matrix()
    out = {
        "xi_m": coherence_length(cov, params),
        "xi_purity_form_m": coherence_length_purity(cov, params),
        "xi_over_ground": coherence_length(cov, params) / (2 * params.z_zpf),
        "squeezing_db": squeezing_db(cov),
        "purity": purity(cov),
        "lambda_max": phys.eigs[0],
        "lambda_min": phys.eigs[1],
    }
    for key in ("xi_m", "squeezing_db", "purity", "lambda_min", "lambda_max"):
        if key in phys.ci95:
            lo, hi = phys.ci95[key]
            out[f"{key}_ci95"] = [lo, hi]
            out[f"{key}_mean"] = phys.means.get(key)
    return out
