"""Ensemble statistics, fits of the post-protocol variance law, and calibration.

After the protocol the mode evolves freely at ``omega_m`` while recoil adds
position variance ``gamma (t - sin(2 w t) / (2 w))``. The variance of the
estimated position is therefore linear in four unknowns once ``w`` is fixed::

    V(t) = Vz0 cos^2(w t) + Vp0 sin^2(w t) + Czp0 sin(2 w t) + gamma (t - sin(2 w t) / (2 w))
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CalibrationError, IllConditionedError

Z95 = 1.959963984540054


@dataclass
class VarianceSeries:
    time: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    sem: np.ndarray
    deviations: np.ndarray | None = None  # (R, N) centred samples, kept for error analysis

    @property
    def repetitions(self) -> int:
        return 0 if self.deviations is None else self.deviations.shape[0]

    def window(self, t_max: float, t_min: float = 0.0) -> "VarianceSeries":
        m = (self.time >= t_min - 1e-15) & (self.time <= t_max + 1e-15)
        dev = None if self.deviations is None else self.deviations[:, m]
        return VarianceSeries(self.time[m], self.mean[m], self.variance[m], self.sem[m], dev)


def ensemble_variance(trajectories, time=None, keep_deviations: bool = True) -> VarianceSeries:
    """Unbiased per-sample variance across repetitions (axis 0)."""
    x = np.asarray(trajectories, dtype=float)
    if x.ndim != 2:
        raise ValueError("expected an (R, N) array")
    r, n = x.shape
    if r < 2:
        raise ValueError("at least two repetitions are needed for a variance")
    mean = x.mean(axis=0)
    dev = x - mean
    var = np.einsum("ij,ij->j", dev, dev) / (r - 1)
    # standard error of the variance from the spread of squared deviations
    sem = (dev ** 2).std(axis=0, ddof=1) / math.sqrt(r) * r / (r - 1)
    t = np.arange(n, dtype=float) if time is None else np.asarray(time, dtype=float)
    return VarianceSeries(t, mean, var, sem, dev if keep_deviations else None)


def ensemble_covariance(z, p, time=None) -> dict:
    """Per-sample unbiased (Vz, Vp, Czp) across repetitions."""
    z = np.asarray(z, dtype=float)
    p = np.asarray(p, dtype=float)
    dz = z - z.mean(axis=0)
    dp = p - p.mean(axis=0)
    r = z.shape[0]
    return {
        "time": None if time is None else np.asarray(time),
        "vz": (dz * dz).sum(axis=0) / (r - 1),
        "vp": (dp * dp).sum(axis=0) / (r - 1),
        "czp": (dz * dp).sum(axis=0) / (r - 1),
    }


def design_matrix(t, omega_m: float) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    wt = omega_m * t
    s2 = np.sin(2 * wt)
    return np.column_stack([np.cos(wt) ** 2, np.sin(wt) ** 2, s2, t - s2 / (2 * omega_m)])


def variance_model(t, vz0, vp0, czp0, gamma, omega_m) -> np.ndarray:
    return design_matrix(t, omega_m) @ np.array([vz0, vp0, czp0, gamma])


@dataclass
class VarianceFit:
    vz0: float
    vp0: float
    czp0: float
    gamma_fit: float
    cov_of_fit: np.ndarray  # order (vz0, vp0, czp0, gamma)
    window: float
    omega_m: float
    method: str = "influence"
    residual_rms: float = float("nan")

    def __post_init__(self):
        if not self.window > 0:
            raise ValueError("window must be > 0")
        c = np.asarray(self.cov_of_fit, dtype=float)
        self.cov_of_fit = 0.5 * (c + c.T)

    @property
    def params(self) -> np.ndarray:
        return np.array([self.vz0, self.vp0, self.czp0, self.gamma_fit])

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov_of_fit), 0.0, None))

    def intervals(self) -> np.ndarray:
        """95% intervals, one row per parameter."""
        half = Z95 * self.stderr
        return np.column_stack([self.params - half, self.params + half])

    def predict(self, t) -> np.ndarray:
        return variance_model(t, *self.params, self.omega_m)

    def rotated(self, theta: float) -> "VarianceFit":
        """Covariance at t = 0 expressed in phase-space axes rotated by ``theta``:
        ``C -> M C M^T`` with ``M = [[cos, sin], [-sin, cos]]``."""
        j = np.eye(4)
        j[:3, :3] = rotation_jacobian(theta)
        new = j @ self.params
        return replace(self, vz0=float(new[0]), vp0=float(new[1]), czp0=float(new[2]),
                       cov_of_fit=j @ self.cov_of_fit @ j.T)

    def to_dict(self) -> dict:
        return {
            "vz0": self.vz0, "vp0": self.vp0, "czp0": self.czp0, "gamma_fit": self.gamma_fit,
            "cov_of_fit": self.cov_of_fit.tolist(), "window": self.window,
            "omega_m": self.omega_m, "method": self.method,
            "intervals95": self.intervals().tolist(), "residual_rms": self.residual_rms,
        }


def rotation_jacobian(theta: float) -> np.ndarray:
    """Linear map of (vz, vp, czp) under ``C -> M C M^T``."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([
        [c * c, s * s, 2 * c * s],
        [s * s, c * c, -2 * c * s],
        [-c * s, c * s, c * c - s * s],
    ])


def _solve(x, y, w):
    sw = np.sqrt(w)
    xw = x * sw[:, None]
    cond = np.linalg.cond(xw)
    if not np.isfinite(cond) or cond > 1e10:
        raise IllConditionedError(
            f"design matrix is ill-conditioned (cond={cond:.3g}); widen the fit window"
        )
    pinv = np.linalg.pinv(xw) * sw[None, :]
    return pinv @ y, pinv


def fit_variance_model(series: VarianceSeries, omega_m: float, window: float = 360e-6,
                       weighting: str = "model", uncertainty: str = "auto") -> VarianceFit:
    """Least-squares fit of the variance law on ``[0, window]``.

    Parameters
    ----------
    weighting : {'model', 'none'}
        ``'model'`` refits with weights ``1 / V_model(t)^2``, the Gaussian
        variance-of-variance, which keeps the large maxima from swamping the
        recoil slope that is best resolved at the minima.
    uncertainty : {'auto', 'influence', 'residual'}
        ``'influence'`` propagates the per-repetition contributions
        (requires deviations); it accounts for the strong correlation between
        time samples. ``'residual'`` scales the normal equations by the
        residual variance.
    """
    if not window > 0:
        raise ValueError("window must be > 0")
    s = series.window(window)
    if s.time.size < 4:
        raise IllConditionedError("fewer than four samples in the fit window")
    if s.time[-1] - s.time[0] < 2 * math.pi / omega_m:
        raise IllConditionedError("fit window shorter than one oscillation period")
    x = design_matrix(s.time, omega_m)
    y = s.variance
    w = np.ones_like(y)
    theta, pinv = _solve(x, y, w)
    if weighting == "model":
        for _ in range(2):
            model = x @ theta
            floor = max(1e-3 * float(np.max(np.abs(model))), 1e-300)
            w = 1.0 / np.maximum(np.abs(model), floor) ** 2
            theta, pinv = _solve(x, y, w)
    elif weighting != "none":
        raise ValueError(f"unknown weighting {weighting!r}")

    resid = y - x @ theta
    method = uncertainty
    if uncertainty == "auto":
        method = "influence" if s.deviations is not None and s.deviations.shape[0] >= 3 else "residual"
    if method == "influence":
        if s.deviations is None:
            raise ValueError("influence uncertainties need the per-repetition deviations")
        r = s.deviations.shape[0]
        contrib = (s.deviations ** 2) @ pinv.T * (r / (r - 1))
        cov = np.cov(contrib, rowvar=False, ddof=1) / r
    elif method == "residual":
        dof = max(len(y) - 4, 1)
        sigma2 = float(np.sum(w * resid ** 2) / dof)
        xw = x * np.sqrt(w)[:, None]
        cov = sigma2 * np.linalg.pinv(xw.T @ xw)
    else:
        raise ValueError(f"unknown uncertainty method {uncertainty!r}")
    return VarianceFit(*map(float, theta), cov_of_fit=cov, window=float(window),
                       omega_m=float(omega_m), method=method,
                       residual_rms=float(np.sqrt(np.mean(resid ** 2))))


def bootstrap_fit(series: VarianceSeries, omega_m: float, window: float = 360e-6,
                  n_resamples: int = 200, seed: int = 0, weighting: str = "model"):
    """Resample repetitions with replacement and refit.

    Returns ``(samples, intervals)`` with percentile 95% intervals per parameter.
    """
    if series.deviations is None:
        raise ValueError("bootstrap needs the per-repetition deviations")
    s = series.window(window)
    rng = np.random.default_rng(seed)
    samples_dev = s.deviations + s.mean  # raw values
    r = samples_dev.shape[0]
    out = np.empty((n_resamples, 4))
    for i in range(n_resamples):
        pick = samples_dev[rng.integers(0, r, r)]
        sub = ensemble_variance(pick, s.time, keep_deviations=False)
        out[i] = fit_variance_model(sub, omega_m, window, weighting, uncertainty="residual").params
    return out, np.percentile(out, [2.5, 97.5], axis=0).T


def estimate_omega_from_series(series: VarianceSeries, omega_guess: float | None = None) -> float:
    """Trap frequency from the peak of the variance spectrum at ``2 omega``.

    A parabolic interpolation of the log-magnitude around the peak refines the
    FFT bin.
    """
    t = series.time
    dt = float(np.median(np.diff(t)))
    y = series.variance - np.polyval(np.polyfit(t, series.variance, 1), t)
    n = 1 << int(math.ceil(math.log2(len(y) * 8)))
    spec = np.abs(np.fft.rfft(y * np.hanning(len(y)), n))
    freqs = np.fft.rfftfreq(n, dt) * 2 * math.pi
    band = freqs > 0
    if omega_guess is not None:
        band &= (freqs > 1.5 * omega_guess) & (freqs < 2.5 * omega_guess)
    idx = np.flatnonzero(band)[np.argmax(spec[band])]
    if 0 < idx < len(spec) - 1:
        a, b, c = np.log(spec[idx - 1:idx + 2] + 1e-300)
        shift = 0.5 * (a - c) / (a - 2 * b + c)
    else:
        shift = 0.0
    return float((freqs[idx] + shift * (freqs[1] - freqs[0])) / 2)


@dataclass
class CovarianceEstimate:
    """Calibrated covariance at t = 0, still including the estimation noise."""

    vz: float
    vp: float
    czp: float
    calib_factor: float
    calib_sigma: float
    element_cov: np.ndarray  # 3x3, order (vz, vp, czp)
    eigs: tuple[float, float] = field(init=False)
    tilt: float = field(init=False)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        lam = np.linalg.eigvalsh(self.matrix())
        self.eigs = (float(lam[1]), float(lam[0]))
        tilt = 0.5 * math.atan2(2 * self.czp, self.vz - self.vp)
        self.tilt = math.pi / 2 if tilt <= -math.pi / 2 else tilt

    def matrix(self) -> np.ndarray:
        return np.array([[self.vz, self.czp], [self.czp, self.vp]])

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.element_cov), 0.0, None))

    def intervals(self) -> dict:
        out = {}
        for name, v, s in zip(("vz", "vp", "czp"), (self.vz, self.vp, self.czp), self.stderr):
            out[name] = (v - Z95 * s, v + Z95 * s)
        return out

    def eig_stderr(self) -> tuple[float, float]:
        """Linearized standard errors of (lambda_max, lambda_min)."""
        w, v = np.linalg.eigh(self.matrix())
        out = []
        for i in (1, 0):
            u = v[:, i]
            grad = np.array([u[0] ** 2, u[1] ** 2, 2 * u[0] * u[1]])
            out.append(float(math.sqrt(max(grad @ self.element_cov @ grad, 0.0))))
        return out[0], out[1]

    def to_dict(self) -> dict:
        return {
            "vz": self.vz, "vp": self.vp, "czp": self.czp,
            "calib_factor": self.calib_factor, "calib_sigma": self.calib_sigma,
            "element_cov": np.asarray(self.element_cov).tolist(),
            "lambda_max": self.eigs[0], "lambda_min": self.eigs[1],
            "lambda_stderr": list(self.eig_stderr()), "tilt": self.tilt,
            "intervals95": {k: list(v) for k, v in self.intervals().items()},
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceEstimate":
        return cls(float(d["vz"]), float(d["vp"]), float(d["czp"]), float(d["calib_factor"]),
                   float(d.get("calib_sigma", 0.0)), np.asarray(d["element_cov"], dtype=float),
                   flags=list(d.get("flags", [])))


def calibrate(fit: VarianceFit, gamma_tot_ref: float, gamma_ref_sigma: float = 0.0) -> CovarianceEstimate:
    """Scale the fit to zero-point units using the known recoil rate.

    The fitted slope is ``gamma_tot_ref`` in zero-point units, so
    ``calib = gamma_tot_ref / gamma_fit`` converts record units squared.
    """
    if not fit.gamma_fit > 0:
        raise CalibrationError(f"fitted recoil slope {fit.gamma_fit:.4g} is not positive")
    if not gamma_tot_ref > 0:
        raise CalibrationError("reference recoil rate must be positive")
    g = fit.gamma_fit
    calib = gamma_tot_ref / g
    a = fit.params[:3]
    # d(calib * a) / d(vz0, vp0, czp0, gamma, gamma_ref)
    jac = np.zeros((3, 5))
    jac[:, :3] = calib * np.eye(3)
    jac[:, 3] = -calib * a / g
    jac[:, 4] = a / g
    src = np.zeros((5, 5))
    src[:4, :4] = fit.cov_of_fit
    src[4, 4] = gamma_ref_sigma ** 2
    elem = jac @ src @ jac.T
    calib_var = (calib / g) ** 2 * fit.cov_of_fit[3, 3] + (gamma_ref_sigma / g) ** 2
    return CovarianceEstimate(*(calib * a).tolist(), calib_factor=calib,
                              calib_sigma=math.sqrt(calib_var), element_cov=elem)


def calibrate_with_gain(fit: VarianceFit, record_scale: float) -> CovarianceEstimate:
    """Fallback when the slope cannot be used: divide by the known scale of
    the retrodicted trajectories relative to zero-point units (the record
    gain, since the filter already removes ``sqrt(8 Gamma_meas)``)."""
    calib = 1.0 / record_scale ** 2
    jac = np.zeros((3, 4))
    jac[:, :3] = calib * np.eye(3)
    elem = jac @ fit.cov_of_fit @ jac.T
    return CovarianceEstimate(*(calib * fit.params[:3]).tolist(), calib_factor=calib,
                              calib_sigma=0.0, element_cov=elem, flags=["known-gain calibration"])


def fit_energy(time, energy, gamma_qba: float, window: float | None = None) -> float:
    """Initial energy ``E0`` of ``E(t) = E0 + gamma t`` with the slope fixed."""
    t = np.asarray(time, dtype=float)
    e = np.asarray(energy, dtype=float)
    if window is not None:
        m = t <= window + 1e-15
        t, e = t[m], e[m]
    if t.size == 0:
        raise ValueError("no samples in the energy window")
    return float(np.mean(e - gamma_qba * t))
