"""End-to-end synthetic experiment: simulate, condition, retrodict, fit,
calibrate, infer, and write the artifacts of each stage."""
from __future__ import annotations

import contextlib
import csv
import hashlib
import json
import math
import platform
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, preset_config
from .dynamics import (
    composed_two_pulse,
    predict_recompression_energy,
    predict_two_pulse,
    run_protocol,
    stray_noise,
    thermal_state,
)
from .errors import CalibrationError, PipelineError
from .filters import highpass_backward, highpass_phase
from .fitting import (
    CovarianceEstimate,
    VarianceFit,
    VarianceSeries,
    calibrate,
    calibrate_with_gain,
    ensemble_variance,
    fit_energy,
    fit_variance_model,
)
from .inference import PhysicalCovariance, monte_carlo_infer, project_spectral, report_coherence
from .retrodiction import retrodict, steady_state_gains
from .simulate import MeasurementEnsemble, save_ensemble, simulate_ensemble

FIGURES = ("fig2", "fig3", "fig4", "figS8", "figS9")
WIDE_CI_REPS = 30


@contextlib.contextmanager
def stage(name: str):
    """Re-raise any failure inside the block as a :class:`PipelineError`."""
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - tagging, not handling
        raise PipelineError(name, exc) from exc


def _sub_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(key)).generate_state(1)[0])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n")


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for row in rows:
            out.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    out = {"nanodeloc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
           "python": platform.python_version()}
    try:
        import numba

        out["numba"] = numba.__version__
    except ImportError:  # pragma: no cover
        out["numba"] = None
    return out


def write_manifest(out_dir, cfg: ExperimentConfig, extra: dict | None = None) -> dict:
    """List every file under ``out_dir`` with its sha256 (no timestamps, so
    identical runs give identical manifests)."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[p.relative_to(out_dir).as_posix()] = sha256_file(p)
    manifest = {"config_hash": cfg.digest(), "seed": cfg.seed, "versions": versions(),
                "files": files, **(extra or {})}
    write_json(out_dir / "manifest.json", manifest)
    return manifest


# -- single run -----------------------------------------------------------------

@dataclass
class RunResult:
    config: ExperimentConfig
    r: float
    protocol: str
    fit_raw: VarianceFit
    fit: VarianceFit  # after undoing the high-pass phase
    estimate: CovarianceEstimate
    physical: PhysicalCovariance
    coherence: dict
    energy0: float
    series_z: VarianceSeries
    series_p: VarianceSeries
    hp_phase: float
    v_n: float
    flags: list[str] = field(default_factory=list)
    files: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        lmax_se, lmin_se = self.estimate.eig_stderr()
        return {
            "r": self.r, "protocol": self.protocol, "repetitions": self.config.repetitions,
            "seed": self.config.seed,
            "lambda_max": self.estimate.eigs[0], "lambda_min": self.estimate.eigs[1],
            "lambda_max_stderr": lmax_se, "lambda_min_stderr": lmin_se,
            "tilt": self.estimate.tilt, "gamma_fit_zpf": self.fit.gamma_fit * self.estimate.calib_factor,
            "calib_factor": self.estimate.calib_factor, "energy0": self.energy0, "v_n": self.v_n,
            "hp_phase": self.hp_phase, "flags": list(self.flags),
        }


def _valid_until(n: int, dt: float, cfg: ExperimentConfig, retro_mask) -> int:
    """First late-edge sample whose estimate is still inside the high-pass
    warm-up or the retrodiction transient that follows it."""
    warm = int(math.ceil(cfg.filter.warmup() / dt))
    settle = int(np.count_nonzero(retro_mask))
    return max(n - warm - settle, 0)


def analyse(ensemble: MeasurementEnsemble, cfg: ExperimentConfig, r: float, protocol: str,
            out_dir=None) -> RunResult:
    """Every stage after simulation. Writes artifacts when ``out_dir`` is given."""
    params = cfg.params
    dt = ensemble.dt
    flags = []
    files = []
    out = Path(out_dir) if out_dir is not None else None

    with stage("filter"):
        rec = highpass_backward(ensemble.measurement_records(), cfg.filter, dt)
        phase = highpass_phase(cfg.filter, dt, params.omega_m)
    with stage("retrodict"):
        gains = steady_state_gains(params)
        res = retrodict(rec, params, dt, gains)
    t = ensemble.measurement_time()
    with stage("variance"):
        sz = ensemble_variance(res.z, t)
        sp = ensemble_variance(res.p, t, keep_deviations=False)
        valid = _valid_until(len(t), dt, cfg, res.unconverged)
        if valid < len(t) and t[valid - 1] < cfg.fit_window:
            flags.append("fit window extends into unconverged filter output")
        if out is not None:
            for name, s in (("variance_z.csv", sz), ("variance_p.csv", sp)):
                write_csv(out / name, ["time_s", "variance", "sem"], zip(s.time, s.variance, s.sem))
                files.append(name)
    with stage("fit"):
        fit_raw = fit_variance_model(sz, params.omega_m, cfg.fit_window)
        fit = fit_raw.rotated(-phase)
    with stage("calibrate"):
        try:
            est = calibrate(fit, params.gamma_qba, cfg.sigmas.get("gamma_qba", 0.0))
        except CalibrationError as exc:
            est = calibrate_with_gain(fit, cfg.gain)
            flags.append(f"slope calibration failed ({exc}); used known record gain")
        if est.eigs[1] <= 0:
            flags.append("estimated covariance is not positive definite")
        if cfg.repetitions < WIDE_CI_REPS:
            flags.append(f"only {cfg.repetitions} repetitions: confidence intervals are wide")
        est.flags.extend(flags)
        m = sz.time <= cfg.fit_window + 1e-15
        energy = est.calib_factor * 0.5 * (sz.variance[m] + sp.variance[m])
        e0 = fit_energy(sz.time[m], energy, params.gamma_qba)
    with stage("infer"):
        phys = monte_carlo_infer(est.matrix(), est.element_cov, gains.matrix(),
                                 n_draws=cfg.n_draws, seed=cfg.inference_seed,
                                 z_zpf=params.z_zpf, mode=cfg.mc_mode, norm=cfg.norm)
        coh = report_coherence(phys, params)
    result = RunResult(cfg, r, protocol, fit_raw, fit, est, phys, coh, e0, sz, sp, phase,
                       gains.v_z, flags, files)
    if out is not None:
        with stage("report"):
            write_json(out / "fit.json", {"raw": fit_raw.to_dict(), "derotated": fit.to_dict(),
                                          "hp_phase": phase})
            write_json(out / "covariance.json", {**est.to_dict(), "model": model_point(cfg, r, protocol)})
            write_json(out / "coherence.json", {**coh, "physical": phys.to_dict()})
            write_json(out / "summary.json", result.summary())
            files += ["fit.json", "covariance.json", "coherence.json", "summary.json"]
    return result


def run_experiment(cfg: ExperimentConfig, out_dir=None, r: float | None = None,
                   protocol: str | None = None, seed: int | None = None,
                   save_raw: bool = True) -> RunResult:
    """Simulate one ensemble and analyse it."""
    r = cfg.r if r is None else r
    protocol = cfg.protocol if protocol is None else protocol
    if seed is not None:
        cfg = cfg.with_(seed=int(seed))
    cfg = cfg.with_(r=r, protocol=protocol)
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg.to_dict())
    with stage("simulate"):
        ens = simulate_ensemble(cfg.sim_config())
    if out is not None and save_raw:
        with stage("persist"):
            save_ensemble(ens, out / "ensemble.bin")
    result = analyse(ens, cfg, r, protocol, out)
    if out is not None:
        write_manifest(out, cfg)
    return result


# -- model tables -----------------------------------------------------------------

def model_point(cfg: ExperimentConfig, r: float, protocol: str) -> dict:
    params = cfg.params
    v_n = steady_state_gains(params).v_z
    out = {"v_n": v_n}
    if protocol == "two_pulse":
        vz, vp = predict_two_pulse(r, params, v_n)
        cz, cp, cc = composed_two_pulse(r, params, v_n)
        out.update({"vz_th": vz, "vp_th": vp, "vz_composed": cz, "vp_composed": cp,
                    "czp_composed": cc})
    elif protocol == "loop":
        out["energy_th"] = predict_recompression_energy(r, params, v_n)
    else:
        st = run_protocol(thermal_state(params.n_bar), cfg.build_protocol(r), params)
        out.update({"vz_composed": st.vz + v_n, "vp_composed": st.vp + v_n, "czp_composed": st.czp})
    return out


def model_coherence(params, vz_th, vp_th, v_n):
    """Coherence length of the model covariance after subtracting ``v_n``."""
    vz, vp, _, _ = project_spectral(np.asarray(vz_th) - v_n, np.asarray(vp_th) - v_n, 0.0)
    lmin = np.minimum(vz, vp)
    return params.z_zpf * np.sqrt(2.0 / lmin), 10 * np.log10(lmin / 0.5)


def cmd_predict(cfg: ExperimentConfig, r_min: float = 1.0, r_max: float = 3.0,
                steps: int = 40, v_n: float | None = None) -> list[dict]:
    """Closed-form curves over ``r`` with linearly propagated parameter bands."""
    if not 1 <= r_min <= r_max:
        raise ValueError("need 1 <= r_min <= r_max")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    params = cfg.params
    v_n = steady_state_gains(params).v_z if v_n is None else v_n
    rs = np.linspace(r_min, r_max, steps) if steps > 1 else np.array([r_min])

    def curves(p, vn):
        vz, vp = predict_two_pulse(rs, p, vn)
        e = predict_recompression_energy(rs, p, vn)
        return np.vstack([np.atleast_1d(vz), np.atleast_1d(vp), np.atleast_1d(e)])

    base = curves(params, v_n)
    var = np.zeros_like(base)
    for name in ("n_bar", "gamma_qba", "v_n"):
        sigma = cfg.sigmas.get(name, 0.0)
        if not sigma:
            continue
        h = 1e-6 * max(abs(v_n if name == "v_n" else getattr(params, name)), 1.0)
        if name == "v_n":
            d = (curves(params, v_n + h) - base) / h
        else:
            d = (curves(params.replace(**{name: getattr(params, name) + h}), v_n) - base) / h
        var += (d * sigma) ** 2
    sd = np.sqrt(var)
    cz, cp, _ = composed_two_pulse(rs, params, v_n)
    one = stray_noise("one_pulse", rs, params)
    two = stray_noise("two_pulse", rs ** 2, params)
    xi, db = model_coherence(params, base[0], base[1], v_n)
    rows = []
    for i, r in enumerate(rs):
        rows.append({
            "r": float(r), "vz_th": base[0, i], "vz_sigma": sd[0, i], "vp_th": base[1, i],
            "vp_sigma": sd[1, i], "energy_th": base[2, i], "energy_sigma": sd[2, i],
            "vz_composed": float(np.atleast_1d(cz)[i]), "vp_composed": float(np.atleast_1d(cp)[i]),
            "xi_th_m": float(xi[i]), "squeezing_th_db": float(db[i]),
            "sf1_vz": float(np.atleast_1d(one[0])[i]), "sf1_vp": float(np.atleast_1d(one[1])[i]),
            "sf1_czp": float(np.atleast_1d(one[2])[i]),
            "sf2_vz": float(np.atleast_1d(two[0])[i]), "sf2_vp": float(np.atleast_1d(two[1])[i]),
            "sf2_czp": float(np.atleast_1d(two[2])[i]),
        })
    return rows


def write_rows(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("nothing to write")
    header = list(rows[0])
    write_csv(path, header, ([row[k] for k in header] for row in rows))


# -- figure bundles -----------------------------------------------------------------

def loglog_slope(r, y) -> tuple[float, float]:
    """Least-squares slope of ``log y`` against ``log r`` and its standard error."""
    x = np.log(np.asarray(r, dtype=float))
    y = np.log(np.asarray(y, dtype=float))
    a = np.column_stack([x, np.ones_like(x)])
    coef, res, *_ = np.linalg.lstsq(a, y, rcond=None)
    dof = len(x) - 2
    if dof > 0:
        s2 = float(np.sum((y - a @ coef) ** 2) / dof)
        se = math.sqrt(s2 * np.linalg.inv(a.T @ a)[0, 0])
    else:
        se = float("nan")
    return float(coef[0]), se


def _expansion_runs(cfg: ExperimentConfig, r_grid, out: Path | None, tag: str):
    runs = []
    for i, r in enumerate(r_grid):
        sub = None if out is None else out / f"{tag}_r{r:.2f}"
        runs.append(run_experiment(cfg, sub, r=r, protocol="two_pulse",
                                   seed=_sub_seed(cfg.seed, i, 0), save_raw=False))
    return runs


def _loop_runs(cfg: ExperimentConfig, r_grid, out: Path | None, tag: str):
    runs = []
    for i, r in enumerate(r_grid):
        sub = None if out is None else out / f"{tag}_r{r:.2f}"
        runs.append(run_experiment(cfg, sub, r=r, protocol="loop",
                                   seed=_sub_seed(cfg.seed, i, 1), save_raw=False))
    return runs


def fig2_bundle(cfg: ExperimentConfig, out: Path) -> dict:
    run = run_experiment(cfg, out / "run", r=2.45, protocol="two_pulse", save_raw=False)
    s = run.series_z
    model = run.fit_raw.predict(s.time)
    write_csv(out / "fig2_variance.csv", ["time_s", "variance", "sem", "fit"],
              zip(s.time, s.variance, s.sem, model))
    summary = {"figure": "fig2", **run.summary(), "vz0_raw": run.fit_raw.vz0,
               "gamma_fit_raw": run.fit_raw.gamma_fit}
    write_json(out / "fig2.json", summary)
    return summary


def fig3_bundle(cfg: ExperimentConfig, out: Path, tag: str = "fig3") -> dict:
    grid = cfg.r_grid
    exp = _expansion_runs(cfg, grid, out, f"{tag}_expand")
    loop = _loop_runs(cfg, grid, out, f"{tag}_loop")
    v_n = exp[0].v_n
    rows = []
    for r, a, b in zip(grid, exp, loop):
        lmax_se, lmin_se = a.estimate.eig_stderr()
        vz, vp = predict_two_pulse(r, cfg.params, v_n)
        cz, cp, _ = composed_two_pulse(r, cfg.params, v_n)
        rows.append({
            "r": r, "lambda_max": a.estimate.eigs[0], "lambda_max_se": lmax_se,
            "lambda_min": a.estimate.eigs[1], "lambda_min_se": lmin_se,
            "energy": b.energy0, "vz_th": vz, "vp_th": vp, "vz_composed": cz, "vp_composed": cp,
            "energy_th": predict_recompression_energy(r, cfg.params, v_n),
            "tilt": a.estimate.tilt,
        })
    write_rows(out / f"{tag}.csv", rows)
    excess = np.array([row["lambda_max"] for row in rows]) - v_n
    slope, se = (loglog_slope(grid, excess) if np.all(excess > 0) else (float("nan"),) * 2)
    model_slope, _ = loglog_slope(grid, [row["vz_th"] - v_n for row in rows])
    summary = {"figure": tag, "preset": cfg.preset, "v_n": v_n, "loglog_slope": slope,
               "loglog_slope_se": se, "model_loglog_slope": model_slope,
               "rows": rows}
    write_json(out / f"{tag}.json", summary)
    return summary


def fig4_bundle(cfg: ExperimentConfig, out: Path, tag: str = "fig4") -> dict:
    grid = cfg.r_grid
    exp = _expansion_runs(cfg, grid, out, f"{tag}_expand")
    v_n = exp[0].v_n
    rows = []
    for r, a in zip(grid, exp):
        vz, vp = predict_two_pulse(r, cfg.params, v_n)
        xi_th, db_th = model_coherence(cfg.params, vz, vp, v_n)
        c = a.coherence
        lo, hi = c.get("xi_m_ci95", [float("nan")] * 2)
        rows.append({
            "r": r, "xi_m": c["xi_m"], "xi_mean_m": c.get("xi_m_mean", float("nan")),
            "xi_lo_m": lo, "xi_hi_m": hi, "squeezing_db": c["squeezing_db"],
            "xi_th_m": float(xi_th), "squeezing_th_db": float(db_th),
            "ground_xi_m": 2 * cfg.params.z_zpf,
        })
    write_rows(out / f"{tag}.csv", rows)
    summary = {"figure": tag, "preset": cfg.preset, "v_n": v_n, "rows": rows,
               "exceeds_ground": [row["xi_m"] > row["ground_xi_m"] for row in rows]}
    write_json(out / f"{tag}.json", summary)
    return summary


def cmd_reproduce(figure: str, out_dir, cfg: ExperimentConfig | None = None,
                  preset: str = "paper-39dB") -> dict:
    if figure not in FIGURES:
        raise ValueError(f"unknown figure {figure!r}; choose from {FIGURES}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if figure in ("figS8", "figS9"):
        presets = ("paper-20dB", "paper-30dB")
        results = {}
        for name in presets:
            base = preset_config(name) if cfg is None else cfg.with_(
                params=preset_config(name).params, preset=name,
                sigmas=preset_config(name).sigmas)
            fn = fig3_bundle if figure == "figS8" else fig4_bundle
            results[name] = fn(base, out, tag=f"{figure}_{name}")
        summary = {"figure": figure, "datasets": results}
        write_json(out / f"{figure}.json", summary)
        write_manifest(out, cfg or preset_config(presets[0]))
        return summary
    cfg = cfg or preset_config(preset)
    fn = {"fig2": fig2_bundle, "fig3": fig3_bundle, "fig4": fig4_bundle}[figure]
    summary = fn(cfg, out)
    write_manifest(out, cfg)
    return summary
