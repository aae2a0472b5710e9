"""Command-line entry point: ``nanodeloc {predict,run,reproduce,compensate,infer}``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .compensation import CompensationConfig, compensate, residual_displacement, simulate_amplitude_sweep
from .config import PRESETS, ExperimentConfig, load_config, preset_config
from .errors import PipelineError
from .fitting import CovarianceEstimate
from .inference import monte_carlo_infer, report_coherence
from .pipeline import (
    FIGURES,
    cmd_predict,
    cmd_reproduce,
    run_experiment,
    write_json,
    write_manifest,
    write_rows,
)
from .retrodiction import steady_state_gains


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _base_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = preset_config(args.preset)
    changes = {}
    for flag, key in (("r", "r"), ("protocol", "protocol"), ("repetitions", "repetitions"),
                      ("duration", "duration"), ("dt", "dt"), ("gain", "gain"),
                      ("n_draws", "n_draws"), ("fit_window", "fit_window"), ("r_grid", "r_grid")):
        v = getattr(args, flag, None)
        if v is not None:
            changes[key] = v
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    return cfg.with_(**changes) if changes else cfg


def _add_config_args(p, overrides: bool = True):
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", help="experiment config JSON")
    src.add_argument("--preset", default="paper-39dB", choices=sorted(PRESETS),
                     help="named parameter set (default: %(default)s)")
    if overrides:
        p.add_argument("--r", type=float, help="frequency ratio")
        p.add_argument("--protocol", choices=("two_pulse", "one_pulse", "loop", "hold"))
        p.add_argument("--repetitions", type=int)
        p.add_argument("--duration", type=float, help="measurement record length (s)")
        p.add_argument("--dt", type=float, help="sampling step (s)")
        p.add_argument("--gain", type=float, help="record scale")
        p.add_argument("--n-draws", type=int)
        p.add_argument("--fit-window", type=float, help="fit window (s)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nanodeloc",
        description="Simulate and analyse stiffness-pulse delocalization of a levitated particle.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("predict", help="closed-form curves over the frequency ratio")
    _add_config_args(p, overrides=False)
    p.add_argument("--r-min", type=float, default=1.0)
    p.add_argument("--r-max", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--v-n", type=float, help="estimation noise (default: steady-state value)")
    p.add_argument("--out", help="output directory (default: CSV on stdout)")
    p.add_argument("--gnuplot", action="store_true", help="whitespace-separated columns, '#' header")

    p = sub.add_parser("run", help="one synthetic experiment, every stage persisted")
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-raw", action="store_true", help="skip the binary ensemble file")

    p = sub.add_parser("reproduce", help="figure bundle from a preset sweep")
    p.add_argument("figure", choices=FIGURES)
    _add_config_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--r-grid", type=_floats, help="comma-separated ratios")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compensate", help="stray-force compensation sweep")
    _add_config_args(p, overrides=False)
    p.add_argument("--true-f0", type=float, help="planted stray force (rad/s)")
    p.add_argument("--coupling", type=float, help="force per volt ((rad/s)/V)")
    p.add_argument("--v-grid", type=_floats, help="comma-separated voltages")
    p.add_argument("--n-traces", type=int)
    p.add_argument("--r-schedule", type=_floats, default=(1.5, 2.0))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("infer", help="physical covariance and coherence from an estimate JSON")
    _add_config_args(p, overrides=False)
    p.add_argument("--estimate", required=True, help="covariance.json written by 'run'")
    p.add_argument("--n-draws", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("full", "independent"))
    p.add_argument("--norm", choices=("spectral", "frobenius"))
    p.add_argument("--out")
    return parser


def _emit(payload, out_file=None):
    text = json.dumps(payload, sort_keys=True, indent=2, default=float)
    if out_file:
        Path(out_file).write_text(text + "\n")
    print(text)


def _predict(args):
    cfg = _base_config(args)
    rows = cmd_predict(cfg, args.r_min, args.r_max, args.steps, args.v_n)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.gnuplot:
            (out / "predict.dat").write_text(_gnuplot(rows))
        else:
            write_rows(out / "predict.csv", rows)
        write_manifest(out, cfg)
    else:
        sys.stdout.write(_gnuplot(rows) if args.gnuplot else _csv_text(rows))


def _csv_text(rows):
    header = list(rows[0])
    lines = [",".join(header)]
    lines += [",".join(repr(float(row[k])) for k in header) for row in rows]
    return "\n".join(lines) + "\n"


def _gnuplot(rows):
    header = list(rows[0])
    lines = ["# " + " ".join(header)]
    lines += [" ".join(f"{float(row[k]):.10g}" for k in header) for row in rows]
    return "\n".join(lines) + "\n"


def _run(args):
    cfg = _base_config(args)
    res = run_experiment(cfg, args.out, save_raw=not args.no_raw)
    _emit(res.summary())


def _reproduce(args):
    cfg = _base_config(args)
    summary = cmd_reproduce(args.figure, args.out, cfg)
    slim = {k: v for k, v in summary.items() if k not in ("rows", "datasets")}
    _emit(slim)


def _compensate(args):
    cfg = _base_config(args)
    params = cfg.params
    section = dict(cfg.compensation or {})
    true_f0 = args.true_f0 if args.true_f0 is not None else section.pop("true_f0", 2 * params.omega_m)
    section.pop("true_f0", None)
    section.setdefault("coupling", true_f0 / 12.5)
    section.setdefault("v_grid", tuple(np.linspace(0.0, 25.0, 11)))
    if args.coupling is not None:
        section["coupling"] = args.coupling
    if args.v_grid is not None:
        section["v_grid"] = args.v_grid
    if args.n_traces is not None:
        section["n_traces"] = args.n_traces
    comp = CompensationConfig.from_dict(section)
    fits = compensate(comp, true_f0, params, args.seed, r_schedule=args.r_schedule)
    final = fits[-1]
    payload = {
        "true_f0": true_f0, "coupling": comp.coupling,
        "stages": [f.to_dict() for f in fits],
        "v_star": final.v_star, "f0_hat": final.f0_hat,
        "residual_displacement_ratio": residual_displacement(
            true_f0 - comp.coupling * final.v_star, true_f0, params),
    }
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        sweep = simulate_amplitude_sweep(comp.with_(r=args.r_schedule[0]), true_f0, params, args.seed)
        sweep.to_csv(out / "sweep.csv")
        write_json(out / "compensation.json", payload)
        write_manifest(out, cfg.with_(seed=args.seed))
    _emit(payload)


def _infer(args):
    cfg = _base_config(args)
    est = CovarianceEstimate.from_dict(json.loads(Path(args.estimate).read_text()))
    params = cfg.params
    phys = monte_carlo_infer(
        est.matrix(), est.element_cov, steady_state_gains(params).matrix(),
        n_draws=args.n_draws or cfg.n_draws,
        seed=cfg.inference_seed if args.seed is None else args.seed,
        z_zpf=params.z_zpf, mode=args.mode or cfg.mc_mode, norm=args.norm or cfg.norm,
    )
    payload = {**report_coherence(phys, params), "physical": phys.to_dict()}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "inference.json", payload)
    _emit(payload)


_COMMANDS = {"predict": _predict, "run": _run, "reproduce": _reproduce,
             "compensate": _compensate, "infer": _infer}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
