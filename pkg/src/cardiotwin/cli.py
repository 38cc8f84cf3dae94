"""Command-line entry point.

Every subcommand writes into ``--out`` (created if needed). Failures print a
single JSON line on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as cio
from .analysis import average_pv_loop, ed_es_volumes, pv_loop
from .data import ParamBounds, generate_finetune_dataset, generate_pretext_dataset
from .model import LEARNABLE, LvadParams, OmegaSchedule, PatientParams
from .nn import Mlp, TrainConfig
from .plotting import emit_pv_svg, render_pv_png
from .solver import DEFAULT_CYCLES, DEFAULT_STEPS, Trajectory, read_trajectory_csv, simulate_cycles

log = logging.getLogger("cardiotwin")


class UsageError(Exception):
    exit_code = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config -------------------------------------------------------------------

def load_run_config(path, parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from a JSON file; keys are option names, unknown keys are rejected.

    Values given explicitly on the command line win over the file.
    """
    data = cio.read_json(path)
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    known = {a.dest for a in parser._actions if a.dest not in ("help", "config", "command")}
    unknown = sorted(set(k.replace("-", "_") for k in data) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if getattr(args, dest) == parser.get_default(dest):
            setattr(args, dest, value)
    return args


def load_bounds(path) -> ParamBounds:
    """Default box with per-parameter ``[lo, hi]`` overrides read from JSON."""
    if path is None:
        return ParamBounds()
    data = cio.read_json(path)
    unknown = sorted(set(data) - set(LEARNABLE))
    if unknown:
        raise UsageError(f"unknown bounds keys: {unknown}")
    return ParamBounds().with_overrides(data)


def load_params(path) -> PatientParams:
    return PatientParams.reference() if path is None else PatientParams.from_json(Path(path).read_text())


def load_lvad(path, omega) -> LvadParams | None:
    if path is None and omega is None:
        return None
    lvad = LvadParams() if path is None else LvadParams.from_json(Path(path).read_text())
    return lvad if omega is None else lvad.with_omega(OmegaSchedule.constant(omega))


def train_config(args) -> TrainConfig:
    return TrainConfig(lr=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                       optimizer=args.optimizer)


def _levels(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UsageError(f"bad level list {text!r}") from exc


def _figures(loops, labels, out: Path, stem: str, title: str) -> list[str]:
    emit_pv_svg(loops, labels, out / f"{stem}.svg", title)
    render_pv_png(loops, labels, out / f"{stem}.png", title)
    return [f"{stem}.svg", f"{stem}.png"]


def _meta(args, **extra) -> dict:
    skip = {"func", "out"}
    opts = {k: v for k, v in vars(args).items() if k not in skip}
    return {"command": args.command, "options": opts, **extra}


def _loss_csv(path, history, meta):
    cio.write_csv(path, ["epoch", "loss"], [[i + 1, v] for i, v in enumerate(history)], meta)


# -- subcommands ------------------------------------------------------------

def cmd_simulate(args) -> dict:
    params = load_params(args.params)
    lvad = load_lvad(args.lvad, args.omega)
    traj = simulate_cycles(params, lvad, args.cycles, args.steps)
    edes = ed_es_volumes(traj)
    loop = pv_loop(traj)
    meta = _meta(args, params=params.to_dict())
    out = args.out
    (out / "trajectory.csv").write_text(cio.prepend_meta(traj.to_csv(), meta))
    (out / "pv_loop.csv").write_text(cio.prepend_meta(loop.to_csv(), meta))
    figs = _figures([loop], ["LVAD" if lvad else "baseline"], out, "pv_loop", "Final-cycle PV loop")
    summary = {"v_ed": edes.v_ed, "v_es": edes.v_es, "ef": edes.ef, "t_ed": edes.t_ed, "t_es": edes.t_es}
    cio.write_json(out / "summary.json", summary, meta)
    return {"summary": summary, "files": ["trajectory.csv", "pv_loop.csv", "summary.json", *figs]}


def cmd_gen_pretext(args) -> dict:
    ds = generate_pretext_dataset(args.n, load_bounds(args.bounds), args.seed, args.mode, args.cycles, args.steps)
    paths = cio.save_pretext(ds, args.out / args.name)
    return {"n_examples": len(ds), "n_failed": len(ds.failed), "files": [p.name for p in paths]}


def cmd_gen_finetune(args) -> dict:
    ds = generate_finetune_dataset(args.n, load_bounds(args.bounds), args.seed, args.render_seed,
                                   args.noise_sigma, args.cycles, args.steps)
    paths = cio.save_finetune(ds, args.out / args.name)
    return {"n_examples": len(ds), "n_failed": len(ds.failed), "files": [p.name for p in paths]}


def cmd_pretrain(args) -> dict:
    from .pipeline import pretrain_surrogate

    ds = cio.load_pretext(args.data)
    eval_set = cio.load_pretext(args.eval) if args.eval else None
    bounds = load_bounds(args.bounds) if args.bounds else None
    res = pretrain_surrogate(ds, train_config(args), eval_set, bounds)
    meta = _meta(args, data_meta=ds.meta)
    cio.write_json(args.out / "surrogate.json", res.net.to_dict(), meta)
    cio.write_json(args.out / "pretrain_metrics.json", res.metrics, meta)
    _loss_csv(args.out / "pretrain_loss.csv", res.history, meta)
    return {"metrics": res.metrics, "files": ["surrogate.json", "pretrain_metrics.json", "pretrain_loss.csv"]}


def _load_net(path) -> Mlp:
    data = cio.read_json(path)
    data.pop("meta", None)
    return Mlp.from_dict(data)


def cmd_finetune(args) -> dict:
    from .pipeline import finetune_backbone

    ds = cio.load_finetune(args.data)
    phi_m = _load_net(args.surrogate)
    bounds = load_bounds(args.bounds) if args.bounds else None
    res = finetune_backbone(ds, phi_m, train_config(args), bounds, args.cycles, args.steps)
    meta = _meta(args, data_meta=ds.meta)
    cio.write_json(args.out / "backbone.json", res.net.to_dict(), meta)
    cio.write_json(args.out / "finetune_metrics.json", res.metrics, meta)
    _loss_csv(args.out / "finetune_loss.csv", res.history, meta)
    return {"metrics": res.metrics, "files": ["backbone.json", "finetune_metrics.json", "finetune_loss.csv"]}


def _measurement(args) -> tuple[np.ndarray, dict]:
    if args.measurement is not None:
        data = cio.read_json(args.measurement)
        if "y" not in data:
            raise UsageError("measurement JSON needs a 'y' array")
        return np.asarray(data["y"], dtype=float), {}
    if args.data is None:
        raise UsageError("give --measurement FILE or --data CSV with --row INDEX")
    ds = cio.load_finetune(args.data)
    if not 0 <= args.row < len(ds):
        raise UsageError(f"row {args.row} outside 0..{len(ds) - 1}")
    m = ds.measurements[args.row]
    truth = {"v_ed": m.v_ed, "v_es": m.v_es, "theta": dict(zip(LEARNABLE, m.true_theta.tolist()))}
    return m.y, truth


def cmd_predict(args) -> dict:
    from .pipeline import predict_twin

    y, truth = _measurement(args)
    phi_f = _load_net(args.backbone)
    twin = predict_twin(y, phi_f, None, args.cycles, args.steps)
    meta = _meta(args)
    body = {
        "theta_hat": twin.theta_hat.to_dict(),
        "v_ed": twin.edes.v_ed,
        "v_es": twin.edes.v_es,
        "ef": twin.ef,
    }
    if truth:
        body["label"] = truth
    cio.write_json(args.out / "twin.json", body, meta)
    (args.out / "twin_pv_loop.csv").write_text(cio.prepend_meta(twin.pv_loop.to_csv(), meta))
    figs = _figures([twin.pv_loop], ["twin"], args.out, "twin_pv_loop", "Predicted twin PV loop")
    return {"twin": body, "files": ["twin.json", "twin_pv_loop.csv", *figs]}


def cmd_trial(args) -> dict:
    from .pipeline import calibrate_omega, low_ef_cohort, run_lvad_trial
    from .solver import simulate_batch

    bounds = load_bounds(args.bounds)
    cohort = low_ef_cohort(args.cohort_size, bounds, args.seed, args.cycles, args.steps)
    base = LvadParams() if args.lvad is None else LvadParams.from_json(Path(args.lvad).read_text())
    meta = _meta(args)
    files = []
    if args.omega is None:
        cal = calibrate_omega(cohort, base, _levels(args.levels), args.cycles, args.steps)
        trial = cal.trials[-1]
        rows = [[t.omega, t.mean_delta, t.spearman, float(t.backflow_free), len(t.failed)] for t in cal.trials]
        cio.write_csv(args.out / "calibration.csv",
                      ["omega", "mean_delta_ef", "spearman", "backflow_free", "n_failed"], rows, meta)
        files.append("calibration.csv")
    else:
        trial = run_lvad_trial(cohort, base.with_omega(args.omega), args.cycles, args.steps)
    meta["omega"] = trial.omega
    rows = []
    for i, (p, e0, e1) in enumerate(zip(cohort, trial.ef_baseline, trial.ef_lvad)):
        rows.append([i, e0, e1, e1 - e0, *p.theta()])
    cio.write_csv(args.out / "trial.csv",
                  ["patient_id", "ef_baseline", "ef_lvad", "delta_ef", *LEARNABLE], rows, meta)
    edges = np.linspace(0.0, 1.0, 21)
    h0, _ = np.histogram(trial.ef_baseline[trial.ok], edges)
    h1, _ = np.histogram(trial.ef_lvad[trial.ok], edges)
    cio.write_csv(args.out / "ef_histogram.csv", ["ef_lo", "ef_hi", "baseline", "lvad"],
                  [[a, b, c, d] for a, b, c, d in zip(edges[:-1], edges[1:], h0, h1)], meta)
    files += ["trial.csv", "ef_histogram.csv"]

    if args.figures:
        lvad = base.with_omega(trial.omega)
        base_trajs = [t for t in simulate_batch(cohort, None, args.cycles, args.steps) if t is not None]
        lvad_trajs = [t for t in simulate_batch(cohort, lvad, args.cycles, args.steps) if t is not None]
        loops = [average_pv_loop([pv_loop(t) for t in base_trajs]), average_pv_loop([pv_loop(t) for t in lvad_trajs])]
        files += _figures(loops, ["pre-LVAD", f"LVAD omega={trial.omega:g}"], args.out, "trial_pv_loops",
                          "Cohort-average PV loops")
    summary = trial.summary()
    cio.write_json(args.out / "trial_summary.json", summary, meta)
    files.append("trial_summary.json")
    return {"summary": summary, "files": files}


def cmd_sweep(args) -> dict:
    from .pipeline import omega_sweep

    params = load_params(args.params)
    base = LvadParams() if args.lvad is None else LvadParams.from_json(Path(args.lvad).read_text())
    rows = omega_sweep(params, base, _levels(args.levels), args.cycles, args.steps)
    baseline = ed_es_volumes(simulate_cycles(params, None, args.cycles, args.steps))
    meta = _meta(args, params=params.to_dict())
    table = []
    for r in rows:
        v_ed, v_es = (r.edes.v_ed, r.edes.v_es) if r.edes else (float("nan"), float("nan"))
        table.append([r.omega, v_ed, v_es, r.ef])
    cio.write_csv(args.out / "sweep.csv", ["omega", "v_ed", "v_es", "ef"], table, meta)
    good = [r for r in rows if r.loop is not None]
    files = ["sweep.csv"]
    if good:
        files += _figures([r.loop for r in good], [f"omega={r.omega:g}" for r in good], args.out,
                          "sweep_pv_loops", "PV loops across pump speeds")
    summary = {"baseline_ef": baseline.ef, "levels": [r.omega for r in rows],
               "ef": [r.ef for r in rows], "n_failed": len(rows) - len(good)}
    cio.write_json(args.out / "sweep_summary.json", summary, meta)
    files.append("sweep_summary.json")
    return {"summary": summary, "files": files}


def cmd_identify(args) -> dict:
    from .identify import identify_trajectory

    header, table = read_trajectory_csv(Path(args.trajectory).read_text())
    header = list(header)
    states_cols = [c for c in header if c.startswith("x")]
    if header[0] != "t" or states_cols != [f"x{i + 1}" for i in range(5)]:
        raise UsageError("identify needs a baseline trajectory CSV with columns t,x1..x5,p_lv,v_lv")
    t = table[:, 0]
    dt = (t[-1] - t[0]) / (len(t) - 1)
    truth = load_params(args.truth) if args.truth else None
    traj = _TextTrajectory(table[:, 1:6], table[:, header.index("p_lv")], table[:, header.index("v_lv")], dt)
    rec = identify_trajectory(traj, truth, tuple(_levels(args.s_values)), tol=args.tol)
    cio.write_json(args.out / "recovered.json", rec.to_dict(), _meta(args))
    return {"recovered": rec.values, "files": ["recovered.json"]}


class _TextTrajectory:
    """Just the pieces of a trajectory that identification reads."""

    def __init__(self, states, p_lv, v_lv, dt):
        self.states, self.p_lv, self.v_lv, self.dt = states, p_lv, v_lv, dt


def cmd_verify(args) -> dict:
    from .acceptance import run_all

    numbers = None if args.only is None else [int(v) for v in args.only.split(",")]
    results = run_all(numbers=numbers)
    rows = [{"criterion": r.number, "name": r.name, "passed": r.passed, "detail": r.detail,
             "seconds": round(r.seconds, 2)} for r in results]
    cio.write_json(args.out / "verify.json", {"results": rows}, _meta(args))
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    if n_pass != len(results):
        raise VerificationFailed(f"{len(results) - n_pass} criteria failed")
    return {"passed": n_pass}


class VerificationFailed(Exception):
    exit_code = 1


# -- parser -------------------------------------------------------------------

def _solver_opts(p, cycles=DEFAULT_CYCLES, steps=DEFAULT_STEPS):
    p.add_argument("--cycles", type=int, default=cycles, help="cardiac cycles per solve")
    p.add_argument("--steps", type=int, default=steps, help="RK4 steps per cycle")


def _train_opts(p, seed, epochs=300):
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--seed", type=int, default=seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cardiotwin", description="Cardiovascular digital twins: simulate, train, invert, trial.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--config", default=None, help="JSON file of option defaults")
        p.set_defaults(func=func)
        return p

    p = add("simulate", cmd_simulate, "simulate one patient and write trajectory, PV loop and figures")
    p.add_argument("--params", default=None, help="PatientParams JSON (reference values if omitted)")
    p.add_argument("--lvad", default=None, help="LvadParams JSON")
    p.add_argument("--omega", type=float, default=None, help="constant pump speed (enables the LVAD)")
    _solver_opts(p)

    p = add("gen-pretext", cmd_gen_pretext, "generate (theta, V_ED, V_ES) examples")
    p.add_argument("--n", type=int, default=3840)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("uniform", "grid"), default="uniform")
    p.add_argument("--bounds", default=None, help="JSON of {param: [lo, hi]} overrides")
    p.add_argument("--name", default="pretext.csv")
    _solver_opts(p)

    p = add("gen-finetune", cmd_gen_finetune, "generate (measurement, volume label) pairs")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--render-seed", type=int, default=0)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--bounds", default=None)
    p.add_argument("--name", default="finetune.csv")
    _solver_opts(p)

    p = add("pretrain", cmd_pretrain, "train the surrogate on a pretext dataset")
    p.add_argument("--data", required=False, default="pretext.csv")
    p.add_argument("--eval", default=None, help="held-out pretext CSV for metrics")
    p.add_argument("--bounds", default=None)
    _train_opts(p, seed=0)

    p = add("finetune", cmd_finetune, "train the inverse backbone through the frozen surrogate")
    p.add_argument("--data", default="finetune.csv")
    p.add_argument("--surrogate", default="surrogate.json")
    p.add_argument("--bounds", default=None)
    _train_opts(p, seed=1)
    _solver_opts(p)

    p = add("predict", cmd_predict, "predict a twin from one measurement")
    p.add_argument("--backbone", default="backbone.json")
    p.add_argument("--data", default=None, help="finetune CSV to take a row from")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--measurement", default=None, help='JSON {"y": [...]}')
    _solver_opts(p)

    p = add("trial", cmd_trial, "in-silico LVAD trial on a low-EF cohort")
    p.add_argument("--cohort-size", type=int, default=100)
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--omega", type=float, default=None, help="fixed pump speed; calibrated if omitted")
    p.add_argument("--levels", default=",".join(str(w) for w in range(0, 20001, 1000)))
    p.add_argument("--lvad", default=None)
    p.add_argument("--bounds", default=None)
    p.add_argument("--figures", action="store_true", help="also draw cohort-average PV loops")
    _solver_opts(p)

    p = add("sweep", cmd_sweep, "EF and PV loops of one patient across pump speeds")
    p.add_argument("--params", default=None)
    p.add_argument("--lvad", default=None)
    p.add_argument("--levels", default="0,5000,10000,15000,20000")
    _solver_opts(p)

    p = add("identify", cmd_identify, "recover all parameters from a fully observed trajectory CSV")
    p.add_argument("--trajectory", default="trajectory.csv")
    p.add_argument("--truth", default=None, help="PatientParams JSON for error reporting")
    p.add_argument("--s-values", default="2,4,8")
    p.add_argument("--tol", type=float, default=1e-6, help="allowed relative spread of V_LV - x1")

    p = add("verify", cmd_verify, "run the acceptance criteria")
    p.add_argument("--only", default=None, help="comma-separated criterion numbers")
    return parser


def _error_line(command, exc) -> str:
    return json.dumps({"status": "error", "command": command, "type": type(exc).__name__, "message": str(exc)})


def main(argv=None) -> int:
    parser = build_parser()
    command = None
    try:
        args = parser.parse_args(argv)
        command = args.command
        if command is None:
            raise UsageError("a subcommand is required")
        if args.config:
            sub = parser._subparsers._group_actions[0].choices[command]
            args = load_run_config(args.config, sub, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        result = args.func(args)
    except Exception as exc:  # every failure becomes one parseable line
        print(_error_line(command, exc), file=sys.stderr)
        return getattr(exc, "exit_code", 1)
    if command != "verify":
        print(json.dumps({"status": "ok", "command": command, **_short(result)}, default=float))
    return 0


def _short(result: dict) -> dict:
    return {k: v for k, v in result.items() if k in ("files", "summary", "n_examples", "n_failed", "recovered")}


if __name__ == "__main__":
    sys.exit(main())
