"""Batch command line: ``oscidal <subcommand> --config <file>``.

Exit codes: 0 success, 1 numeric failure (bound or monotonicity violation,
failed sweep points), 2 usage/config/input error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import dump_config, load_config, parse_config
from .errors import CorruptCheckpoint, InvalidConfig, NonFiniteLoss, OscidalError, SingularMatrix
from .io import atomic_write_text, read_csv, write_csv
from .metrics import (
    bound_report,
    discrete_seminorm,
    inverse_norm_estimate,
    operator_norm_estimate,
    spectrum_grid,
    spectrum_relative_error,
)
from .mgdl import GradeRecord, GradeStack, prepare, run_amgdl, run_sgdl
from .net import LayerParams, dumps_checkpoint, loads_checkpoint
from .operator import (
    assemble_matrix,
    collocation_grid,
    DiscreteOperator,
    estimate_quadrature_error,
    quad_node_count,
    reference_solve,
    write_matrix_dump,
)
from .problem import compute_rhs, exact_values

log = logging.getLogger("oscidal")

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3

GRADE_COLUMNS = ["grade", "train_loss", "val_loss", "residual_norm", "RE",
                 "lower", "upper", "measured", "seconds"]
BOUND_COLUMNS = ["grade", "residual_norm", "R_hat", "norm_M", "norm_M_inv", "lower",
                 "upper", "measured_error", "lower_ok", "upper_ok", "monotone_ok"]
MONOTONE_SLACK = 1e-12


class UsageError(Exception):
    pass


def discretize(cfg, use_cache=True):
    return prepare(cfg.problem, cfg.quadrature, n_val=cfg.validation_points,
                   val_seed=cfg.validation_seed, oversample=cfg.oversample,
                   use_cache=use_cache)


# ---------------------------------------------------------------------------
# reference-solve / dump-matrix
# ---------------------------------------------------------------------------


def reference_report(cfg):
    """Direct solve of ``M v = f``; returns ``(op, M, solution, report dict)``."""
    op = DiscreteOperator.build(cfg.problem, cfg.quadrature)
    M = assemble_matrix(op)
    f = compute_rhs(cfg.problem, op.grid, cfg.oversample)
    v = reference_solve(M, f)
    y = exact_values(cfg.problem.exact, op.grid)
    R_hat = estimate_quadrature_error(cfg.problem, cfg.quadrature)
    inv = inverse_norm_estimate(M)
    res = np.linalg.norm(M @ v.values - f.values) / np.linalg.norm(f.values)
    report = {
        "p_kappa": op.p_kappa,
        "N": op.n,
        "RE_collocation": float(np.linalg.norm(v.values - y) / np.linalg.norm(y)),
        "error_seminorm": discrete_seminorm(v.values - y),
        "relative_residual": float(res),
        "R_hat": R_hat,
        "norm_M_inv": inv,
        "error_bound": inv * 2.0 * R_hat,
    }
    return op, M, v, report


def cmd_reference_solve(cfg, out, dry_run=False):
    p = quad_node_count(cfg.quadrature, cfg.problem.kappa)
    n = p * cfg.quadrature.q + 1
    if dry_run:
        print(f"p_kappa={p} N={n}")
        return EXIT_OK
    op, M, v, report = reference_report(cfg)
    y = exact_values(cfg.problem.exact, op.grid)
    write_csv(out / "reference_solution.csv", ["x", "re", "im", "exact_re", "exact_im"],
              zip(op.grid.tolist(), v.re.tolist(), v.im.tolist(), y.real.tolist(), y.imag.tolist()))
    write_csv(out / "reference_report.csv", ["key", "value"], report.items())
    for k, val in report.items():
        print(f"{k}={val}")
    return EXIT_OK


def cmd_dump_matrix(cfg, out):
    op = DiscreteOperator.build(cfg.problem, cfg.quadrature)
    M = assemble_matrix(op)
    path = out / "matrix.bin"
    write_matrix_dump(path, M)
    print(f"wrote {path} ({M.n}x{M.n})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_name(mode, bs, lr, seed):
    return f"{mode}-bs{bs}-lr{lr:g}-seed{seed}"


def grade_shapes(widths, mode):
    """Printed layer shapes, e.g. ``[1] -> [256]_F -> [256] -> [2]`` for grade 2."""
    if mode == "sgdl":
        return ["[1] -> " + " -> ".join(f"[{w}]" for w in widths) + " -> [2]"]
    return ["[1] -> " + "".join(f"[{w}]_F -> " for w in widths[:j]) + f"[{widths[j]}] -> [2]"
            for j in range(len(widths))]


def _bounds_for(disc, y_grids, residual_norms):
    R_hat = estimate_quadrature_error(disc.problem, disc.op.config)
    nM = operator_norm_estimate(disc.M)
    nMi = inverse_norm_estimate(disc.M)
    out = []
    for g, (yg, rn) in enumerate(zip(y_grids, residual_norms), start=1):
        measured = discrete_seminorm(disc.y_exact - yg)
        out.append(bound_report(g, rn, R_hat, nM, nMi, measured))
    return out


def execute_run(cfg_text, mode, batch_size, lr, seed, run_dir):
    """Train one (sweep point, seed) and write its directory. Worker entry."""
    cfg = parse_config(cfg_text)
    cfg = replace(cfg, train=replace(cfg.train, batch_size=batch_size, lr_initial=lr, seed=seed))
    cfg = replace(cfg, amgdl=cfg.amgdl_config())
    run_dir = Path(run_dir)
    disc = discretize(cfg)
    if mode == "amgdl":
        run = run_amgdl(disc, cfg.amgdl)
        for rec in run.grades:
            atomic_write_text(run_dir / f"grade_{rec.grade:02d}.json",
                              dumps_checkpoint(rec.hidden_params + [rec.head_params],
                                               cfg.amgdl.omega0 if rec.grade == 1 else cfg.amgdl.omega_hidden,
                                               seed, extra={"grade": rec.grade}))
    else:
        run = run_sgdl(disc, cfg.sgdl_widths(), cfg.train, omega0=cfg.amgdl.omega0,
                       omega_hidden=cfg.amgdl.omega_hidden, eval_every=cfg.amgdl.eval_every)
        atomic_write_text(run_dir / "network.json",
                          dumps_checkpoint(run.params, cfg.amgdl.omega0, seed, extra={"grade": 1}))
    bounds = []
    if disc.problem.exact.kind != "none":
        bounds = _bounds_for(disc, [r.y_grid for r in run.grades], [r.residual_norm for r in run.grades])
    rows = []
    for i, rec in enumerate(run.grades):
        b = bounds[i] if bounds else None
        rows.append([rec.grade, rec.train_loss, rec.val_loss, rec.residual_norm, rec.re,
                     b and b.lower, b and b.upper, b and b.measured_error, rec.wall_seconds])
    write_csv(run_dir / "grades.csv", GRADE_COLUMNS, rows)
    atomic_write_text(run_dir / "config.cfg", dump_config(cfg))
    meta = {
        "mode": mode,
        "seed": seed,
        "batch_size": batch_size,
        "lr_initial": lr,
        "grades": len(run.grades),
        "selected": run.selected,
        "stop_reason": run.stop_reason,
        "threshold": run.threshold,
        "architecture": grade_shapes(cfg.sgdl_widths() if mode == "sgdl"
                                     else cfg.amgdl.widths[:len(run.grades)], mode),
    }
    atomic_write_text(run_dir / "run.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return {
        "name": run_dir.name,
        "seed": seed,
        "batch_size": batch_size,
        "lr_initial": lr,
        "selected": run.selected,
        "stop_reason": run.stop_reason,
        "rows": [{"grade": r.grade, "train_loss": r.train_loss, "val_loss": r.val_loss,
                  "residual_norm": r.residual_norm, "RE": r.re, "seconds": r.wall_seconds}
                 for r in run.grades],
    }


def _job(args):
    try:
        return execute_run(*args)
    except (OscidalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return {"name": Path(args[-1]).name, "error": f"{type(exc).__name__}: {exc}",
                "batch_size": args[2], "lr_initial": args[3], "seed": args[4]}


def cmd_train(cfg, mode, out, parallel=None, seed_override=None):
    if seed_override is not None:
        cfg = replace(cfg, seeds=(seed_override,))
    text = dump_config(cfg)
    jobs = []
    for bs, lr in cfg.sweep_points():
        for seed in cfg.seeds:
            jobs.append((text, mode, bs, lr, seed, str(out / "runs" / run_name(mode, bs, lr, seed))))
    workers = parallel or cfg.parallel or os.cpu_count() or 1
    workers = max(1, min(workers, len(jobs)))
    if workers == 1:
        results = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_job, jobs))

    failed = [r for r in results if "error" in r]
    ok = [r for r in results if "error" not in r]
    if failed:
        write_csv(out / "failures.csv", ["name", "batch_size", "lr_initial", "seed", "error"], failed)
    if not ok:
        print("all runs failed; see failures.csv", file=sys.stderr)
        return EXIT_NUMERIC

    def sel(r):
        return r["rows"][r["selected"] - 1]

    points = {}
    for r in ok:
        points.setdefault((r["batch_size"], r["lr_initial"]), []).append(r)
    sweep_rows = []
    for (bs, lr), rs in points.items():
        mean_val = float(np.mean([sel(r)["val_loss"] for r in rs]))
        sweep_rows.append({"batch_size": bs, "lr_initial": lr, "runs": len(rs),
                           "mean_val_loss": mean_val})
    best = min(sweep_rows, key=lambda r: r["mean_val_loss"])
    for r in sweep_rows:
        r["best"] = r is best
    write_csv(out / "sweep.csv", ["batch_size", "lr_initial", "runs", "mean_val_loss", "best"], sweep_rows)

    summary, timings = [], []
    for r in ok:
        for row in r["rows"]:
            timings.append([r["name"], row["grade"], row["seconds"]])
        if (r["batch_size"], r["lr_initial"]) != (best["batch_size"], best["lr_initial"]):
            continue
        for row in r["rows"]:
            summary.append([mode, r["batch_size"], r["lr_initial"], r["seed"], row["grade"],
                            row["train_loss"], row["val_loss"], row["RE"],
                            row["grade"] == r["selected"]])
    write_csv(out / "summary.csv", ["mode", "batch_size", "lr_initial", "seed", "grade",
                                    "train_loss", "val_loss", "RE", "selected"], summary)
    write_csv(out / "timings.csv", ["run", "grade", "seconds"], timings)
    atomic_write_text(out / "experiment.cfg", text)
    print(f"{len(ok)} run(s) written to {out}; best batch_size={best['batch_size']} "
          f"lr_initial={best['lr_initial']:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# verify / spectrum
# ---------------------------------------------------------------------------


def load_run(run_dir):
    """Rebuild a trained run from its directory.

    Returns ``(cfg, disc, stack_or_params, meta)``; raises
    :class:`CorruptCheckpoint` on unreadable checkpoints and
    :class:`UsageError` when the directory is not a run directory.
    """
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.cfg"
    meta_path = run_dir / "run.json"
    if not cfg_path.is_file() or not meta_path.is_file():
        raise UsageError(f"{run_dir} is not a run directory (config.cfg and run.json required)")
    cfg = parse_config(cfg_path.read_text())
    try:
        meta = json.loads(meta_path.read_text())
    except ValueError as exc:
        raise CorruptCheckpoint(f"{meta_path}: {exc}") from exc
    disc = discretize(cfg)
    if meta.get("mode") == "sgdl":
        layers, _ = loads_checkpoint(_read(run_dir / "network.json"))
        return cfg, disc, layers, meta
    stack = GradeStack(disc)
    for g in range(1, int(meta["grades"]) + 1):
        layers, _ = loads_checkpoint(_read(run_dir / f"grade_{g:02d}.json"))
        rec = GradeRecord(g, layers[:-1], layers[-1], True, math.nan, math.nan, math.nan, 0.0)
        stack.append(rec)
        rec.residual_norm = stack.residual_norm()
        rec.train_loss = rec.residual_norm**2
    return cfg, disc, stack, meta


def _read(path):
    try:
        return Path(path).read_text()
    except FileNotFoundError as exc:
        raise CorruptCheckpoint(f"missing checkpoint {path}") from exc


def verify_run(run_dir):
    """Recompute residuals and bounds of one run; returns ``(ok, bound rows)``."""
    cfg, disc, state, meta = load_run(run_dir)
    if isinstance(state, GradeStack):
        y_grids = [r.y_grid for r in state.grades]
        norms = [r.residual_norm for r in state.grades]
    else:
        from .mgdl import _complex_out

        z = _complex_out(state, disc.grid[:, None])
        y_grids = [z]
        norms = [discrete_seminorm(disc.f - disc.M.entries @ z)]
    reports = _bounds_for(disc, y_grids, norms)
    rows, ok = [], True
    for i, rep in enumerate(reports):
        mono = i == 0 or norms[i] <= norms[i - 1] * (1.0 + MONOTONE_SLACK)
        ok &= bool(mono and rep.upper_ok)
        rows.append([rep.grade, rep.residual_norm, rep.R_hat, rep.norm_M, rep.norm_M_inv,
                     rep.lower, rep.upper, rep.measured_error, rep.lower_ok, rep.upper_ok, mono])
    write_csv(Path(run_dir) / "bounds.csv", BOUND_COLUMNS, rows)
    return ok, rows


def _run_dirs(path):
    path = Path(path)
    if (path / "run.json").is_file() or (path / "config.cfg").is_file():
        return [path]
    if (path / "runs").is_dir():
        return sorted(p for p in (path / "runs").iterdir() if p.is_dir())
    raise UsageError(f"{path} holds neither a run nor an experiment")


def cmd_verify(path):
    ok_all = True
    for d in _run_dirs(path):
        ok, rows = verify_run(d)
        ok_all &= ok
        status = "ok" if ok else "FAILED"
        print(f"{d.name}: {status} ({len(rows)} grade(s))")
    return EXIT_OK if ok_all else EXIT_NUMERIC


def cmd_spectrum(path):
    for d in _run_dirs(path):
        cfg, disc, state, meta = load_run(d)
        s = spectrum_grid()
        if isinstance(state, GradeStack):
            Y = state.evaluate(s, upto=meta["selected"])
        else:
            from .mgdl import _complex_out

            Y = _complex_out(state, s[:, None])
        spec = spectrum_relative_error(exact_values(cfg.problem.exact, s), Y)
        write_csv(d / "spectrum.csv", ["freq", "rel_err", "defined_flag"],
                  zip(spec.freq.tolist(), [None if np.isnan(v) else float(v) for v in spec.rel_err],
                      spec.defined.tolist()))
        print(f"{d.name}: wrote spectrum.csv")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    ap = argparse.ArgumentParser(prog="oscidal", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"oscidal {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="config file or preset name")
        p.add_argument("--output", help="output directory (default: [run] output_dir)")

    p = sub.add_parser("reference-solve", help="direct LU solve of the discrete system")
    with_config(p)
    p.add_argument("--dry-run", action="store_true", help="print p_kappa and N only")
    p = sub.add_parser("train", help="train AMGDL or SGDL over the sweep and seeds")
    with_config(p)
    p.add_argument("--mode", choices=("amgdl", "sgdl"), default="amgdl")
    p.add_argument("--seed-override", type=int)
    p.add_argument("--parallel", type=int)
    p = sub.add_parser("verify", help="recheck residual monotonicity and error bounds")
    p.add_argument("run_dir")
    p = sub.add_parser("spectrum", help="frequency-domain relative error of trained runs")
    p.add_argument("run_dir")
    p = sub.add_parser("dump-matrix", help="write M as a binary dump")
    with_config(p)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("verify", "spectrum"):
            fn = cmd_verify if args.command == "verify" else cmd_spectrum
            return fn(args.run_dir)
        cfg = load_config(args.config)
        out = Path(args.output or cfg.output_dir)
        if args.command == "reference-solve":
            return cmd_reference_solve(cfg, out, dry_run=args.dry_run)
        if args.command == "dump-matrix":
            return cmd_dump_matrix(cfg, out)
        return cmd_train(cfg, args.mode, out, parallel=args.parallel,
                         seed_override=args.seed_override)
    except (UsageError, InvalidConfig, FileNotFoundError) as exc:
        print(f"oscidal: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CorruptCheckpoint as exc:
        print(f"oscidal: corrupt checkpoint: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularMatrix, NonFiniteLoss) as exc:
        print(f"oscidal: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"oscidal: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
