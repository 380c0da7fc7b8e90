"""Command-line front end.

Four commands: ``estimate`` (point estimation from a group-summary table),
``crossval`` (threshold selection from raw rows or summaries plus a final
estimate), ``simulate`` (emit a synthetic meta-analysis as re-ingestable
tables), and ``replicate`` (run a named experiment preset).

Every command is deterministic given its flags; commands that draw random
numbers require an explicit ``--seed``. Exit codes: 0 success, 2 input or
validation failure, 3 estimation failure. Output files are written only
after computation finishes.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .crossval import RawUnitData, default_grid, group_means, ivcv_select, sivcv_select
from .errors import EstimationError, MetaIVError, ValidationError
from .estimators import grouped_tsls, regularized_iv
from .model import MetaDataset, NoiseModel, SimulationSpec
from .nulldist import estimate_noise_from_controls
from .presets import PRESET_NAMES, preset_spec, run_preset
from .simgen import simulate_meta
from .tables import (
    read_cov_file,
    read_group_table,
    read_raw_table,
    write_cov_file,
    write_group_table,
    write_matrix_table,
    write_raw_table,
    write_rows,
)

_FMT = lambda v: repr(float(v))


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaiv",
                                description="Causal effects from meta-analyses of randomized experiments.")
    p.add_argument("--version", action="version", version=f"metaiv {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add_grid(sp):
        sp.add_argument("--grid-min", type=float, default=1e-6)
        sp.add_argument("--grid-max", type=float, default=1.0)
        sp.add_argument("--grid-points", type=int, default=25)

    sp = sub.add_parser("estimate", help="grouped TSLS or thresholded IV from a summary table")
    sp.add_argument("--input", required=True, help="group summary table")
    sp.add_argument("--cov", help="per-unit null covariance file")
    sp.add_argument("--q", type=float, default=None, help="p-value threshold in (0, 1]")
    sp.add_argument("--center", action="store_true", help="subtract pooled grand means")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--format", choices=("table", "json"), default="table")

    sp = sub.add_parser("crossval", help="select the threshold by cross-validation")
    sp.add_argument("--input", help="group summary table (summary-statistics mode)")
    sp.add_argument("--raw-input", help="unit-level table (raw-data mode)")
    sp.add_argument("--cov", help="per-unit null covariance file")
    add_grid(sp)
    sp.add_argument("--folds", type=int, default=2)
    sp.add_argument("--n-splits", type=int, default=10)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--center", action="store_true")
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--format", choices=("table", "json"), default="table")

    sp = sub.add_parser("simulate", help="emit a synthetic meta-analysis")
    sp.add_argument("--spec", help="simulation spec JSON file")
    sp.add_argument("--preset", choices=PRESET_NAMES, help="use a preset's design")
    sp.add_argument("--k", type=int, help="override the number of groups")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--emit-raw", action="store_true", help="also write unit rows")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--format", choices=("table", "json"), default="table")

    sp = sub.add_parser("replicate", help="run a named experiment preset")
    sp.add_argument("--preset", required=True)
    sp.add_argument("--replications", type=int, default=None)
    sp.add_argument("--seed", type=int, required=True)
    add_grid(sp)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--format", choices=("table", "json"), default="table")
    return p


def _center(data: MetaDataset) -> MetaDataset:
    """Subtract the pooled grand means of x and y from every group."""
    x = data.x_matrix()
    y = data.y_vector()
    x = x - x.mean(axis=0)
    y = y - y.mean()
    flags = [g.is_control for g in data.groups]
    return MetaDataset.from_arrays(x, y, n_per=data.n_per, ids=list(data.ids()),
                                   is_control=flags)


def _noise_for(data: MetaDataset, cov_path: str | None) -> NoiseModel:
    if cov_path:
        tau = read_cov_file(cov_path)
        if tau.shape[0] != data.dim + 1:
            raise ValidationError("covariance dimension must be dim + 1",
                                  expected=data.dim + 1, got=tau.shape[0])
        return NoiseModel(tau=tau, n_per=data.n_per)
    return estimate_noise_from_controls(data)


def _outdir(path: str | None) -> Path | None:
    if path is None:
        return None
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_record(out: Path | None, name: str, record: dict) -> None:
    # The self-describing record (config echo plus version) is written for
    # every run so results stay auditable next to the tables.
    if out is None:
        return
    (out / f"{name}.json").write_text(json.dumps(record, indent=2) + "\n",
                                      encoding="utf-8")


def _estimate_rows(est) -> list[list[str]]:
    rows = [[f"beta_x{j + 1}", _FMT(b)] for j, b in enumerate(est.beta)]
    rows += [["q", _FMT(est.q)],
             ["groups_retained", str(est.groups_retained)],
             ["condition_number", _FMT(est.condition_number)],
             ["xtx_rank", str(est.xtx_rank)]]
    return rows


def cmd_estimate(args) -> int:
    data = read_group_table(args.input)
    if args.center:
        data = _center(data)
    # No threshold requested is plain grouped TSLS; q = 1 without any noise
    # source also falls back to it (thresholding at 1 needs no covariance
    # unless zero-mean groups must be detected).
    if args.q is None or (args.q == 1.0 and not args.cov and not data.control_groups()):
        est = grouped_tsls(data)
    else:
        noise = _noise_for(data, args.cov)
        est = regularized_iv(data, noise, args.q)
    out = _outdir(args.out)
    record = {"command": "estimate", "version": __version__,
              "config": {"input": args.input, "cov": args.cov, "q": args.q,
                         "center": args.center},
              "estimate": est.to_dict()}
    if out is not None:
        if args.format == "table":
            write_rows(out / "estimate.csv", ["name", "value"], _estimate_rows(est))
        _write_record(out, "estimate", record)
    beta_txt = ", ".join(f"{b:.6g}" for b in est.beta)
    print(f"beta: [{beta_txt}]  q={est.q:g}  retained={est.groups_retained}/{data.k}")
    return 0


def cmd_crossval(args) -> int:
    if bool(args.input) == bool(args.raw_input):
        raise ValidationError("provide exactly one of --input or --raw-input")
    grid = default_grid(args.grid_min, args.grid_max, args.grid_points)

    if args.raw_input:
        raw = read_raw_table(args.raw_input)
        data = group_means(raw)
        if args.center:
            centered = _center(data)
            # Center raw rows with the same grand means so folds stay consistent.
            raw_x = raw.x - data.x_matrix().mean(axis=0)
            raw_y = raw.y - data.y_vector().mean()
            raw = RawUnitData(x=raw_x, y=raw_y, group_ids=raw.group_ids)
            data = centered
        if not args.cov:
            raise ValidationError("raw-data mode needs --cov (unit tables carry no control flags)")
        noise = _noise_for(data, args.cov)
        result = ivcv_select(raw, noise, grid, folds=args.folds, seed=args.seed)
        mode = "ivcv"
    else:
        data = read_group_table(args.input)
        if args.center:
            data = _center(data)
        noise = _noise_for(data, args.cov)
        result = sivcv_select(data, noise, grid, folds=2,
                              n_splits=args.n_splits, seed=args.seed)
        mode = "sivcv"

    final = regularized_iv(data, noise, result.selected_q)
    out = _outdir(args.out)
    record = {"command": "crossval", "version": __version__,
              "config": {"mode": mode, "input": args.input or args.raw_input,
                         "cov": args.cov, "grid_min": args.grid_min,
                         "grid_max": args.grid_max, "grid_points": args.grid_points,
                         "folds": args.folds, "n_splits": args.n_splits,
                         "seed": args.seed, "center": args.center},
              "cv": result.to_dict(), "estimate": final.to_dict()}
    if out is not None:
        if args.format == "table":
            curve_rows = ([_FMT(q), _FMT(l) if ok else "nan"]
                          for q, l, ok in zip(result.grid, result.losses, result.estimable))
            write_rows(out / "curve.csv", ["q", "loss"], curve_rows)
            write_rows(out / "selection.csv",
                       ["selected_q", "folds", "n_splits", "seed"],
                       [[_FMT(result.selected_q), str(result.folds),
                         str(result.n_splits), str(args.seed)]])
            write_rows(out / "estimate.csv", ["name", "value"], _estimate_rows(final))
        _write_record(out, "crossval", record)
    beta_txt = ", ".join(f"{b:.6g}" for b in final.beta)
    print(f"selected_q={result.selected_q:g}  beta: [{beta_txt}]  "
          f"retained={final.groups_retained}/{data.k}")
    return 0


def cmd_simulate(args) -> int:
    if bool(args.spec) == bool(args.preset):
        raise ValidationError("provide exactly one of --spec or --preset")
    if args.spec:
        try:
            payload = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ValidationError(f"cannot read spec file: {exc}", file=args.spec)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"spec file is not valid JSON: {exc}", file=args.spec)
        spec = SimulationSpec.from_dict(payload)
    else:
        spec = preset_spec(args.preset, seed=args.seed)
    updates = {"seed": args.seed}
    if args.k is not None:
        updates["k_groups"] = args.k
    spec = replace(spec, **updates)

    sim = simulate_meta(spec, include_raw=args.emit_raw)
    out = _outdir(args.out)
    write_group_table(out / "summary.csv", sim.dataset)
    write_matrix_table(out / "zbar.csv", sim.zbar_true, prefix="z")
    write_cov_file(out / "tau.csv", sim.noise)
    if args.emit_raw:
        write_raw_table(out / "raw.csv", sim.raw)
    record = {"command": "simulate", "version": __version__,
              "config": {"spec": spec.to_dict(), "emit_raw": args.emit_raw},
              "outputs": ["summary.csv", "zbar.csv", "tau.csv"]
                         + (["raw.csv"] if args.emit_raw else [])}
    _write_record(out, "simulate", record)
    print(f"wrote {sim.dataset.k} groups (dim={spec.dim}, n_per={spec.n_per}) to {out}")
    return 0


def _report_rows(preset: str, reports: dict) -> list[list[str]]:
    rows = []
    for k, rep in sorted(reports.items()):
        rel = rep.relative_to_ols()
        for name, s in rep.estimators.items():
            rows.append([preset, str(k), str(rep.spec.dim), str(rep.replications),
                         name, "", _FMT(s.mean), _FMT(s.sd), str(s.n_ok),
                         str(s.n_failed),
                         _FMT(rel[name]) if name in rel else ""])
        if rep.path_curve:
            for q, s in rep.path_curve.items():
                rows.append([preset, str(k), str(rep.spec.dim), str(rep.replications),
                             "path", _FMT(q), _FMT(s.mean), _FMT(s.sd), str(s.n_ok),
                             str(s.n_failed), ""])
    return rows


def cmd_replicate(args) -> int:
    grid = default_grid(args.grid_min, args.grid_max, args.grid_points)
    kind, result = run_preset(args.preset, args.replications, args.seed, grid)
    out = _outdir(args.out)
    if kind == "curves":
        study = result
        long_rows = []
        for name, mat in study.curves.items():
            for r in range(study.replications):
                for j, q in enumerate(study.grid):
                    long_rows.append([str(r), _FMT(q), name, _FMT(mat[r, j])])
        write_rows(out / "curves.csv", ["replication", "q", "curve", "loss"], long_rows)
        mean_rows = [[_FMT(q)] + [_FMT(study.mean_curves[n][j])
                                  for n in ("ivcv", "causal", "naive_cv", "first_stage")]
                     for j, q in enumerate(study.grid)]
        write_rows(out / "curves_mean.csv",
                   ["q", "ivcv", "causal", "naive_cv", "first_stage"], mean_rows)
        record = {"command": "replicate", "version": __version__,
                  "config": {"preset": args.preset, "replications": study.replications,
                             "seed": args.seed},
                  "argmin": {n: study.argmin_index(n) for n in study.mean_curves},
                  "correlation_with_causal": {n: study.correlation_with_causal(n)
                                              for n in ("ivcv", "naive_cv", "first_stage")}}
        _write_record(out, "replicate", record)
        print(f"{args.preset}: wrote curve tables for {study.replications} replications to {out}")
    else:
        reports = result
        write_rows(out / "report.csv",
                   ["preset", "k_groups", "dim", "replications", "estimator", "q",
                    "mean_causal_mse", "sd_causal_mse", "n_ok", "n_failed",
                    "mean_relative_to_ols"],
                   _report_rows(args.preset, reports))
        record = {"command": "replicate", "version": __version__,
                  "config": {"preset": args.preset, "seed": args.seed},
                  "reports": {str(k): rep.to_dict() for k, rep in reports.items()}}
        _write_record(out, "replicate", record)
        ks = ", ".join(str(k) for k in sorted(reports))
        print(f"{args.preset}: wrote report for K in [{ks}] to {out}")
    return 0


_COMMANDS = {
    "estimate": cmd_estimate,
    "crossval": cmd_crossval,
    "simulate": cmd_simulate,
    "replicate": cmd_replicate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 3
    except MetaIVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
