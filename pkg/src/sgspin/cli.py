"""Command line front end.

Subcommands:
  field   build the geometry + field grid cache, export slice CSVs
  run     execute an ensemble, write runs/flip_curve/slices CSVs
  stats   re-aggregate statistics from an existing runs.csv
  diag    flux-dominance check and approach-line drive-ratio profile

Exit codes: 0 ok, 2 config error, 3 field/geometry error, 4 I/O error.
Summaries go to stdout, logs to stderr; given the same config and seed all
file outputs are byte-identical.
"""

import argparse
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from .carrier import measure_sigma_y
from .config import default_config, parse_config
from .errors import (InvalidGeometry, OutOfBounds, ParseError,
                     QuadratureFailure, ValidationError)
from .experiment import (FluxCheckInput, drive_ratio_profile, flip_statistics,
                         flux_dominance_check, initial_hemisphere,
                         run_ensemble, run_single, sample_initial_conditions)
from .field import DirectField, UniformField, sample as field_sample
from .geometry import build_geometry
from .grid import FieldGrid, build_field_grid, default_corridor

SLICE_HEADER = "x,y,z,Bx,By,Bz,dBzdz,dBzdy,dBydz,div,curl_x,curl_y,curl_z"
RUNS_HEADER = ("run_index,phi_i,theta_i,beta_i,beta_f,class,exit_y,exit_z,"
               "det_y,det_z,max_drive_ratio,flags")
FLIP_HEADER = "phi_i,p_flip_measured,p_flip_quantum,n_runs,n_unresolved"
SLICES_HEADER = "theta_lo,theta_hi,phi_i,p_flip"
TRAJ_HEADER = "t,x,y,z,vx,vy,vz,phi,theta,beta,Fy,Fz,drive_ratio"


def _log(msg):
    print(f"[sgspin] {msg}", file=sys.stderr)


def _fmt(v):
    return repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def build_parser():
    p = argparse.ArgumentParser(
        prog="sgspin",
        description="Semi-classical spin-moment dynamics in a Stern-Gerlach "
                    "device: field building, Monte Carlo ensembles, statistics "
                    "and diagnostics.")
    p.add_argument("--config", metavar="PATH",
                   help="JSON config file (defaults apply when omitted)")
    p.add_argument("--output-dir", metavar="DIR",
                   help="override output.dir from the config")
    p.add_argument("--seed", type=int, help="override experiment.seed")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for ensemble runs and grid fills")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("field", help="build the field grid cache and slices")
    f.add_argument("--slice", choices=("yz", "xz", "xy"), action="append",
                   default=[], help="export a plane slice CSV (repeatable)")
    f.add_argument("--at-x", default="0.5L",
                   help="x position for yz slices; accepts meters or "
                        "fractions of L like '0.5L'")
    f.add_argument("--at-y", default="0.0", help="y position for xz slices")
    f.add_argument("--at-z", default="0.0", help="z position for xy slices")
    f.add_argument("--divergence-profile", action="store_true",
                   help="export dBz/dz etc along y at (L/2, y, 0)")

    r = sub.add_parser("run", help="run the configured ensemble")
    r.add_argument("--phi-steps", type=int, help="override experiment.phi_steps")
    r.add_argument("--reps", type=int, help="override experiment.reps_per_phi")
    r.add_argument("--direct-field", action="store_true",
                   help="evaluate the field by direct quadrature instead of "
                        "the grid cache (slow; small ensembles only)")

    s = sub.add_parser("stats", help="re-aggregate an existing runs.csv")
    s.add_argument("--runs-csv", metavar="PATH",
                   help="input runs.csv (default <output-dir>/runs.csv)")

    d = sub.add_parser("diag", help="diagnostics")
    d.add_argument("--flux", action="store_true",
                   help="emit the flux-dominance check JSON")
    d.add_argument("--drive-profile", action="store_true",
                   help="emit the approach-line |Bx|/|Bz| profile CSV")
    return p


def _load_config(args):
    cfg = parse_config(args.config) if args.config else default_config()
    if args.output_dir is not None:
        cfg.output.dir = args.output_dir
        cfg.effective["output"]["dir"] = args.output_dir
    if args.seed is not None:
        cfg.sim.seed = args.seed
        cfg.effective["experiment"]["seed"] = args.seed
    if getattr(args, "phi_steps", None) is not None:
        cfg.sim.phi_steps = args.phi_steps
        cfg.effective["experiment"]["phi_steps"] = args.phi_steps
    if getattr(args, "reps", None) is not None:
        cfg.sim.reps_per_phi = args.reps
        cfg.effective["experiment"]["reps_per_phi"] = args.reps
    return cfg


def _prepare_outdir(cfg):
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.json").write_text(cfg.effective_json())
    return out


def _parse_coord(text, L):
    text = text.strip()
    if text.endswith("L"):
        return float(text[:-1] or "1") * L
    return float(text)


def _geometry(cfg):
    return build_geometry(cfg.sim.geometry, include_top=cfg.include_top,
                          include_bottom=cfg.include_bottom)


def _grid_path(cfg, out):
    return Path(cfg.field_opts.cache_path) if cfg.field_opts.cache_path \
        else out / "field_grid.sgfg"


def _build_grid(cfg, geometry, threads):
    import numba
    if threads is not None:
        numba.set_num_threads(int(threads))
    fo = cfg.field_opts
    bbox = default_corridor(cfg.sim.geometry, (fo.pad_x, fo.pad_y, fo.pad_z),
                            fo.grid_spacing)
    t0 = time.perf_counter()
    grid = build_field_grid(geometry, bbox, fo.grid_spacing,
                            rel_tol=fo.rel_tol, max_depth=fo.max_depth)
    _log(f"grid fill: {grid.n_nodes} nodes in {time.perf_counter() - t0:.1f} s")
    return grid


def _slice_rows(source, points):
    rows = []
    for p in points:
        s = field_sample(source, p)
        j = s.jacobian
        c = s.curl
        rows.append(tuple(_fmt(v) for v in (
            p[0], p[1], p[2], s.B[0], s.B[1], s.B[2],
            j[2, 2], j[2, 1], j[1, 2], s.divergence, c[0], c[1], c[2])))
    return rows


def _axis_points(grid, axis):
    lo, hi = grid.bbox
    n = int(grid.dims[axis])
    return np.linspace(lo[axis], hi[axis], n)


def cmd_field(cfg, args):
    out = _prepare_outdir(cfg)
    geometry = _geometry(cfg)
    grid = _build_grid(cfg, geometry, args.threads)
    cache = _grid_path(cfg, out)
    grid.save(cache)
    _log(f"grid cache written to {cache}")

    L = cfg.sim.geometry.L
    for plane in args.slice:
        if plane == "yz":
            x0 = _parse_coord(args.at_x, L)
            pts = [np.array([x0, y, z])
                   for z in _axis_points(grid, 2) for y in _axis_points(grid, 1)]
            name = out / "slice_yz.csv"
        elif plane == "xz":
            y0 = _parse_coord(args.at_y, L)
            pts = [np.array([x, y0, z])
                   for z in _axis_points(grid, 2) for x in _axis_points(grid, 0)]
            name = out / "slice_xz.csv"
        else:
            z0 = _parse_coord(args.at_z, L)
            pts = [np.array([x, y, z0])
                   for y in _axis_points(grid, 1) for x in _axis_points(grid, 0)]
            name = out / "slice_xy.csv"
        _write_csv(name, SLICE_HEADER, _slice_rows(grid, pts))
        _log(f"slice written to {name}")

    if args.divergence_profile:
        direct = DirectField(geometry, cfg.field_opts.rel_tol,
                             cfg.field_opts.max_depth)
        span = cfg.sim.geometry.gap_height / 2.0 + cfg.field_opts.pad_y * 0.9
        ys = np.linspace(-span, span, 201)
        pts = [np.array([L / 2.0, y, 0.0]) for y in ys]
        name = out / "divergence_profile.csv"
        _write_csv(name, SLICE_HEADER, _slice_rows(direct, pts))
        _log(f"divergence profile written to {name}")

    print(f"field: {len(geometry.panels)} panels, grid {tuple(int(d) for d in grid.dims)} "
          f"nodes -> {cache}")
    return 0


def _resolve_run_field(cfg, args, out):
    if cfg.field_opts.uniform_B is not None:
        _log(f"uniform field source {cfg.field_opts.uniform_B}")
        return UniformField(cfg.field_opts.uniform_B)
    geometry = _geometry(cfg)
    if getattr(args, "direct_field", False):
        _log("direct quadrature field source (no grid cache)")
        return DirectField(geometry, cfg.field_opts.rel_tol, cfg.field_opts.max_depth)
    cache = _grid_path(cfg, out)
    if cache.exists():
        _log(f"loading grid cache {cache}")
        return FieldGrid.load(cache)
    _log(f"grid cache {cache} missing; building it")
    grid = _build_grid(cfg, geometry, args.threads)
    grid.save(cache)
    return grid


def _runs_rows(runs):
    rows = []
    for r in runs:
        rows.append((
            str(r.run_index), _fmt(r.phi_i), _fmt(r.theta_i),
            _fmt(r.initial_beta), _fmt(r.final_beta), r.classification,
            _fmt(r.exit_state.position[1]), _fmt(r.exit_state.position[2]),
            _fmt(r.detector_hit[0]), _fmt(r.detector_hit[1]),
            _fmt(r.max_drive_ratio), "|".join(sorted(r.flags))))
    return rows


def _write_statistics(out, flip_curve, slices):
    _write_csv(out / "flip_curve.csv", FLIP_HEADER,
               [( _fmt(r[0]), _fmt(r[1]), _fmt(r[2]), str(int(r[3])), str(int(r[4])))
                for r in flip_curve])
    _write_csv(out / "slices.csv", SLICES_HEADER,
               [tuple(_fmt(v) for v in row) for row in slices])


def cmd_run(cfg, args):
    out = _prepare_outdir(cfg)
    field = _resolve_run_field(cfg, args, out)
    t0 = time.perf_counter()
    result = run_ensemble(cfg.sim, field=field, threads=args.threads,
                          hist_bins=cfg.output.hist_bins)
    wall = time.perf_counter() - t0

    _write_csv(out / "runs.csv", RUNS_HEADER, _runs_rows(result.runs))
    _write_statistics(out, result.flip_curve, result.azimuthal_slices)

    if cfg.output.trajectory_decimation > 0 and cfg.output.trajectories_max > 0:
        n_dump = min(cfg.output.trajectories_max, cfg.sim.n_runs)
        for i in range(n_dump):
            ic = sample_initial_conditions(cfg.sim, i)
            _, rows = run_single(ic, cfg.sim, field,
                                 record_every=cfg.output.trajectory_decimation)
            _write_csv(out / f"trajectory_{i:05d}.csv", TRAJ_HEADER,
                       [tuple(_fmt(v) for v in row) for row in rows])
        _log(f"wrote {n_dump} trajectory dumps")

    n = len(result.runs)
    unresolved = result.n_unresolved
    flagged = sum(1 for r in result.runs if r.flags)
    flips = sum(1 for r in result.runs
                if r.classification not in ("Unresolved",)
                and r.classification != initial_hemisphere(r.phi_i))
    max_curl_proxy = max((r.max_drive_ratio for r in result.runs
                          if math.isfinite(r.max_drive_ratio)), default=0.0)
    print(f"ensemble: {n} runs, {flips} flips, {unresolved} unresolved, "
          f"{flagged} flagged, max drive ratio {max_curl_proxy:.3g}, "
          f"wall {wall:.1f} s")
    print(f"outputs in {out}")
    return 0


def cmd_stats(cfg, args):
    out = _prepare_outdir(cfg)
    path = Path(args.runs_csv) if args.runs_csv else out / "runs.csv"
    runs = _read_runs_csv(path)
    flip_curve, slices = flip_statistics(runs, theta_bands=cfg.sim.theta_bands)
    _write_statistics(out, flip_curve, slices)
    print(f"stats: re-aggregated {len(runs)} runs from {path}")
    return 0


def _read_runs_csv(path):
    from .experiment import RunResult
    from .carrier import CarrierState
    runs = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RUNS_HEADER:
            raise ValidationError(f"{path}: unexpected runs.csv header")
        for line in fh:
            f = line.rstrip("\n").split(",")
            runs.append(RunResult(
                run_index=int(f[0]), phi_i=float(f[1]), theta_i=float(f[2]),
                initial_beta=float(f[3]), final_beta=float(f[4]),
                classification=f[5],
                exit_state=CarrierState(
                    position=np.array([0.0, float(f[6]), float(f[7])]),
                    velocity=np.array([1.0, 0.0, 0.0])),
                detector_hit=(float(f[8]), float(f[9])),
                max_drive_ratio=float(f[10]),
                flags=set(f[11].split("|")) if f[11] else set()))
    return runs


def cmd_diag(cfg, args):
    out = _prepare_outdir(cfg)
    did = False
    if args.flux:
        check = flux_dominance_check(FluxCheckInput())
        path = out / "flux_check.json"
        path.write_text(json.dumps(check, indent=2, sort_keys=True) + "\n")
        print(f"flux check: ratio {check['ratio']:.3g} -> {check['verdict']} ({path})")
        did = True
    if args.drive_profile:
        geometry = _geometry(cfg)
        field = DirectField(geometry, cfg.field_opts.rel_tol,
                            cfg.field_opts.max_depth)
        rows = drive_ratio_profile(field, cfg.sim.geometry)
        path = out / "drive_profile.csv"
        _write_csv(path, "x,ratio", [(_fmt(x), _fmt(r)) for x, r in rows])
        n_above = int(np.sum(rows[:, 1] > 1.0))
        print(f"drive profile: {n_above}/{len(rows)} points with ratio > 1 ({path})")
        did = True
    if not did:
        _log("nothing to do: pass --flux and/or --drive-profile")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "field":
            return cmd_field(cfg, args)
        if args.command == "run":
            return cmd_run(cfg, args)
        if args.command == "stats":
            return cmd_stats(cfg, args)
        return cmd_diag(cfg, args)
    except (ParseError, ValidationError, ValueError) as e:
        _log(f"config error: {e}")
        return 2
    except (InvalidGeometry, QuadratureFailure, OutOfBounds) as e:
        _log(f"field error: {e}")
        return 3
    except OSError as e:
        _log(f"io error: {e}")
        return 4


if __name__ == "__main__":
    sys.exit(main())
