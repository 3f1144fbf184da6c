"""Command-line front end.

Each subcommand wraps one library operation and writes its artifacts plus
a ``manifest.json`` into ``--out-dir``.  The manifest records the command
name and the fully resolved flag values; pointing ``--config`` at it
replays the run byte for byte (wall-clock fields are kept out of every
artifact for exactly this reason).  ``--config`` also accepts a bare JSON
object of flag values, which override anything given on the command line.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .calibration import SagModel, build_calibration_grid, grid_to_dict
from .core import default_camera, identity_transform
from .fileio import (export_pgm, load_camera, load_image, load_transform,
                     load_volume, save_camera, save_image, save_transform,
                     save_volume)
from .harness import (AXIS_NAMES, FORMAT_LADDER, NOISE_PRESETS,
                      ExperimentPlan, OffsetDistribution, format_grid,
                      report_dict, report_text, result_table_from_csv,
                      run_clinical_style, run_phantom_matrix,
                      save_landscape_csv, similarity_landscape)
from .phantom import PhantomSpec, generate_phantom
from .projector import DrrConfig, render_drr
from .recon import (RAMP_WINDOWS, Trajectory, add_poisson_noise,
                    fdk_reconstruct, load_run, save_run,
                    simulate_rotational_run)
from .registration import (attach_error, register, result_to_dict,
                           two_stage_register)

_LANDSCAPE_AXES = {"tu": 0, "tv": 1, "ru": 2, "rv": 3, "rw": 4}
_LADDER_TEXT = ",".join(f"{f:g}" for f in FORMAT_LADDER)

# the full-ladder preset: both noise types over every format pair, one
# trial per cell, which is 8 x 8 x 4 x 2 = 512 registrations
_PLAN_PRESETS = {
    "default": {
        "volume_fovs": _LADDER_TEXT,
        "image_fovs": _LADDER_TEXT,
        "run_types": "exposure,fluoro",
        "trials": 1,
    },
}


def _parse_floats(text, name):
    try:
        values = tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError:
        raise ValueError(f"{name} expects comma-separated numbers, got {text!r}")
    if not values:
        raise ValueError(f"{name} is empty")
    return values


def _parse_ints(text, name):
    try:
        values = tuple(int(tok) for tok in str(text).split(",") if tok.strip())
    except ValueError:
        raise ValueError(f"{name} expects comma-separated integers, got {text!r}")
    if not values:
        raise ValueError(f"{name} is empty")
    return values


def _parse_names(text, name):
    values = tuple(tok.strip() for tok in str(text).split(",") if tok.strip())
    if not values:
        raise ValueError(f"{name} is empty")
    return values


def _parse_range(text, name):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise ValueError(f"{name} expects lo:hi, got {text!r}")
    try:
        return float(parts[0]), float(parts[1])
    except ValueError:
        raise ValueError(f"{name} expects numeric lo:hi, got {text!r}")


def _parse_pair(text, name):
    values = _parse_floats(text, name)
    if len(values) != 2:
        raise ValueError(f"{name} expects exactly two numbers, got {text!r}")
    return values


def _jsonable(obj):
    """Recursively coerce to strict JSON; non-finite floats become strings."""
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _dump_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(out_dir, command, config, outputs):
    _dump_json({"command": command, "config": config,
                "outputs": sorted(outputs)}, out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# subcommand handlers: (args, out_dir, log) -> list of relative output names


def _run_phantom(args, out_dir, log):
    spec = PhantomSpec(
        dims=(args.dims,) * 3,
        spacing_mm=args.spacing,
        supersample=args.supersample,
        facial_structures=not args.no_facial,
        vessel_tree=not args.no_vessels,
        contrast_filled=not args.no_contrast,
        seed=args.seed,
        fov_diameter_cm=args.fov,
        allow_partial=args.allow_partial,
    )
    volume = generate_phantom(spec)
    if log:
        log(f"phantom {volume.data.shape} at {args.spacing:g} mm")
    save_volume(volume, out_dir / "phantom")
    return ["phantom.vol.json", "phantom.vol.raw"]


_PHANTOM_DESTS = ("dims", "spacing", "supersample", "fov", "no_facial",
                  "no_vessels", "no_contrast", "allow_partial")


def _phantom_flags(p):
    p.add_argument("--dims", type=int, default=128,
                   help="cubic grid size in voxels (default 128)")
    p.add_argument("--spacing", type=float, default=1.71875,
                   help="voxel size in mm (default 1.71875)")
    p.add_argument("--supersample", type=int, default=2,
                   help="oversampling factor per axis (default 2)")
    p.add_argument("--fov", type=float, default=None,
                   help="field-of-view diameter to stamp on the volume, cm")
    p.add_argument("--no-facial", action="store_true",
                   help="drop the facial structures")
    p.add_argument("--no-vessels", action="store_true",
                   help="drop the vessel tree")
    p.add_argument("--no-contrast", action="store_true",
                   help="leave the vessel tree unfilled")
    p.add_argument("--allow-partial", action="store_true",
                   help="clip shapes that poke out of the grid")


def _run_drr(args, out_dir, log):
    volume = load_volume(args.volume)
    if args.camera is not None:
        camera = load_camera(args.camera)
    else:
        camera = default_camera(args.fov, (args.image_dims,) * 2,
                                args.rotation, args.angulation)
    pose = load_transform(args.pose) if args.pose else None
    cfg = DrrConfig(step_mm=args.step, downsample=args.downsample)
    image = render_drr(volume, camera, patient=pose, cfg=cfg)
    if args.photons is not None and args.photons > 0:
        image = add_poisson_noise(image, args.photons,
                                  np.random.default_rng(args.seed))
    if log:
        log(f"rendered {image.dims} at rotation {camera.carm_rotation_deg:g}")
    save_image(image, out_dir / "drr")
    save_camera(camera, out_dir / "drr.cam.json")
    outputs = ["drr.img.json", "drr.img.raw", "drr.cam.json"]
    if args.pgm:
        export_pgm(image, out_dir / "drr.pgm")
        outputs.append("drr.pgm")
    return outputs


_DRR_DESTS = ("volume", "camera", "fov", "image_dims", "rotation",
              "angulation", "pose", "step", "downsample", "photons", "pgm")


def _drr_flags(p):
    p.add_argument("--volume", default=None, help="volume header (.vol.json)")
    p.add_argument("--camera", default=None,
                   help="camera JSON; omit to build one from the geometry flags")
    p.add_argument("--fov", type=float, default=22.0,
                   help="field-of-view diameter in cm (default 22)")
    p.add_argument("--image-dims", type=int, default=256,
                   help="square detector size in pixels (default 256)")
    p.add_argument("--rotation", type=float, default=0.0,
                   help="C-arm rotation in degrees")
    p.add_argument("--angulation", type=float, default=0.0,
                   help="C-arm angulation in degrees")
    p.add_argument("--pose", default=None,
                   help="patient transform JSON (identity if omitted)")
    p.add_argument("--step", type=float, default=None,
                   help="ray march step in mm (default half the voxel size)")
    p.add_argument("--downsample", type=int, default=1,
                   help="render every n-th pixel block (default 1)")
    p.add_argument("--photons", type=float, default=None,
                   help="photons per pixel for Poisson noise (omit or 0: none)")
    p.add_argument("--pgm", action="store_true",
                   help="also export a 16-bit PGM preview")


def _run_simulate(args, out_dir, log):
    volume = load_volume(args.volume)
    camera = default_camera(args.fov, (args.image_dims,) * 2)
    trajectory = Trajectory(args.frames, args.arc, args.angulation)
    cfg = DrrConfig(step_mm=args.step, downsample=args.downsample)
    photons = args.photons if args.photons and args.photons > 0 else None
    frames = simulate_rotational_run(volume, trajectory, camera=camera,
                                     cfg=cfg, photons=photons, seed=args.seed)
    if log:
        log(f"simulated {len(frames)} frames over {args.arc:g} deg")
    save_run(frames, out_dir / "run")
    outputs = []
    for i in range(len(frames)):
        stem = f"run/frame_{i:04d}"
        outputs += [f"{stem}.img.json", f"{stem}.img.raw", f"{stem}.cam.json"]
    return outputs


_SIMULATE_DESTS = ("volume", "frames", "arc", "angulation", "fov",
                   "image_dims", "photons", "step", "downsample")


def _simulate_flags(p):
    p.add_argument("--volume", default=None, help="volume header (.vol.json)")
    p.add_argument("--frames", type=int, default=120,
                   help="frames along the sweep (default 120)")
    p.add_argument("--arc", type=float, default=200.0,
                   help="sweep arc in degrees (default 200)")
    p.add_argument("--angulation", type=float, default=0.0,
                   help="fixed angulation in degrees")
    p.add_argument("--fov", type=float, default=22.0,
                   help="field-of-view diameter in cm (default 22)")
    p.add_argument("--image-dims", type=int, default=256,
                   help="square detector size in pixels (default 256)")
    p.add_argument("--photons", type=float, default=NOISE_PRESETS["exposure"],
                   help="photons per pixel (0 for noiseless; default 1e6)")
    p.add_argument("--step", type=float, default=None,
                   help="ray march step in mm")
    p.add_argument("--downsample", type=int, default=1,
                   help="render every n-th pixel block")


def _run_reconstruct(args, out_dir, log):
    frames = load_run(args.run)
    volume = fdk_reconstruct(frames, dims=args.dims, spacing_mm=args.spacing,
                             window=args.window, fov_diameter_cm=args.fov)
    if log:
        log(f"reconstructed {volume.data.shape} from {len(frames)} frames")
    save_volume(volume, out_dir / "recon")
    return ["recon.vol.json", "recon.vol.raw"]


_RECONSTRUCT_DESTS = ("run", "dims", "spacing", "window", "fov")


def _reconstruct_flags(p):
    p.add_argument("--run", default=None,
                   help="directory holding frame_NNNN.img/cam files")
    p.add_argument("--dims", type=int, default=96,
                   help="cubic output grid size (default 96)")
    p.add_argument("--spacing", type=float, default=None,
                   help="voxel size in mm (default: fov / dims)")
    p.add_argument("--window", choices=RAMP_WINDOWS, default="ramlak",
                   help="ramp filter window")
    p.add_argument("--fov", type=float, default=None,
                   help="reconstruction diameter in cm (default: camera fov)")


def _run_calibrate(args, out_dir, log):
    sag = SagModel.zero() if args.no_sag else SagModel()
    grid = build_calibration_grid(
        sag,
        camera=default_camera(args.fov),
        rotation_range=_parse_range(args.rotation_range, "--rotation-range"),
        angulation_range=_parse_range(args.angulation_range,
                                      "--angulation-range"),
        spacing_deg=args.spacing_deg,
        marker_circumradius_mm=args.marker_radius,
        noise_px_sigma=args.noise_px,
        seed=args.seed,
    )
    if log:
        log(f"calibrated {len(grid.rotations_deg)} x "
            f"{len(grid.angulations_deg)} grid nodes")
    _dump_json(_jsonable(grid_to_dict(grid)), out_dir / "calibration.json")
    return ["calibration.json"]


_CALIBRATE_DESTS = ("spacing_deg", "rotation_range", "angulation_range",
                    "noise_px", "marker_radius", "no_sag", "fov")


def _calibrate_flags(p):
    p.add_argument("--spacing-deg", type=float, default=20.0,
                   help="grid node spacing in degrees (default 20)")
    p.add_argument("--rotation-range", default="-100:100",
                   help="rotation span lo:hi in degrees (use the = form)")
    p.add_argument("--angulation-range", default="-40:40",
                   help="angulation span lo:hi in degrees (use the = form)")
    p.add_argument("--noise-px", type=float, default=0.0,
                   help="marker localization noise sigma in pixels")
    p.add_argument("--marker-radius", type=float, default=80.0,
                   help="marker phantom circumradius in mm (default 80)")
    p.add_argument("--no-sag", action="store_true",
                   help="calibrate an ideal machine without sag")
    p.add_argument("--fov", type=float, default=22.0,
                   help="camera field of view in cm (default 22)")


def _run_register(args, out_dir, log):
    volume = load_volume(args.volume)
    image = load_image(args.image)
    camera = load_camera(args.camera)
    init = load_transform(args.init) if args.init else identity_transform()
    rng = np.random.default_rng(args.seed)
    if args.single_stage:
        result = register(volume, image, camera, init=init, rng=rng)
    else:
        result = two_stage_register(volume, image, camera, init=init, rng=rng)
    if args.truth is not None:
        truth = load_transform(args.truth)
        result = attach_error(result, truth, camera=camera,
                              criteria=_parse_pair(args.criteria,
                                                   "--criteria"),
                              component=args.component)
    if log:
        log(f"registration finished after {result.evaluations} evaluations")
    payload = result_to_dict(result)
    # wall time varies run to run and would break byte-exact replay
    payload.pop("wall_time_s", None)
    payload["converged"] = bool(result.converged)
    save_transform(result.recovered, out_dir / "recovered.tf.json")
    _dump_json(_jsonable(payload), out_dir / "result.json")
    return ["result.json", "recovered.tf.json"]


_REGISTER_DESTS = ("volume", "image", "camera", "init", "truth", "criteria",
                   "component", "single_stage")


def _register_flags(p):
    p.add_argument("--volume", default=None, help="volume header (.vol.json)")
    p.add_argument("--image", default=None, help="fixed image (.img.json)")
    p.add_argument("--camera", default=None, help="camera JSON")
    p.add_argument("--init", default=None,
                   help="initial transform JSON (identity if omitted)")
    p.add_argument("--truth", default=None,
                   help="ground-truth transform JSON; enables the residual "
                        "report")
    p.add_argument("--criteria", default="1.0,3.0",
                   help="success thresholds 'mm,deg' (default 1.0,3.0)")
    p.add_argument("--component", choices=("total", "in_plane"),
                   default="total",
                   help="translation component judged against the criterion")
    p.add_argument("--single-stage", action="store_true",
                   help="skip the coarse search stage")


def _phantom_override(args):
    overrides = {}
    if args.phantom_dims is not None:
        overrides["dims"] = (args.phantom_dims,) * 3
    if args.phantom_spacing is not None:
        overrides["spacing_mm"] = args.phantom_spacing
    if args.phantom_supersample is not None:
        overrides["supersample"] = args.phantom_supersample
    return replace(PhantomSpec(), **overrides) if overrides else None


def _plan_from_args(args):
    preset = _PLAN_PRESETS[args.plan] if getattr(args, "plan", None) else {}

    def pick(name, fallback):
        value = getattr(args, name)
        return value if value is not None else preset.get(name, fallback)

    return ExperimentPlan(
        volume_fovs_cm=_parse_floats(pick("volume_fovs", _LADDER_TEXT),
                                     "--volume-fovs"),
        image_fovs_cm=_parse_floats(pick("image_fovs", _LADDER_TEXT),
                                    "--image-fovs"),
        run_types=_parse_names(pick("run_types", "exposure"), "--run-types"),
        trials=int(pick("trials", 3)),
        seed=args.seed,
        criteria=_parse_pair(args.criteria, "--criteria"),
        distribution=OffsetDistribution(args.max_translation,
                                        args.max_rotation),
        n_registrations=args.n,
        n_frames=args.frames,
        arc_deg=args.arc,
        volume_dims=args.volume_dims,
        image_dims=args.image_dims,
        recon_dims=args.recon_dims,
        phantom=_phantom_override(args),
    )


def _write_table_reports(table, out_dir):
    table.to_csv(out_dir / "results.csv")
    _dump_json(_jsonable(report_dict(table)), out_dir / "summary.json")
    text = report_text(table)
    (out_dir / "report.txt").write_text(text + "\n")
    print(text)
    return ["results.csv", "summary.json", "report.txt"]


def _run_matrix(args, out_dir, log):
    plan = _plan_from_args(args)
    table = run_phantom_matrix(plan, log=log)
    outputs = _write_table_reports(table, out_dir)
    grids = {"mean_t_err_mm": format_grid(table),
             "pass_rate": format_grid(table, reduce="pass_rate")}
    _dump_json(_jsonable(grids), out_dir / "grid.json")
    return outputs + ["grid.json"]


def _run_clinical(args, out_dir, log):
    plan = _plan_from_args(args)
    table = run_clinical_style(plan, log=log)
    return _write_table_reports(table, out_dir)


_EXPERIMENT_DESTS = ("plan", "volume_fovs", "image_fovs", "run_types",
                     "trials", "criteria", "n", "frames", "arc",
                     "volume_dims", "image_dims", "recon_dims",
                     "max_translation", "max_rotation", "phantom_dims",
                     "phantom_spacing", "phantom_supersample")


def _experiment_flags(p):
    p.add_argument("--plan", choices=sorted(_PLAN_PRESETS), default=None,
                   help="named preset; 'default' runs the full format "
                        "ladder under both noise types (512 rows)")
    p.add_argument("--volume-fovs", default=None,
                   help=f"volume formats in cm, from {{{_LADDER_TEXT}}}")
    p.add_argument("--image-fovs", default=None,
                   help=f"image formats in cm, from {{{_LADDER_TEXT}}}")
    p.add_argument("--run-types", default=None,
                   help="comma list of exposure,fluoro (default exposure)")
    p.add_argument("--trials", type=int, default=None,
                   help="trials per cell (default 3)")
    p.add_argument("--criteria", default="1.0,3.0",
                   help="success thresholds 'mm,deg' (default 1.0,3.0)")
    p.add_argument("--n", type=int, default=200,
                   help="clinical-style registration count (default 200)")
    p.add_argument("--frames", type=int, default=120,
                   help="frames per simulated rotational run (default 120)")
    p.add_argument("--arc", type=float, default=200.0,
                   help="rotational run arc in degrees (default 200)")
    p.add_argument("--volume-dims", type=int, default=128,
                   help="re-voxelized volume grid size (default 128)")
    p.add_argument("--image-dims", type=int, default=256,
                   help="target image size in pixels (default 256)")
    p.add_argument("--recon-dims", type=int, default=96,
                   help="clinical-style reconstruction grid (default 96)")
    p.add_argument("--max-translation", type=float, default=25.0,
                   help="random offset translation cap in mm (default 25)")
    p.add_argument("--max-rotation", type=float, default=10.0,
                   help="random offset rotation cap in degrees (default 10)")
    p.add_argument("--phantom-dims", type=int, default=None,
                   help="override the master phantom grid size")
    p.add_argument("--phantom-spacing", type=float, default=None,
                   help="override the master phantom voxel size in mm")
    p.add_argument("--phantom-supersample", type=int, default=None,
                   help="override the master phantom oversampling")


def _run_landscape(args, out_dir, log):
    volume = load_volume(args.volume)
    image = load_image(args.image)
    camera = load_camera(args.camera)
    names = _parse_names(args.axes, "--axes")
    unknown = [n for n in names if n not in _LANDSCAPE_AXES]
    if unknown:
        raise ValueError(f"unknown landscape axis {unknown[0]!r}; choose "
                         f"from {sorted(_LANDSCAPE_AXES)}")
    axes = tuple(_LANDSCAPE_AXES[n] for n in names)
    steps = _parse_ints(args.steps, "--steps")
    ranges = tuple(_parse_range(tok, "--ranges")
                   for tok in str(args.ranges).split(","))
    init = load_transform(args.init) if args.init else None
    cfg = DrrConfig(step_mm=args.step, downsample=args.downsample)
    result = similarity_landscape(volume, image, camera, axes=axes,
                                  ranges=ranges, steps=steps, init=init,
                                  drr_cfg=cfg)
    if log:
        log(f"swept {result.scores.size} grid points")
    save_landscape_csv(out_dir / "landscape.csv", result)
    peak = result.peak()
    _dump_json(_jsonable({
        "axes": [AXIS_NAMES[a] for a in result.axes],
        "peak_indices": list(peak),
        "peak_coordinates": [float(vals[i]) for vals, i
                             in zip(result.values, peak)],
        "peak_score": float(result.scores[peak]),
        "score_range": [float(result.scores.min()),
                        float(result.scores.max())],
    }), out_dir / "landscape.json")
    return ["landscape.csv", "landscape.json"]


_LANDSCAPE_DESTS = ("volume", "image", "camera", "axes", "steps", "ranges",
                    "init", "step", "downsample")


def _landscape_flags(p):
    p.add_argument("--volume", default=None, help="volume header (.vol.json)")
    p.add_argument("--image", default=None, help="fixed image (.img.json)")
    p.add_argument("--camera", default=None, help="camera JSON")
    p.add_argument("--axes", default="tu,tv",
                   help="comma list from {tu,tv,ru,rv,rw} (default tu,tv)")
    p.add_argument("--steps", default="33,33",
                   help="grid points per axis (default 33,33)")
    p.add_argument("--ranges", default="-15:15,-15:15",
                   help="lo:hi per axis, comma separated (use the = form)")
    p.add_argument("--init", default=None,
                   help="pose the grid is centered on (identity if omitted)")
    p.add_argument("--step", type=float, default=None,
                   help="ray march step in mm")
    p.add_argument("--downsample", type=int, default=1,
                   help="render every n-th pixel block")


def _run_report(args, out_dir, log):
    table = result_table_from_csv(
        args.results,
        criteria=_parse_pair(args.criteria, "--criteria"),
        component=args.component)
    if log:
        log(f"loaded {len(table.rows)} rows")
    _dump_json(_jsonable(report_dict(table)), out_dir / "summary.json")
    text = report_text(table)
    (out_dir / "report.txt").write_text(text + "\n")
    print(text)
    return ["summary.json", "report.txt"]


_REPORT_DESTS = ("results", "criteria", "component")


def _report_flags(p):
    p.add_argument("--results", default=None,
                   help="results.csv from an experiment run")
    p.add_argument("--criteria", default="1.0,3.0",
                   help="success thresholds 'mm,deg' (default 1.0,3.0)")
    p.add_argument("--component", choices=("total", "in_plane"),
                   default="total",
                   help="translation component judged against the criterion")


# ---------------------------------------------------------------------------
# parser assembly and dispatch


def _global_flags(p, leaf):
    # leaf parsers suppress defaults so values parsed at the top level
    # survive the subparser's namespace merge
    d = argparse.SUPPRESS if leaf else None
    p.add_argument("--seed", type=int, default=d,
                   help="master random seed (default 0)")
    p.add_argument("--threads", type=int, default=d,
                   help="cap the compute thread pool")
    p.add_argument("--out-dir", default=d,
                   help="directory all artifacts are written into")
    p.add_argument("--config", default=d,
                   help="JSON file of flag values overriding the command "
                        "line; accepts a manifest.json for replay")
    if leaf:
        p.add_argument("--verbose", action="store_true", default=d,
                       help="progress logging on stderr")
    else:
        p.add_argument("--verbose", action="store_true", default=False,
                       help="progress logging on stderr")


def _leaf(sub, name, help_text, flags, run, dests, command=None,
          required=()):
    p = sub.add_parser(name, help=help_text, description=help_text)
    flags(p)
    _global_flags(p, leaf=True)
    # input-file flags stay optional at parse time so --config can supply
    # them; requiredness is enforced after the config merge
    p.set_defaults(_run=run, _dests=dests, _command=command or name,
                   _required=required)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="carmreg",
        description="Projection rendering, calibration, reconstruction and "
                    "2D/3D registration for C-arm geometries.")
    _global_flags(parser, leaf=False)
    sub = parser.add_subparsers(dest="_top", metavar="COMMAND", required=True)
    _leaf(sub, "phantom", "voxelize a synthetic head volume",
          _phantom_flags, _run_phantom, _PHANTOM_DESTS)
    _leaf(sub, "drr", "render a projection of a volume",
          _drr_flags, _run_drr, _DRR_DESTS, required=("volume",))
    _leaf(sub, "simulate-run", "render a rotational acquisition",
          _simulate_flags, _run_simulate, _SIMULATE_DESTS,
          required=("volume",))
    _leaf(sub, "reconstruct", "filtered backprojection of a rotational run",
          _reconstruct_flags, _run_reconstruct, _RECONSTRUCT_DESTS,
          required=("run",))
    _leaf(sub, "calibrate", "map machine angles to realized geometry",
          _calibrate_flags, _run_calibrate, _CALIBRATE_DESTS)
    _leaf(sub, "register", "align a volume to a fixed projection",
          _register_flags, _run_register, _REGISTER_DESTS,
          required=("volume", "image", "camera"))
    exp = sub.add_parser("experiment", help="batched registration studies")
    exp_sub = exp.add_subparsers(dest="_exp", metavar="KIND", required=True)
    _leaf(exp_sub, "phantom-matrix",
          "format ladder x canonical offsets study",
          _experiment_flags, _run_matrix, _EXPERIMENT_DESTS,
          command="experiment phantom-matrix")
    _leaf(exp_sub, "clinical-style",
          "random offsets against reconstructed runs",
          _experiment_flags, _run_clinical, _EXPERIMENT_DESTS,
          command="experiment clinical-style")
    _leaf(sub, "landscape", "dense similarity sweep around a pose",
          _landscape_flags, _run_landscape, _LANDSCAPE_DESTS,
          required=("volume", "image", "camera"))
    _leaf(sub, "report", "summarize an experiment results.csv",
          _report_flags, _run_report, _REPORT_DESTS, required=("results",))
    return parser


def _apply_config(args):
    if getattr(args, "config", None) is None:
        return
    with open(args.config) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError(f"config must be a JSON object: {args.config}")
    if "command" in payload and "config" in payload:
        if payload["command"] != args._command:
            raise ValueError(
                f"config was written by {payload['command']!r}, not "
                f"{args._command!r}")
        payload = payload["config"]
        if not isinstance(payload, dict):
            raise ValueError(f"malformed manifest config: {args.config}")
    allowed = set(args._dests) | {"seed"}
    for key, value in payload.items():
        if key not in allowed:
            raise ValueError(
                f"unknown config key {key!r} for {args._command}")
        setattr(args, key, value)


def _apply_threads(args):
    if getattr(args, "threads", None) is None:
        return
    import numba
    limit = int(numba.config.NUMBA_NUM_THREADS)
    numba.set_num_threads(max(1, min(int(args.threads), limit)))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return code if isinstance(code, int) else (0 if code is None else 2)
    if getattr(args, "out_dir", None) is None:
        try:
            parser.error("the --out-dir flag is required")
        except SystemExit:
            return 2
    verbose = bool(getattr(args, "verbose", False))
    log = (lambda msg: print(msg, file=sys.stderr)) if verbose else None
    try:
        _apply_threads(args)
        _apply_config(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if verbose:
            traceback.print_exc()
        return 1
    missing = [d for d in getattr(args, "_required", ())
               if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + d.replace("_", "-") for d in missing)
        try:
            parser.error(f"the following arguments are required: {flags}")
        except SystemExit:
            return 2
    try:
        if getattr(args, "seed", None) is None:
            args.seed = 0
        args.seed = int(args.seed)
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if log:
            log(f"{args._command}: writing to {out_dir}")
        outputs = args._run(args, out_dir, log)
        config = {"seed": args.seed}
        for dest in args._dests:
            config[dest] = getattr(args, dest)
        _write_manifest(out_dir, args._command, config, outputs)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        if verbose:
            traceback.print_exc()
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
