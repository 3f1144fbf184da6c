"""Experiment orchestration: format matrices, clinical-style loops, stats.

Two runners produce flat result tables.  run_phantom_matrix sweeps the
format ladder for reconstruction and overlay image against a fixed set
of start offsets; run_clinical_style registers random frames of
simulated rotational runs against their own reconstructions under
random start offsets, paired across a contrast-filled and a contrast-free
patient.  Rows carry the recovered and true poses in full, so every
residual in a table can be recomputed from the table alone.

All randomness is rooted in the plan seed through named SeedSequence
streams; rerunning a plan reproduces its table bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .core import (
    RigidTransform,
    camera_frame,
    default_camera,
    euler_xyz,
    identity_transform,
)
from .phantom import PhantomSpec, crop_to_fov, generate_phantom
from .projector import DrrConfig, render_drr
from .recon import Trajectory, add_poisson_noise, ground_truth_pairs
from .registration import (
    _prepare,
    apply_increment,
    attach_error,
    two_stage_register,
)

__all__ = [
    "AXIS_NAMES",
    "COLUMNS",
    "FORMAT_LADDER",
    "NOISE_PRESETS",
    "ROTATION_BIN_EDGES",
    "TRANSLATION_BIN_EDGES",
    "ExperimentPlan",
    "Histogram",
    "LandscapeResult",
    "OffsetDistribution",
    "ResultTable",
    "clinical_pass_rates",
    "clinically_relevant",
    "format_grid",
    "histogram",
    "phantom_at_fov",
    "report_dict",
    "report_text",
    "result_table_from_csv",
    "run_clinical_style",
    "run_phantom_matrix",
    "sample_offset",
    "save_landscape_csv",
    "similarity_landscape",
    "success_rates",
    "summarize",
    "table1_offsets",
    "transform_from_columns",
    "transform_to_columns",
]

# acquisition format diameters offered by the machine, in cm
FORMAT_LADDER = (15.0, 19.0, 22.0, 27.0, 31.0, 37.0, 42.0, 48.0)

# photons per unattenuated detector pixel for the two acquisition modes
NOISE_PRESETS = {"exposure": 1.0e6, "fluoro": 5.0e4}

# residual histogram edges: dense where the criteria live, coarse beyond
TRANSLATION_BIN_EDGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9,
                         1.0, 2.0, 5.0, math.inf)
ROTATION_BIN_EDGES = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 5.0, 10.0, math.inf)

AXIS_NAMES = ("tu_mm", "tv_mm", "ru_deg", "rv_deg", "rw_deg")

COLUMNS = (
    "experiment", "run_type", "volume_fov_cm", "image_fov_cm", "offset_id",
    "patient", "frame_idx", "trial", "clinically_relevant",
    "carm_rotation_deg", "carm_angulation_deg", "image_dims",
    "offset_tx_mm", "offset_ty_mm", "offset_tz_mm",
    "offset_rx_deg", "offset_ry_deg", "offset_rz_deg",
    "recovered_tx_mm", "recovered_ty_mm", "recovered_tz_mm",
    "recovered_rx_deg", "recovered_ry_deg", "recovered_rz_deg",
    "truth_tx_mm", "truth_ty_mm", "truth_tz_mm",
    "truth_rx_deg", "truth_ry_deg", "truth_rz_deg",
    "t_err_mm", "r_err_deg", "in_plane_mm", "out_of_plane_mm",
    "pass_t", "pass_r", "pass_both",
    "score", "evaluations", "seed", "offset_seed",
    "insufficient", "error",
)

_STR_COLUMNS = frozenset(
    {"experiment", "run_type", "offset_id", "patient", "error"})
_INT_COLUMNS = frozenset(
    {"frame_idx", "trial", "clinically_relevant", "image_dims",
     "pass_t", "pass_r", "pass_both", "evaluations", "seed",
     "offset_seed", "insufficient"})

# named sub-streams hanging off the plan seed
_STREAM_MATRIX = 1
_STREAM_NOISE = 2
_STREAM_CLINICAL = 3
_STREAM_SIMULATE = 4


def _derive_seed(*parts) -> int:
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class OffsetDistribution:
    """Random start misalignments: uniform length and angle magnitudes,
    uniform directions and axes on the sphere."""

    max_translation_mm: float = 25.0
    max_rotation_deg: float = 10.0

    def __post_init__(self):
        if self.max_translation_mm <= 0.0 or self.max_rotation_deg <= 0.0:
            raise ValueError("offset magnitudes must be positive")


@dataclass(frozen=True)
class ExperimentPlan:
    """Everything a runner needs, desk-scale knobs included.

    The matrix runner reads the fov lists, offsets, run types and trials;
    the clinical-style runner reads the distribution, registration count
    and run-simulation fields.  ``phantom`` overrides the master anatomy
    (None picks the default landmark-rich head).
    """

    volume_fovs_cm: tuple = FORMAT_LADDER
    image_fovs_cm: tuple = FORMAT_LADDER
    run_types: tuple = ("exposure",)
    trials: int = 3
    seed: int = 0
    criteria: tuple = (1.0, 3.0)
    offsets: tuple | None = None  # None uses table1_offsets()
    distribution: OffsetDistribution = OffsetDistribution()
    n_registrations: int = 200
    n_frames: int = 120
    arc_deg: float = 200.0
    volume_dims: int = 128
    image_dims: int = 256
    recon_dims: int = 96
    phantom: PhantomSpec | None = None

    def __post_init__(self):
        ladder = set(FORMAT_LADDER)
        for fovs in (self.volume_fovs_cm, self.image_fovs_cm):
            if not fovs or any(f not in ladder for f in fovs):
                raise ValueError(
                    f"format diameters must come from the ladder {FORMAT_LADDER}")
        if not self.run_types or any(r not in NOISE_PRESETS
                                     for r in self.run_types):
            raise ValueError(
                f"run types must be drawn from {sorted(NOISE_PRESETS)}; "
                "got an unknown or empty run type list")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.n_registrations < 1:
            raise ValueError("n_registrations must be >= 1")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if len(self.criteria) != 2 or any(c <= 0 for c in self.criteria):
            raise ValueError("criteria must be positive (mm, deg) bounds")
        if min(self.volume_dims, self.image_dims, self.recon_dims) < 8:
            raise ValueError("grid dims must be at least 8")


def table1_offsets() -> tuple:
    """The four canonical start misalignments.

    Two 1 cm displacements (axial and oblique), one 5 degree rotation,
    and a combined translation plus three-axis rotation.
    """
    return (
        RigidTransform(np.eye(3), (10.0, 0.0, 0.0)),
        RigidTransform(np.eye(3), (-8.0, 6.0, 0.0)),
        RigidTransform(euler_xyz(5.0, 0.0, 0.0), (0.0, 0.0, 0.0)),
        RigidTransform(euler_xyz(2.0, 3.0, 4.0), (4.0, 4.0, 0.0)),
    )


def clinically_relevant(volume_fov_cm, image_fov_cm) -> bool:
    """Both formats at least 22 cm and the volume at least as wide as the
    image; overlaying a small reconstruction on a larger image is out."""
    return bool(volume_fov_cm >= 22.0 and image_fov_cm >= 22.0
                and volume_fov_cm >= image_fov_cm)


def sample_offset(dist: OffsetDistribution, seed=None) -> RigidTransform:
    """One random start pose; deterministic per seed (a Generator passes
    through, so batch draws can share a stream)."""
    rng = np.random.default_rng(seed)
    length = rng.uniform(0.0, dist.max_translation_mm)
    direction = _unit_vector(rng)
    angle = rng.uniform(0.0, dist.max_rotation_deg)
    axis = _unit_vector(rng)
    rot = Rotation.from_rotvec(axis * math.radians(angle)).as_matrix()
    return RigidTransform(rot, length * direction)


def _unit_vector(rng) -> np.ndarray:
    while True:
        v = rng.normal(size=3)
        n = float(np.linalg.norm(v))
        if n > 1e-12:
            return v / n


def transform_to_columns(t: RigidTransform, prefix: str) -> dict:
    """Six flat columns (translation mm, rotation vector deg) for a pose."""
    rv = Rotation.from_matrix(t.rotation).as_rotvec(degrees=True)
    tr = t.translation_mm
    return {
        f"{prefix}_tx_mm": float(tr[0]),
        f"{prefix}_ty_mm": float(tr[1]),
        f"{prefix}_tz_mm": float(tr[2]),
        f"{prefix}_rx_deg": float(rv[0]),
        f"{prefix}_ry_deg": float(rv[1]),
        f"{prefix}_rz_deg": float(rv[2]),
    }


def transform_from_columns(row: dict, prefix: str) -> RigidTransform:
    rv = np.array([float(row[f"{prefix}_rx_deg"]),
                   float(row[f"{prefix}_ry_deg"]),
                   float(row[f"{prefix}_rz_deg"])])
    tr = (float(row[f"{prefix}_tx_mm"]), float(row[f"{prefix}_ty_mm"]),
          float(row[f"{prefix}_tz_mm"]))
    rot = Rotation.from_rotvec(rv, degrees=True).as_matrix()
    return RigidTransform(rot, tr)


@dataclass(frozen=True)
class ResultTable:
    """Flat registration records plus the criteria they were judged by."""

    rows: tuple
    criteria: tuple = (1.0, 3.0)
    component: str = "total"

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for row in self.rows:
                writer.writerow([_format_cell(row[c]) for c in COLUMNS])
        return path


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)  # shortest round-trip representation
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def _parse_cell(column: str, text: str):
    if column in _STR_COLUMNS:
        return text
    if text == "":
        return ""
    if column in _INT_COLUMNS:
        return int(text)
    return float(text)


def result_table_from_csv(path, criteria=(1.0, 3.0),
                          component="total") -> ResultTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != COLUMNS:
            raise ValueError(f"unexpected result table header in {path}")
        rows = tuple({c: _parse_cell(c, v) for c, v in zip(header, line)}
                     for line in reader)
    return ResultTable(rows, tuple(criteria), component)


def _new_row() -> dict:
    return {c: "" for c in COLUMNS}


def _row_measured(row) -> bool:
    if row.get("error", ""):
        return False
    try:
        return (math.isfinite(float(row["t_err_mm"]))
                and math.isfinite(float(row["r_err_deg"])))
    except (TypeError, ValueError):
        return False


def _row_relevant(row) -> bool:
    flag = row.get("clinically_relevant", 1)
    return int(flag) == 1 if flag != "" else True


def _stat_leaf(rows) -> dict:
    out = {}
    for metric, key in (("translation_mm", "t_err_mm"),
                        ("rotation_deg", "r_err_deg")):
        vals = np.array([float(r[key]) for r in rows], dtype=np.float64)
        if vals.size:
            out[metric] = {"mean": float(vals.mean()),
                           "std": float(vals.std()),
                           "min": float(vals.min()),
                           "max": float(vals.max()),
                           "n": int(vals.size)}
        else:
            out[metric] = {"mean": math.nan, "std": math.nan,
                           "min": math.nan, "max": math.nan, "n": 0}
    return out


def summarize(table: ResultTable) -> dict:
    """Residual moments over {all, successful} x {all, relevant} rows.

    Rows that errored out (or never produced a residual) are excluded
    from the moments and counted in ``n_errors``; "successful" means the
    strict pass of both criteria.
    """
    if not table.rows:
        raise ValueError("cannot summarize an empty result table")
    measured = [r for r in table.rows if _row_measured(r)]
    successful = [r for r in measured if int(r["pass_both"] or 0) == 1]
    out = {
        "n_rows": len(table.rows),
        "n_errors": sum(1 for r in table.rows if r.get("error", "")),
        "criteria": {"translation_mm": table.criteria[0],
                     "rotation_deg": table.criteria[1],
                     "component": table.component},
    }
    for split, rows in (("all", measured), ("successful", successful)):
        out[split] = {
            "all": _stat_leaf(rows),
            "clinically_relevant": _stat_leaf(
                [r for r in rows if _row_relevant(r)]),
        }
    return out


@dataclass(frozen=True)
class Histogram:
    metric: str
    edges: tuple
    counts: tuple

    def labels(self) -> list:
        out = []
        for lo, hi in zip(self.edges[:-1], self.edges[1:]):
            out.append("More" if math.isinf(hi) else f"[{lo:g}, {hi:g})")
        return out


def histogram(table: ResultTable, metric="translation",
              edges=None) -> Histogram:
    """Residual histogram with the declared unequal-width bins."""
    if not table.rows:
        raise ValueError("cannot histogram an empty result table")
    try:
        key, default_edges = {
            "translation": ("t_err_mm", TRANSLATION_BIN_EDGES),
            "rotation": ("r_err_deg", ROTATION_BIN_EDGES),
        }[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; use "
                         "'translation' or 'rotation'") from None
    edges = tuple(default_edges if edges is None else edges)
    values = [float(r[key]) for r in table.rows if _row_measured(r)]
    counts, _ = np.histogram(np.asarray(values, dtype=np.float64),
                             bins=np.asarray(edges))
    return Histogram(metric, edges, tuple(int(c) for c in counts))


def _pass_fraction(rows) -> float:
    if not rows:
        return math.nan
    return sum(int(r["pass_both"] or 0) for r in rows) / len(rows)


def success_rates(table: ResultTable) -> dict:
    """Pass fractions over all attempts; errored rows count as failures."""
    rows = list(table.rows)
    relevant = [r for r in rows if _row_relevant(r)]
    by_type = {}
    for rt in sorted({r["run_type"] for r in rows}):
        sub = [r for r in rows if r["run_type"] == rt]
        by_type[rt] = {
            "n": len(sub),
            "overall": _pass_fraction(sub),
            "clinically_relevant": _pass_fraction(
                [r for r in sub if _row_relevant(r)]),
        }
    return {
        "n": len(rows),
        "overall": _pass_fraction(rows),
        "clinically_relevant": _pass_fraction(relevant),
        "by_run_type": by_type,
    }


def clinical_pass_rates(table: ResultTable) -> dict:
    """Translation/rotation pass fractions split by patient label."""
    out = {}
    for patient in sorted({r["patient"] for r in table.rows
                           if r.get("patient", "")}):
        sub = [r for r in table.rows if r["patient"] == patient]
        n = len(sub)
        out[patient] = {
            "n": n,
            "translation": sum(int(r["pass_t"] or 0) for r in sub) / n,
            "rotation": sum(int(r["pass_r"] or 0) for r in sub) / n,
            "both": _pass_fraction(sub),
        }
    return out


def format_grid(table: ResultTable, metric="t_err_mm",
                reduce="mean") -> dict:
    """Reduce rows onto a (volume fov x image fov) grid with the
    relevance mask alongside; cells nobody visited come out nan."""
    rows = list(table.rows)
    vols = sorted({float(r["volume_fov_cm"]) for r in rows})
    imgs = sorted({float(r["image_fov_cm"]) for r in rows})
    reducers = {"mean": np.nanmean, "max": np.nanmax, "min": np.nanmin}
    if reduce != "pass_rate" and reduce not in reducers:
        raise ValueError(f"unknown reduce {reduce!r}")
    cells, mask = [], []
    for v in vols:
        line, mline = [], []
        for i in imgs:
            sub = [r for r in rows
                   if float(r["volume_fov_cm"]) == v
                   and float(r["image_fov_cm"]) == i]
            if not sub:
                line.append(math.nan)
            elif reduce == "pass_rate":
                line.append(_pass_fraction(sub))
            else:
                vals = [float(r[metric]) for r in sub if _row_measured(r)]
                line.append(float(reducers[reduce](vals)) if vals
                            else math.nan)
            mline.append(clinically_relevant(v, i))
        cells.append(line)
        mask.append(mline)
    return {"volume_fovs_cm": vols, "image_fovs_cm": imgs,
            "metric": metric, "reduce": reduce,
            "cells": cells, "relevant": mask}


def phantom_at_fov(spec: PhantomSpec, fov_cm: float, dims: int):
    """The master anatomy re-voxelized at one acquisition format.

    Grid extent equals the format diameter (zoom changes sampling), and
    the collimation cylinder zeroes everything outside the format.
    """
    spacing = float(fov_cm) * 10.0 / int(dims)
    variant = replace(spec, dims=(int(dims),) * 3, spacing_mm=spacing,
                      fov_diameter_cm=float(fov_cm), allow_partial=True)
    return crop_to_fov(generate_phantom(variant))


def _result_columns(result) -> dict:
    err = result.error
    cols = transform_to_columns(result.recovered, "recovered")
    cols.update({
        "t_err_mm": float(err.translation_mm),
        "r_err_deg": float(err.rotation_deg),
        "in_plane_mm": float(err.in_plane_mm),
        "out_of_plane_mm": float(err.out_of_plane_mm),
        "pass_t": int(result.passed["t"]),
        "pass_r": int(result.passed["r"]),
        "pass_both": int(result.passed["both"]),
        "score": float(result.score),
        "evaluations": int(result.evaluations),
        "insufficient": int(result.insufficient_landmarks),
        "error": "",
    })
    return cols


def _failure_columns(exc: Exception) -> dict:
    cols = {f"recovered_{s}": math.nan
            for s in ("tx_mm", "ty_mm", "tz_mm", "rx_deg", "ry_deg", "rz_deg")}
    cols.update({
        "t_err_mm": math.nan, "r_err_deg": math.nan,
        "in_plane_mm": math.nan, "out_of_plane_mm": math.nan,
        "pass_t": 0, "pass_r": 0, "pass_both": 0,
        "score": math.nan, "evaluations": 0, "insufficient": 0,
        "error": f"{type(exc).__name__}: {exc}",
    })
    return cols


def run_phantom_matrix(plan: ExperimentPlan, log=None) -> ResultTable:
    """Sweep (run type x volume fov x image fov x offset x trial).

    One master phantom poses as the patient: the target image is its
    rendering through the per-format camera plus run-type noise, the
    moving volume its re-voxelization at each reconstruction format.
    Registration starts at the offset and is judged against the identity.
    Failures inside a cell are recorded on the row, never raised.
    """
    base = plan.phantom if plan.phantom is not None else PhantomSpec()
    offsets = plan.offsets if plan.offsets is not None else table1_offsets()
    master = generate_phantom(base)
    cameras = {f: default_camera(f, (plan.image_dims, plan.image_dims))
               for f in plan.image_fovs_cm}
    clean = {f: render_drr(master, cameras[f]) for f in plan.image_fovs_cm}
    volumes = {f: phantom_at_fov(base, f, plan.volume_dims)
               for f in plan.volume_fovs_cm}
    truth = identity_transform()

    rows = []
    noisy_cache = {}
    for rt_idx, run_type in enumerate(plan.run_types):
        photons = NOISE_PRESETS[run_type]
        for iv, vol_fov in enumerate(plan.volume_fovs_cm):
            for ii, img_fov in enumerate(plan.image_fovs_cm):
                camera = cameras[img_fov]
                for io, offset in enumerate(offsets):
                    for trial in range(plan.trials):
                        # the target image is shared across volume formats
                        # and offsets, like a physical film would be
                        noise_key = (rt_idx, ii, trial)
                        if noise_key not in noisy_cache:
                            noise_rng = np.random.default_rng(_derive_seed(
                                plan.seed, _STREAM_NOISE, rt_idx, ii, trial))
                            noisy_cache[noise_key] = add_poisson_noise(
                                clean[img_fov], photons, noise_rng)
                        fixed = noisy_cache[noise_key]
                        seed = _derive_seed(plan.seed, _STREAM_MATRIX,
                                            rt_idx, iv, ii, io, trial)
                        row = _new_row()
                        row.update({
                            "experiment": "phantom_matrix",
                            "run_type": run_type,
                            "volume_fov_cm": float(vol_fov),
                            "image_fov_cm": float(img_fov),
                            "offset_id": f"T{io + 1}",
                            "trial": trial,
                            "clinically_relevant": int(
                                clinically_relevant(vol_fov, img_fov)),
                            "carm_rotation_deg": 0.0,
                            "carm_angulation_deg": 0.0,
                            "image_dims": plan.image_dims,
                            "seed": seed,
                        })
                        row.update(transform_to_columns(offset, "offset"))
                        row.update(transform_to_columns(truth, "truth"))
                        try:
                            result = two_stage_register(
                                volumes[vol_fov], fixed, camera,
                                init=offset,
                                rng=np.random.default_rng(seed))
                            result = attach_error(
                                result, truth, camera=camera,
                                criteria=plan.criteria, component="total")
                            row.update(_result_columns(result))
                        except Exception as exc:  # keep the matrix alive
                            row.update(_failure_columns(exc))
                        rows.append(row)
                        if log is not None:
                            log(f"[{len(rows)}] {run_type} "
                                f"v{vol_fov:g}/i{img_fov:g} T{io + 1} "
                                f"trial {trial}: t={row['t_err_mm']:.3g} "
                                f"err={row['error'] or '-'}")
    return ResultTable(tuple(rows), plan.criteria, "total")


def run_clinical_style(plan: ExperimentPlan, log=None) -> ResultTable:
    """Paired random-offset registrations on two simulated patients.

    Each patient (vessels with and without contrast) gets its own
    rotational run and reconstruction; registration pulls a random frame
    and a random start offset.  Pairs share their draws, so the contrast
    comparison is matched trial for trial.  The translational criterion
    applies to the in-plane residual; the viewing-axis component of a
    single projection is recorded but not judged.
    """
    base = plan.phantom if plan.phantom is not None else PhantomSpec()
    fov = base.fov_diameter_cm if base.fov_diameter_cm is not None \
        else base.extent_cm()
    camera = default_camera(fov, (plan.image_dims, plan.image_dims))
    trajectory = Trajectory(plan.n_frames, plan.arc_deg)
    photons = NOISE_PRESETS[plan.run_types[0]]

    datasets = {}
    for idx, (patient, filled) in enumerate(
            (("contrast_on", True), ("contrast_off", False))):
        spec = replace(base, contrast_filled=filled)
        datasets[patient] = ground_truth_pairs(
            spec, trajectory, camera=camera, photons=photons,
            seed=_derive_seed(plan.seed, _STREAM_SIMULATE, idx),
            dims=plan.recon_dims)
        if log is not None:
            log(f"simulated {patient}: {plan.n_frames} frames, "
                f"recon {plan.recon_dims}^3")

    rows = []
    n_pairs = (plan.n_registrations + 1) // 2
    for pair in range(n_pairs):
        root = np.random.SeedSequence(
            [plan.seed, _STREAM_CLINICAL, pair]).generate_state(3, np.uint64)
        offset_seed, frame_seed, anneal_seed = (int(s) for s in root)
        offset = sample_offset(plan.distribution, offset_seed)
        for patient, dataset in datasets.items():
            frame_idx, image, cam = dataset.random_frame(seed=frame_seed)
            row = _new_row()
            row.update({
                "experiment": "clinical_style",
                "run_type": plan.run_types[0],
                "volume_fov_cm": float(fov),
                "image_fov_cm": float(fov),
                "patient": patient,
                "frame_idx": frame_idx,
                "trial": pair,
                "clinically_relevant": 1,
                "carm_rotation_deg": float(cam.carm_rotation_deg),
                "carm_angulation_deg": float(cam.carm_angulation_deg),
                "image_dims": plan.image_dims,
                "seed": anneal_seed,
                "offset_seed": offset_seed,
            })
            row.update(transform_to_columns(offset, "offset"))
            row.update(transform_to_columns(dataset.ground_truth, "truth"))
            try:
                result = two_stage_register(
                    dataset.reconstruction, image, cam, init=offset,
                    rng=np.random.default_rng(anneal_seed))
                result = attach_error(
                    result, dataset.ground_truth, camera=cam,
                    criteria=plan.criteria, component="in_plane")
                row.update(_result_columns(result))
            except Exception as exc:  # keep the loop alive
                row.update(_failure_columns(exc))
            rows.append(row)
            if log is not None:
                log(f"[{len(rows)}] {patient} frame {frame_idx} "
                    f"pair {pair}: in_plane={row['in_plane_mm']:.3g} "
                    f"err={row['error'] or '-'}")
    return ResultTable(tuple(rows), plan.criteria, "in_plane")


@dataclass(frozen=True)
class LandscapeResult:
    """Dense similarity scores over a pose-increment grid."""

    axes: tuple
    values: tuple
    scores: np.ndarray

    def rows(self) -> np.ndarray:
        grids = np.meshgrid(*self.values, indexing="ij")
        cols = [g.reshape(-1) for g in grids] + [self.scores.reshape(-1)]
        return np.stack(cols, axis=1)

    def peak(self) -> tuple:
        return tuple(int(i) for i in
                     np.unravel_index(int(np.argmax(self.scores)),
                                      self.scores.shape))


def similarity_landscape(volume, fixed, camera, axes=(0, 1),
                         ranges=((-15.0, 15.0), (-15.0, 15.0)),
                         steps=(33, 33), init=None, drr_cfg=None,
                         sim_cfg=None) -> LandscapeResult:
    """Evaluate the similarity over a grid of pose increments.

    ``axes`` picks from the five search dimensions (detector-plane
    translations, then rotations about the detector axes); the grid is
    the Cartesian product of per-axis linspaces.
    """
    axes = tuple(int(a) for a in axes)
    if not axes or len(set(axes)) != len(axes) \
            or any(a not in range(5) for a in axes):
        raise ValueError("axes must be distinct indices into the five "
                         "search dimensions")
    if len(ranges) != len(axes) or len(steps) != len(axes):
        raise ValueError("ranges and steps must match axes one to one")
    steps = tuple(int(s) for s in steps)
    if any(s < 1 for s in steps):
        raise ValueError("steps must all be >= 1")
    init = init if init is not None else identity_transform()
    drr_cfg = drr_cfg if drr_cfg is not None else DrrConfig()
    frame = camera_frame(camera)
    mask, prepared = _prepare(fixed, camera, drr_cfg.downsample, sim_cfg)
    values = tuple(np.linspace(float(lo), float(hi), s)
                   for (lo, hi), s in zip(ranges, steps))
    scores = np.empty(steps, dtype=np.float64)
    for idx in np.ndindex(*steps):
        x = np.zeros(5)
        for axis, vals, i in zip(axes, values, idx):
            x[axis] = vals[i]
        pose = apply_increment(init, x, frame)
        drr = render_drr(volume, camera, pose, cfg=drr_cfg, mask=mask)
        scores[idx] = prepared.evaluate(drr.data).score
    return LandscapeResult(axes, values, scores)


def save_landscape_csv(path, result: LandscapeResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([AXIS_NAMES[a] for a in result.axes] + ["score"])
        for row in result.rows():
            writer.writerow([repr(float(v)) for v in row])
    return path


def report_dict(table: ResultTable) -> dict:
    """Everything the text and JSON reports are built from."""
    out = {
        "summary": summarize(table),
        "success_rates": success_rates(table),
        "histograms": {
            metric: {"edges": list(h.edges), "counts": list(h.counts),
                     "labels": h.labels()}
            for metric in ("translation", "rotation")
            for h in (histogram(table, metric),)
        },
    }
    if any(r.get("patient", "") for r in table.rows):
        out["clinical_pass_rates"] = clinical_pass_rates(table)
    return out


def report_text(table: ResultTable) -> str:
    rep = report_dict(table)
    summary = rep["summary"]
    rates = rep["success_rates"]
    lines = [
        f"rows: {summary['n_rows']}  errors: {summary['n_errors']}",
        f"criteria: {table.criteria[0]} mm / {table.criteria[1]} deg "
        f"({table.component} translation)",
        f"pass rate overall: {_pct(rates['overall'])}   "
        f"clinically relevant: {_pct(rates['clinically_relevant'])}",
    ]
    for rt, sub in rates["by_run_type"].items():
        lines.append(f"  {rt}: overall {_pct(sub['overall'])}, "
                     f"relevant {_pct(sub['clinically_relevant'])} "
                     f"(n={sub['n']})")
    if "clinical_pass_rates" in rep:
        for patient, sub in rep["clinical_pass_rates"].items():
            lines.append(f"  {patient}: translation {_pct(sub['translation'])}, "
                         f"rotation {_pct(sub['rotation'])} (n={sub['n']})")
    for split in ("all", "successful"):
        leaf = summary[split]["clinically_relevant"]
        t, r = leaf["translation_mm"], leaf["rotation_deg"]
        lines.append(
            f"{split} (relevant, n={t['n']}): "
            f"translation {t['mean']:.3f} +- {t['std']:.3f} mm "
            f"[{t['min']:.3f}, {t['max']:.3f}], "
            f"rotation {r['mean']:.3f} +- {r['std']:.3f} deg")
    return "\n".join(lines)


def _pct(x) -> str:
    return "n/a" if not math.isfinite(x) else f"{100.0 * x:.1f}%"
