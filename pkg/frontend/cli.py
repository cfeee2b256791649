"""
Command-line front end: simulate, separate, evaluate, sweep and normals.

Every subcommand reads a JSON RunManifest (flags override its fields), writes its
artefacts atomically into the output directory and, when an archive path is
configured, records itself in the SQLite run archive.
"""

import argparse
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pydantic

from backend import database
from backend.calibration import estimate_phase_from_mosaic
from backend.core import load_filter_array, mosaic_capture, save_filter_array
from backend.errors import (
    MissingInputError,
    PolarsepError,
    ShapeError,
    UnidentifiablePhaseError,
    ValidationError,
)
from backend.metrics_io import (
    evaluate_estimates,
    read_image,
    read_metrics_csv,
    read_pfm,
    write_json,
    write_metrics_csv,
    write_normal_png,
    write_pfm,
    write_png,
)
from backend.patterns import generate_pattern
from backend.schemas import (
    CaptureConfig,
    FilterArray,
    LightDome,
    MetricReport,
    NormalMap,
    PatternSpec,
    PhaseEstimate,
    RunManifest,
    SceneSpec,
    SeparationResult,
    SolverConfig,
)
from backend.solvers import separate
from backend.stereo import angular_error, photometric_stereo, reprojection_rms
from backend.synth import (
    build_scene,
    make_light_dome,
    normal_map_from_scene,
    random_light_phases,
    render_layers,
    simulate_dome_captures,
)
from backend.utils import atomic_write_bytes, atomic_write_text, generate_pdf_report
from config.settings import settings
from frontend import display

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    "simulate": "render a scene and capture it through a filter array",
    "separate": "demosaic and separate a captured mosaic",
    "evaluate": "PSNR of estimates against ground truth",
    "sweep": "evaluate a grid of scenes, patterns, K and solvers",
    "normals": "photometric stereo from separated diffuse stacks",
}

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3


# --- ARGUMENTS AND MANIFEST ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polarsep",
        description="Polarizing filter-array simulation and diffuse/specular separation.",
    )
    # Options shared by every subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="JSON run manifest; flags below override its fields")
    common.add_argument("--out", help="output directory")
    common.add_argument("--phase", type=float, help="light polarization phase in degrees (skips estimation)")
    common.add_argument("--norm", choices=["l2", "l1", "huber", "two_stage"], help="separation solver")
    common.add_argument("--pattern", choices=["regular", "random"], help="filter array layout")
    common.add_argument("--k", type=int, help="number of filter orientations")
    common.add_argument("--seed", type=int, help="seed for scene, pattern, noise and dome")
    common.add_argument("--archive", help="SQLite run archive (default: POLARSEP_ARCHIVE)")
    common.add_argument("--pdf", action="store_true", help="also write a PDF table of the metrics")
    common.add_argument("--log-level", help="logging level (default: POLARSEP_LOG_LEVEL)")

    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, help_text in SUBCOMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text)

    # The archive browser takes no manifest
    history = sub.add_parser("history", help="list, show or delete archived runs")
    history.add_argument("--archive", help="SQLite run archive (default: POLARSEP_ARCHIVE)")
    history.add_argument("--only", choices=list(SUBCOMMANDS), help="list runs of one subcommand only")
    history.add_argument("--run-id", help="show one run and its metric rows")
    history.add_argument("--delete", action="store_true", help="delete the run named by --run-id")
    history.add_argument("--log-level", help="logging level (default: POLARSEP_LOG_LEVEL)")
    return parser


def _resolve(path: Optional[str], base: str) -> Optional[str]:
    """Manifest paths are relative to the manifest's own directory."""
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base, path))


def load_manifest(args: argparse.Namespace) -> RunManifest:
    """Reads the manifest (if any) and applies the command-line overrides."""
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as f:
            manifest = RunManifest.model_validate_json(f.read())
        base = os.path.dirname(os.path.abspath(args.manifest))
        inputs = manifest.inputs.model_copy(update={
            name: _resolve(getattr(manifest.inputs, name), base)
            for name in ("mosaic", "pattern", "estimate_diffuse", "estimate_specular", "truth_diffuse",
                         "truth_specular", "lights", "truth_normals", "reference_normals")
        })
        inputs = inputs.model_copy(update={"diffuse_stack": [_resolve(p, base) for p in inputs.diffuse_stack]})
        manifest = manifest.model_copy(update={"inputs": inputs})
    else:
        manifest = RunManifest()

    updates: Dict[str, Any] = {"subcommand": args.subcommand}
    if args.out:
        updates["out_dir"] = args.out
    if args.phase is not None:
        updates["phase_deg"] = args.phase
    if args.norm:
        updates["solver"] = manifest.solver.model_copy(update={"norm": args.norm})
    pattern_updates: Dict[str, Any] = {}
    if args.pattern:
        pattern_updates["kind"] = args.pattern
    if args.k is not None:
        pattern_updates["k"] = args.k
    if args.seed is not None:
        pattern_updates["seed"] = args.seed
        updates["scene"] = manifest.scene.model_copy(update={"seed": args.seed})
        updates["capture"] = manifest.capture.model_copy(update={"seed": args.seed})
        updates["dome"] = manifest.dome.model_copy(update={"seed": args.seed})
    if pattern_updates:
        updates["pattern"] = manifest.pattern.model_copy(update=pattern_updates)

    # model_copy skips validation; round-trip so overridden values are checked too
    return RunManifest.model_validate(manifest.model_copy(update=updates).model_dump(by_alias=True))


def _phase_from_degrees(degrees: float) -> float:
    return math.radians(math.fmod(degrees, 180.0) % 180.0) % math.pi


def _pattern_for(spec: PatternSpec, size: int) -> PatternSpec:
    return spec.model_copy(update={"height": spec.height or size, "width": spec.width or size})


def _unit_light(scene: SceneSpec) -> np.ndarray:
    light = np.asarray(scene.light, dtype=np.float64)
    norm = float(np.linalg.norm(light))
    if norm == 0.0:
        raise ValidationError("scene light direction is the zero vector")
    return light / norm


# --- PIPELINE STEPS (shared by the subcommands and the sweep) ---

class SimulatedCapture(NamedTuple):
    array: FilterArray
    diffuse: np.ndarray
    specular: np.ndarray
    mosaic: np.ndarray
    capture: CaptureConfig


def simulate_capture(scene_spec: SceneSpec, pattern_spec: PatternSpec, capture: CaptureConfig,
                     phase_deg: Optional[float] = None) -> SimulatedCapture:
    """Renders the scene under its single light and captures it through the filter array."""
    if phase_deg is not None:
        capture = capture.model_copy(update={"phase": _phase_from_degrees(phase_deg)})
    scene = build_scene(scene_spec)
    array = generate_pattern(_pattern_for(pattern_spec, scene_spec.size))
    diffuse, specular = render_layers(scene, _unit_light(scene_spec))
    mosaic = mosaic_capture(diffuse, specular, array, capture)
    return SimulatedCapture(array, diffuse, specular, mosaic, capture)


class SeparationRun(NamedTuple):
    result: SeparationResult
    phase: float
    phase_source: str  # "user" or "estimated"
    estimate: Optional[PhaseEstimate]
    wall_time_s: float


def separate_mosaic(mosaic: np.ndarray, array: FilterArray, solver: SolverConfig,
                    phase: Optional[float] = None) -> SeparationRun:
    """
    Separates one mosaic. With phase=None the phase is estimated from the mosaic
    itself; an unidentifiable phase raises UnidentifiablePhaseError.
    """
    start = time.perf_counter()
    estimate = None
    if phase is None:
        estimate = estimate_phase_from_mosaic(mosaic, array)
        if not estimate.identifiable:
            raise UnidentifiablePhaseError(
                "the mosaic carries no measurable specular modulation; pass --phase to separate it anyway"
            )
        phase, source = estimate.phase, "estimated"
    else:
        source = "user"
    result = separate(mosaic, array, phase, solver)
    return SeparationRun(result, phase, source, estimate, time.perf_counter() - start)


def _separation_diagnostics(run: SeparationRun) -> Dict[str, Any]:
    diagnostics: Dict[str, Any] = {
        "phase_deg": math.degrees(run.phase),
        "phase_source": run.phase_source,
        "solver": run.result.solver,
        "iterations": run.result.iterations,
        "final_residual": run.result.final_residual,
        "converged": run.result.converged,
        "flags": list(run.result.flags),
        "objective_trace": list(run.result.objective_trace),
        "constraint_residual_trace": list(run.result.constraint_residual_trace),
        "wall_time_s": run.wall_time_s,
    }
    if run.estimate is not None:
        diagnostics["phase_estimate"] = run.estimate.model_dump()
    return diagnostics


# --- SUBCOMMANDS ---

def cmd_simulate(manifest: RunManifest, out_dir: str) -> Dict[str, Any]:
    """Writes mosaic.pfm, diffuse.pfm, specular.pfm, pattern.json and manifest.json."""
    sim = simulate_capture(manifest.scene, manifest.pattern, manifest.capture, manifest.phase_deg)
    write_pfm(os.path.join(out_dir, "mosaic.pfm"), sim.mosaic)
    write_pfm(os.path.join(out_dir, "diffuse.pfm"), sim.diffuse)
    write_pfm(os.path.join(out_dir, "specular.pfm"), sim.specular)
    save_filter_array(os.path.join(out_dir, "pattern.json"), sim.array)

    # The written manifest replays this exact capture
    replay = manifest.model_copy(update={
        "pattern": _pattern_for(manifest.pattern, manifest.scene.size),
        "capture": sim.capture,
        "phase_deg": None,
    })
    atomic_write_text(os.path.join(out_dir, "manifest.json"), replay.model_dump_json(by_alias=True, indent=2))
    logger.info("simulated %s: %dx%d, K=%d, phase %.2f deg", manifest.scene.label, sim.array.height,
                sim.array.width, sim.array.k, math.degrees(sim.capture.phase))
    return {"scene": manifest.scene.label, "k": sim.array.k, "phase_deg": math.degrees(sim.capture.phase)}


def cmd_separate(manifest: RunManifest, out_dir: str) -> Dict[str, Any]:
    """Separates inputs.mosaic through inputs.pattern; writes PFM, PNG previews and diagnostics.json."""
    if not manifest.inputs.mosaic or not manifest.inputs.pattern:
        raise MissingInputError("separate needs inputs.mosaic and inputs.pattern")
    mosaic = read_image(manifest.inputs.mosaic)
    array = load_filter_array(manifest.inputs.pattern)
    if mosaic.shape[:2] != (array.height, array.width):
        raise ShapeError(f"mosaic is {mosaic.shape[0]}x{mosaic.shape[1]}, "
                         f"pattern is {array.height}x{array.width}")

    phase = None if manifest.phase_deg is None else _phase_from_degrees(manifest.phase_deg)
    run = separate_mosaic(mosaic, array, manifest.solver, phase)

    write_pfm(os.path.join(out_dir, "diffuse.pfm"), run.result.diffuse)
    write_pfm(os.path.join(out_dir, "specular.pfm"), run.result.specular)
    write_png(os.path.join(out_dir, "diffuse.png"), run.result.diffuse)
    write_png(os.path.join(out_dir, "specular.png"), run.result.specular)
    diagnostics = _separation_diagnostics(run)
    write_json(os.path.join(out_dir, "diagnostics.json"), diagnostics)
    print(display.render_separation(diagnostics))
    return diagnostics


def _write_reports(out_dir: str, stem: str, rows: List[MetricReport], pdf: bool, title: str) -> None:
    write_metrics_csv(os.path.join(out_dir, f"{stem}.csv"), rows)
    if pdf:
        atomic_write_bytes(os.path.join(out_dir, f"{stem}.pdf"), generate_pdf_report(rows, title=title))


def cmd_evaluate(manifest: RunManifest, out_dir: str, pdf: bool = False) -> List[MetricReport]:
    """
    PSNR of inputs.estimate_* against inputs.truth_*. The row is merged into an existing
    metrics.csv in out_dir, replacing any earlier row with the same (scene, pattern, K, solver).
    """
    inputs = manifest.inputs
    if not inputs.truth_diffuse or not inputs.truth_specular:
        raise MissingInputError("evaluate needs ground truth (inputs.truth_diffuse, inputs.truth_specular)")
    if not inputs.estimate_diffuse or not inputs.estimate_specular:
        raise MissingInputError("evaluate needs inputs.estimate_diffuse and inputs.estimate_specular")
    k = load_filter_array(inputs.pattern).k if inputs.pattern else manifest.pattern.k
    row = evaluate_estimates(
        read_image(inputs.estimate_diffuse), read_image(inputs.estimate_specular),
        read_image(inputs.truth_diffuse), read_image(inputs.truth_specular),
        scene=manifest.scene.label, pattern=manifest.pattern.kind, k=k, solver=manifest.solver.norm,
        config=manifest.solver.model_dump(by_alias=True),
    )
    table = [row]
    csv_path = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(csv_path):
        key = (row.scene, row.pattern, row.k, row.solver)
        earlier = [r for r in read_metrics_csv(csv_path) if (r.scene, r.pattern, r.k, r.solver) != key]
        logger.info("merging into %s (%d earlier row(s) kept)", csv_path, len(earlier))
        table = earlier + table
    _write_reports(out_dir, "metrics", table, pdf, "polarsep - evaluation")
    print(f"PSNR diffuse {display.format_psnr(row.psnr_diffuse)}, specular "
          f"{display.format_psnr(row.psnr_specular)}, sum {display.format_psnr(row.psnr_sum)}")
    return [row]


class SweepJob(NamedTuple):
    scene: SceneSpec
    pattern: PatternSpec
    solver: SolverConfig


def sweep_jobs(manifest: RunManifest) -> List[SweepJob]:
    """
    The (scene x pattern kind x K x solver) grid in manifest order.
    Regular layouts need a square K; other combinations are skipped with a warning.
    """
    jobs = []
    for scene in manifest.sweep.scenes:
        for kind in manifest.sweep.patterns:
            for k in manifest.sweep.ks:
                if kind == "regular" and math.isqrt(k) ** 2 != k:
                    logger.warning("skipping regular pattern with non-square K=%d", k)
                    continue
                for norm in manifest.sweep.solvers:
                    pattern = manifest.pattern.model_copy(update={"kind": kind, "k": k})
                    jobs.append(SweepJob(scene, pattern, manifest.solver.model_copy(update={"norm": norm})))
    return jobs


def run_sweep_job(job: SweepJob, manifest: RunManifest) -> MetricReport:
    """simulate -> separate -> evaluate for one grid point, all in memory."""
    sim = simulate_capture(job.scene, job.pattern, manifest.capture, manifest.phase_deg)
    if manifest.phase_deg is not None:
        phase = sim.capture.phase
    elif manifest.sweep.estimate_phase:
        phase = None
    else:
        phase = manifest.capture.phase
    run = separate_mosaic(sim.mosaic, sim.array, job.solver, phase)
    return evaluate_estimates(
        run.result.diffuse, run.result.specular, sim.diffuse, sim.specular,
        scene=job.scene.label, pattern=job.pattern.kind, k=job.pattern.k, solver=job.solver.norm,
        wall_time_s=run.wall_time_s,
        config={"phase_deg": math.degrees(run.phase), "phase_source": run.phase_source,
                "iterations": run.result.iterations, "converged": run.result.converged},
    )


def cmd_sweep(manifest: RunManifest, out_dir: str, pdf: bool = False) -> List[MetricReport]:
    """Runs the sweep grid (threads capped by POLARSEP_THREADS); writes sweep.csv and sweep.json."""
    jobs = sweep_jobs(manifest)
    logger.info("sweep: %d runs on %d thread(s)", len(jobs), settings.THREADS)
    with ThreadPoolExecutor(max_workers=settings.THREADS) as pool:
        # map keeps the grid order regardless of completion order
        rows = list(pool.map(lambda job: run_sweep_job(job, manifest), jobs))
    _write_reports(out_dir, "sweep", rows, pdf, "polarsep - sweep")
    write_json(os.path.join(out_dir, "sweep.json"), {
        "runs": [{"scene": r.scene, "pattern": r.pattern, "k": r.k, "solver": r.solver,
                  "wall_time_s": r.wall_time_s, **r.config} for r in rows],
    })
    print(display.render_metric_table(rows))
    return rows


# --- NORMALS ---

class DomeRun(NamedTuple):
    dome: LightDome
    separated: NormalMap  # stereo on the solver's diffuse estimates
    composite: NormalMap  # stereo on unpolarized Z_d + Z_s
    reference: NormalMap  # stereo on the true diffuse layers
    analytic: NormalMap
    diffuse_stack: List[np.ndarray]
    phases: List[float]
    phase_sources: List[str]


def run_dome_pipeline(manifest: RunManifest) -> DomeRun:
    """simulate every dome light -> separate each mosaic -> photometric stereo."""
    if manifest.dome.per_light_phases and manifest.phase_deg is not None:
        raise ValidationError("a single --phase cannot be used with per-light polarizer phases; "
                              "drop one of the two")
    scene = build_scene(manifest.scene)
    phases = None
    if manifest.dome.per_light_phases:
        phases = random_light_phases(manifest.dome.count, manifest.dome.seed)
    dome = make_light_dome(manifest.dome.count, manifest.dome.max_zenith_deg, phases)
    array = generate_pattern(_pattern_for(manifest.pattern, manifest.scene.size))
    capture = manifest.capture
    if manifest.phase_deg is not None:
        capture = capture.model_copy(update={"phase": _phase_from_degrees(manifest.phase_deg)})
    captures = simulate_dome_captures(scene, dome, array, capture)

    user_phase = None if manifest.phase_deg is None else capture.phase

    def separate_light(index: int) -> SeparationRun:
        try:
            return separate_mosaic(captures.mosaics[index], array, manifest.solver, user_phase)
        except UnidentifiablePhaseError:
            # No specular signal under this light: any phase explains the mosaic equally well
            logger.warning("light %d: phase unidentifiable, separating with phase 0", index)
            run = separate_mosaic(captures.mosaics[index], array, manifest.solver, 0.0)
            return run._replace(phase_source="fallback")

    with ThreadPoolExecutor(max_workers=settings.THREADS) as pool:
        runs = list(pool.map(separate_light, range(dome.count)))

    diffuse_stack = [run.result.diffuse for run in runs]
    composites = [d + s for d, s in zip(captures.diffuse, captures.specular)]
    return DomeRun(
        dome=dome,
        separated=photometric_stereo(diffuse_stack, dome.directions),
        composite=photometric_stereo(composites, dome.directions),
        reference=photometric_stereo(captures.diffuse, dome.directions),
        analytic=normal_map_from_scene(scene),
        diffuse_stack=diffuse_stack,
        phases=[run.phase for run in runs],
        phase_sources=[run.phase_source for run in runs],
    )


def _error_stats(estimate: NormalMap, truth: NormalMap) -> Dict[str, float]:
    report = angular_error(estimate, truth)
    return {"mean": report.mean_deg, "median": report.median_deg}


def _load_lights(path: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
    directions = payload.get("directions") if isinstance(payload, dict) else payload
    if directions is None:
        raise ValidationError(f"{path}: no 'directions' list")
    directions = np.asarray(directions, dtype=np.float64)
    if directions.ndim != 2 or directions.shape[1] != 3:
        raise ValidationError(f"{path}: lights must be a list of 3-vectors")
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    return LightDome(directions=directions).directions


def _truth_normal_map(path: str) -> NormalMap:
    """Normals from a 3-channel PFM; near-zero vectors mark invalid pixels."""
    normals = read_pfm(path)
    if normals.shape[2] != 3:
        raise ShapeError(f"{path}: normal maps have 3 channels, got {normals.shape[2]}")
    norms = np.linalg.norm(normals, axis=2)
    valid = norms > 0.5
    normals = np.where(valid[..., None], normals / np.maximum(norms, 1e-12)[..., None], [0.0, 0.0, 1.0])
    return NormalMap(normals=normals, albedo=np.ones(norms.shape), valid=valid)


def cmd_normals(manifest: RunManifest, out_dir: str) -> Dict[str, Any]:
    """
    Photometric stereo, either from inputs.diffuse_stack + inputs.lights or from a
    simulated light dome. Writes normals.pfm/png and normals_report.json.
    A precomputed stack is compared with inputs.truth_normals (reported as "analytic")
    and inputs.reference_normals (reported as "reference") when they are given.
    """
    inputs = manifest.inputs
    report: Dict[str, Any] = {"angular_error_deg": {}}
    if inputs.diffuse_stack:
        if not inputs.lights:
            raise MissingInputError("a precomputed diffuse stack needs inputs.lights")
        lights = _load_lights(inputs.lights)
        images = [read_image(p) for p in inputs.diffuse_stack]
        normal_map = photometric_stereo(images, lights)
        comparisons = {}
        if inputs.truth_normals:
            comparisons["analytic"] = _error_stats(normal_map, _truth_normal_map(inputs.truth_normals))
        if inputs.reference_normals:
            comparisons["reference"] = _error_stats(normal_map, _truth_normal_map(inputs.reference_normals))
        if comparisons:
            report["angular_error_deg"]["separated"] = comparisons
        report["source"] = "precomputed"
    else:
        dome_run = run_dome_pipeline(manifest)
        lights, images, normal_map = dome_run.dome.directions, dome_run.diffuse_stack, dome_run.separated
        for i, diffuse in enumerate(dome_run.diffuse_stack):
            write_pfm(os.path.join(out_dir, f"diffuse_{i:03d}.pfm"), diffuse)
        write_json(os.path.join(out_dir, "lights.json"), {
            "directions": dome_run.dome.directions.tolist(),
            "phases_deg": [math.degrees(p) for p in dome_run.phases],
            "phase_sources": dome_run.phase_sources,
        })
        # invalid pixels are stored as zero vectors
        for name, normals in (("analytic", dome_run.analytic), ("reference", dome_run.reference)):
            write_pfm(os.path.join(out_dir, f"{name}_normals.pfm"), normals.normals * normals.valid[..., None])
        report["angular_error_deg"] = {
            "separated": {"analytic": _error_stats(dome_run.separated, dome_run.analytic),
                          "reference": _error_stats(dome_run.separated, dome_run.reference)},
            "composite": {"analytic": _error_stats(dome_run.composite, dome_run.analytic),
                          "reference": _error_stats(dome_run.composite, dome_run.reference)},
            "reference": {"analytic": _error_stats(dome_run.reference, dome_run.analytic)},
        }
        report["source"] = "dome"

    write_pfm(os.path.join(out_dir, "normals.pfm"), normal_map.normals)
    write_normal_png(os.path.join(out_dir, "normals.png"), normal_map.normals)
    report["lights"] = int(len(lights))
    report["valid_fraction"] = float(normal_map.valid.mean())
    report["reprojection_rms"] = reprojection_rms(images, normal_map, lights)
    write_json(os.path.join(out_dir, "normals_report.json"), report)
    print(display.render_normals_report(report))
    return report


# --- RUN ARCHIVE ---

def cmd_history(archive_path: Optional[str], only: Optional[str] = None, run_id: Optional[str] = None,
                delete: bool = False) -> Dict[str, Any]:
    """Lists archived runs, shows one run with its metric rows, or deletes it."""
    if not archive_path:
        raise MissingInputError("history needs an archive (--archive or POLARSEP_ARCHIVE)")
    if delete and not run_id:
        raise ValidationError("--delete needs --run-id")
    database.init_db(archive_path)

    if run_id is None:
        runs = database.get_all_runs(only, db_path=archive_path)
        print(display.render_history(runs))
        return {"runs": [r["id"] for r in runs]}

    archived = database.get_run(run_id, db_path=archive_path)
    if archived is None:
        raise MissingInputError(f"no archived run {run_id!r} in {archive_path}")
    if delete:
        database.delete_run(run_id, db_path=archive_path)
        logger.info("deleted run %s from %s", run_id, archive_path)
        return {"deleted": run_id}
    rows = database.get_run_metrics(run_id, db_path=archive_path)
    print(display.render_archived_run(archived, rows))
    return {"run": archived, "metrics": [r.model_dump() for r in rows]}


# --- ENTRY POINT ---

def _archive(path: Optional[str], manifest: RunManifest, out_dir: str, status: str,
             diagnostics: Optional[Dict[str, Any]], rows: Sequence[MetricReport]) -> None:
    if not path:
        return
    database.init_db(path)
    run_id = database.record_run(manifest.subcommand or "", manifest.model_dump(mode="json", by_alias=True),
                                 out_dir=out_dir, status=status, diagnostics=diagnostics, db_path=path)
    if rows:
        database.add_metric_rows(run_id, rows, db_path=path)
    logger.debug("archived run %s in %s", run_id, path)


def run(args: argparse.Namespace) -> Tuple[Optional[Dict[str, Any]], List[MetricReport]]:
    if args.subcommand == "history":
        # Reading the archive is not itself archived
        return cmd_history(args.archive or settings.ARCHIVE_PATH, args.only, args.run_id, args.delete), []

    manifest = load_manifest(args)
    out_dir = manifest.out_dir or settings.OUTPUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    print(display.render_header(args.subcommand, out_dir))
    archive_path = args.archive or settings.ARCHIVE_PATH

    diagnostics: Optional[Dict[str, Any]] = None
    rows: List[MetricReport] = []
    try:
        if args.subcommand == "simulate":
            diagnostics = cmd_simulate(manifest, out_dir)
        elif args.subcommand == "separate":
            diagnostics = cmd_separate(manifest, out_dir)
        elif args.subcommand == "evaluate":
            rows = cmd_evaluate(manifest, out_dir, pdf=args.pdf)
        elif args.subcommand == "sweep":
            rows = cmd_sweep(manifest, out_dir, pdf=args.pdf)
        else:
            diagnostics = cmd_normals(manifest, out_dir)
    except Exception as exc:
        _archive(archive_path, manifest, out_dir, type(exc).__name__, {"error": str(exc)}, [])
        raise
    _archive(archive_path, manifest, out_dir, "ok", diagnostics, rows)
    return diagnostics, rows


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parses argv, runs the subcommand and maps failures to exit codes (2 validation, 3 I/O, 4 numerical)."""
    args = build_parser().parse_args(argv)
    if args.log_level:
        logging.getLogger().setLevel(args.log_level.upper())
    try:
        run(args)
    except pydantic.ValidationError as exc:
        logger.error("invalid manifest: %s", exc)
        return EXIT_VALIDATION
    except PolarsepError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O failure on %s: %s", exc.filename or "?", exc.strerror or exc)
        return EXIT_IO
    return EXIT_OK
