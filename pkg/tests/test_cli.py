import json
import math
import os

import numpy as np
import pandas as pd
import pytest

from backend import database
from backend.core import load_filter_array, mosaic_capture, save_filter_array
from backend.errors import ValidationError
from backend.metrics_io import read_metrics_csv, read_pfm, write_pfm
from backend.patterns import generate_pattern
from backend.schemas import CaptureConfig, PatternSpec, RunManifest, SolverConfig
from backend.synth import make_scene, render_layers
from config.settings import settings
from frontend.cli import build_parser, load_manifest, main, run_dome_pipeline, separate_mosaic, sweep_jobs

SCENE = {"kind": "sphere", "size": 32, "seed": 1}


def _manifest(path, payload):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return str(path)


def _read_json(path):
    with open(path) as f:
        return json.load(f)


def _simulate(tmp_path, name="sim", *extra):
    out = tmp_path / name
    manifest = _manifest(tmp_path / f"{name}.json", {"scene": SCENE, "pattern": {"k": 4}})
    assert main(["simulate", "--manifest", manifest, "--out", str(out), *extra]) == 0
    return out


# --- MANIFEST ---

def test_flags_override_manifest(tmp_path):
    manifest = _manifest(tmp_path / "m.json", {"pattern": {"kind": "random", "k": 16}, "inputs": {"mosaic": "a/y.pfm"}})
    args = build_parser().parse_args(["separate", "--manifest", manifest, "--k", "8", "--norm", "l1",
                                      "--seed", "7", "--phase", "30"])
    m = load_manifest(args)
    assert m.pattern.k == 8 and m.solver.norm == "l1" and m.phase_deg == 30.0
    assert m.scene.seed == m.pattern.seed == m.capture.seed == m.dome.seed == 7
    assert m.inputs.mosaic == os.path.join(str(tmp_path), "a", "y.pfm")


def test_sweep_grid_skips_non_square_regular(tmp_path):
    manifest = _manifest(tmp_path / "m.json", {"sweep": {"scenes": [SCENE], "patterns": ["random", "regular"],
                                                         "ks": [4, 8, 16], "solvers": ["l2", "l1"]}})
    jobs = sweep_jobs(load_manifest(build_parser().parse_args(["sweep", "--manifest", manifest])))
    assert len(jobs) == (3 + 2) * 2
    assert [(j.pattern.kind, j.pattern.k, j.solver.norm) for j in jobs[:2]] == [("random", 4, "l2"), ("random", 4, "l1")]


# --- SIMULATE ---

def test_simulate_writes_artefacts(tmp_path):
    out = _simulate(tmp_path)
    for name in ("mosaic.pfm", "diffuse.pfm", "specular.pfm", "pattern.json", "manifest.json"):
        assert (out / name).exists()
    array = load_filter_array(str(out / "pattern.json"))
    assert (array.height, array.width, array.k) == (32, 32, 4)


def test_simulate_matches_library_capture(tmp_path):
    out = _simulate(tmp_path, "sim", "--phase", "30")
    scene = make_scene("sphere", 32, seed=1)
    light = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
    diffuse, specular = render_layers(scene, light)
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=0, height=32, width=32))
    expected = mosaic_capture(diffuse, specular, array, CaptureConfig(phase=math.radians(30.0)))
    np.testing.assert_array_equal(read_pfm(str(out / "mosaic.pfm")), expected.astype(np.float32))


def test_simulate_is_deterministic_and_replayable(tmp_path):
    first = _simulate(tmp_path, "a", "--phase", "65")
    second = _simulate(tmp_path, "b", "--phase", "65")
    assert (first / "mosaic.pfm").read_bytes() == (second / "mosaic.pfm").read_bytes()
    assert (first / "pattern.json").read_bytes() == (second / "pattern.json").read_bytes()

    replay = tmp_path / "replay"
    assert main(["simulate", "--manifest", str(first / "manifest.json"), "--out", str(replay)]) == 0
    assert (replay / "mosaic.pfm").read_bytes() == (first / "mosaic.pfm").read_bytes()


# --- SEPARATE ---

def _separate_manifest(tmp_path, sim_dir):
    return _manifest(tmp_path / "separate.json", {
        "inputs": {"mosaic": os.path.relpath(sim_dir / "mosaic.pfm", tmp_path),
                   "pattern": os.path.relpath(sim_dir / "pattern.json", tmp_path)},
    })


def test_separate_with_user_phase_matches_library(tmp_path):
    sim = _simulate(tmp_path, "sim", "--phase", "30")
    out = tmp_path / "sep"
    assert main(["separate", "--manifest", _separate_manifest(tmp_path, sim), "--out", str(out), "--phase", "30"]) == 0
    diagnostics = _read_json(out / "diagnostics.json")
    assert diagnostics["phase_source"] == "user"
    assert diagnostics["phase_deg"] == pytest.approx(30.0)
    assert "phase_estimate" not in diagnostics

    expected = separate_mosaic(read_pfm(str(sim / "mosaic.pfm")), load_filter_array(str(sim / "pattern.json")),
                               SolverConfig(), math.radians(30.0))
    np.testing.assert_allclose(read_pfm(str(out / "diffuse.pfm")), expected.result.diffuse, atol=1e-6)
    np.testing.assert_allclose(read_pfm(str(out / "specular.pfm")), expected.result.specular, atol=1e-6)
    assert (out / "diffuse.png").exists() and (out / "specular.png").exists()


def test_separate_estimates_phase_by_default(tmp_path):
    sim = _simulate(tmp_path, "sim", "--phase", "40")
    out = tmp_path / "sep"
    assert main(["separate", "--manifest", _separate_manifest(tmp_path, sim), "--out", str(out)]) == 0
    diagnostics = _read_json(out / "diagnostics.json")
    assert diagnostics["phase_source"] == "estimated"
    assert diagnostics["phase_estimate"]["identifiable"] is True
    assert 0.0 <= diagnostics["phase_deg"] < 180.0


def test_separate_without_inputs_is_a_validation_error(tmp_path):
    assert main(["separate", "--out", str(tmp_path / "sep")]) == 2


def test_separate_of_constant_mosaic_is_numerical_error(tmp_path):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=0, height=16, width=16))
    write_pfm(str(tmp_path / "flat.pfm"), np.full((16, 16), 0.3))
    save_filter_array(str(tmp_path / "pattern.json"), array)
    manifest = _manifest(tmp_path / "m.json", {"inputs": {"mosaic": "flat.pfm", "pattern": "pattern.json"}})
    assert main(["separate", "--manifest", manifest, "--out", str(tmp_path / "sep")]) == 4


def test_separate_dimension_mismatch(tmp_path):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=0, height=16, width=16))
    write_pfm(str(tmp_path / "mosaic.pfm"), np.full((16, 20), 0.3))
    save_filter_array(str(tmp_path / "pattern.json"), array)
    manifest = _manifest(tmp_path / "m.json", {"inputs": {"mosaic": "mosaic.pfm", "pattern": "pattern.json"}})
    assert main(["separate", "--manifest", manifest, "--out", str(tmp_path / "sep")]) == 2


def test_corrupt_mosaic_is_an_io_error(tmp_path):
    array = generate_pattern(PatternSpec(kind="random", k=4, seed=0, height=16, width=16))
    (tmp_path / "mosaic.pfm").write_bytes(b"P6\n16 16\n255\n")
    save_filter_array(str(tmp_path / "pattern.json"), array)
    manifest = _manifest(tmp_path / "m.json", {"inputs": {"mosaic": "mosaic.pfm", "pattern": "pattern.json"}})
    assert main(["separate", "--manifest", manifest, "--out", str(tmp_path / "sep")]) == 3


# --- EVALUATE ---

def test_evaluate_identical_inputs(tmp_path):
    sim = _simulate(tmp_path)
    manifest = _manifest(tmp_path / "eval.json", {"inputs": {
        "estimate_diffuse": "sim/diffuse.pfm", "estimate_specular": "sim/specular.pfm",
        "truth_diffuse": "sim/diffuse.pfm", "truth_specular": "sim/specular.pfm",
        "pattern": "sim/pattern.json",
    }})
    out = tmp_path / "eval"
    assert main(["evaluate", "--manifest", manifest, "--out", str(out), "--pdf"]) == 0
    frame = pd.read_csv(out / "metrics.csv")
    assert frame.loc[0, "psnr_diffuse"] == "identical"
    assert frame.loc[0, "psnr_sum"] == "identical"
    assert int(frame.loc[0, "k"]) == 4
    assert (out / "metrics.pdf").read_bytes().startswith(b"%PDF")
    assert sim.exists()


def test_evaluate_merges_into_existing_table(tmp_path):
    _simulate(tmp_path)
    out = str(tmp_path / "eval")

    def evaluate(name, estimate_diffuse):
        manifest = _manifest(tmp_path / f"{name}.json", {"scene": {"name": name}, "inputs": {
            "estimate_diffuse": estimate_diffuse, "estimate_specular": "sim/specular.pfm",
            "truth_diffuse": "sim/diffuse.pfm", "truth_specular": "sim/specular.pfm",
        }})
        assert main(["evaluate", "--manifest", manifest, "--out", out]) == 0
        return read_metrics_csv(os.path.join(out, "metrics.csv"))

    assert [r.scene for r in evaluate("first", "sim/diffuse.pfm")] == ["first"]
    assert [r.scene for r in evaluate("second", "sim/diffuse.pfm")] == ["first", "second"]
    rows = evaluate("first", "sim/mosaic.pfm")
    # same key: the earlier row is replaced, not duplicated
    assert [r.scene for r in rows] == ["second", "first"]
    assert math.isinf(rows[0].psnr_diffuse) and math.isfinite(rows[1].psnr_diffuse)


def test_evaluate_without_truth(tmp_path):
    manifest = _manifest(tmp_path / "eval.json", {"inputs": {"estimate_diffuse": "d.pfm", "estimate_specular": "s.pfm"}})
    assert main(["evaluate", "--manifest", manifest, "--out", str(tmp_path / "eval")]) == 2


# --- SWEEP ---

def test_sweep_row_count_and_order(tmp_path):
    manifest = _manifest(tmp_path / "sweep.json", {"sweep": {
        "scenes": [SCENE], "patterns": ["random", "regular"], "ks": [4, 8, 16], "solvers": ["l2"],
    }})
    out = tmp_path / "sweep"
    assert main(["sweep", "--manifest", manifest, "--out", str(out)]) == 0
    rows = read_metrics_csv(str(out / "sweep.csv"))
    assert [(r.pattern, r.k) for r in rows] == [("random", 4), ("random", 8), ("random", 16),
                                               ("regular", 4), ("regular", 16)]
    runs = _read_json(out / "sweep.json")["runs"]
    assert len(runs) == 5
    assert all(run["phase_source"] == "estimated" and run["wall_time_s"] > 0 for run in runs)


def test_sweep_row_matches_step_by_step_pipeline(tmp_path):
    manifest = _manifest(tmp_path / "sweep.json", {
        "scene": SCENE, "pattern": {"k": 4}, "phase_deg": 25.0,
        "sweep": {"scenes": [SCENE], "ks": [4], "solvers": ["l2"]},
    })
    assert main(["sweep", "--manifest", manifest, "--out", str(tmp_path / "sweep")]) == 0
    swept = read_metrics_csv(str(tmp_path / "sweep" / "sweep.csv"))[0]

    sim = tmp_path / "sim"
    assert main(["simulate", "--manifest", manifest, "--out", str(sim)]) == 0
    assert main(["separate", "--manifest", _separate_manifest(tmp_path, sim), "--out", str(tmp_path / "sep"),
                 "--phase", "25"]) == 0
    evaluate = _manifest(tmp_path / "eval.json", {"scene": SCENE, "inputs": {
        "estimate_diffuse": "sep/diffuse.pfm", "estimate_specular": "sep/specular.pfm",
        "truth_diffuse": "sim/diffuse.pfm", "truth_specular": "sim/specular.pfm",
    }})
    assert main(["evaluate", "--manifest", evaluate, "--out", str(tmp_path / "eval")]) == 0
    stepped = read_metrics_csv(str(tmp_path / "eval" / "metrics.csv"))[0]

    assert stepped.scene == swept.scene
    assert stepped.psnr_diffuse == pytest.approx(swept.psnr_diffuse, abs=1e-2)
    assert stepped.psnr_specular == pytest.approx(swept.psnr_specular, abs=1e-2)
    assert stepped.psnr_sum == pytest.approx(swept.psnr_sum, abs=1e-2)


# --- NORMALS ---

FLAT_DOME = {
    "scene": {"kind": "flat_textured", "size": 24, "seed": 2, "specular_coeff": 0.0},
    "pattern": {"k": 4},
    "dome": {"count": 6},
}


def test_dome_normals_of_flat_scene(tmp_path):
    out = tmp_path / "dome"
    assert main(["normals", "--manifest", _manifest(tmp_path / "dome.json", FLAT_DOME), "--out", str(out)]) == 0
    report = _read_json(out / "normals_report.json")
    assert report["source"] == "dome" and report["lights"] == 6
    # every light scales the same mosaic, so the linear solver keeps the stack proportional
    assert report["angular_error_deg"]["separated"]["analytic"]["mean"] < 1e-2
    assert report["angular_error_deg"]["reference"]["analytic"]["mean"] < 1e-4
    lights = _read_json(out / "lights.json")
    assert len(lights["directions"]) == 6 and len(lights["phase_sources"]) == 6
    for i in range(6):
        assert (out / f"diffuse_{i:03d}.pfm").exists()
    assert (out / "normals.pfm").exists() and (out / "normals.png").exists()


def test_precomputed_stack_matches_dome_pipeline(tmp_path):
    dome_dir = tmp_path / "dome"
    assert main(["normals", "--manifest", _manifest(tmp_path / "dome.json", FLAT_DOME), "--out", str(dome_dir)]) == 0
    manifest = _manifest(tmp_path / "pre.json", {"inputs": {
        "diffuse_stack": [f"dome/diffuse_{i:03d}.pfm" for i in range(6)],
        "lights": "dome/lights.json",
        "truth_normals": "dome/analytic_normals.pfm",
        "reference_normals": "dome/reference_normals.pfm",
    }})
    out = tmp_path / "pre"
    assert main(["normals", "--manifest", manifest, "--out", str(out)]) == 0
    pre = _read_json(out / "normals_report.json")
    dome = _read_json(dome_dir / "normals_report.json")
    assert pre["source"] == "precomputed" and pre["lights"] == 6
    for against in ("analytic", "reference"):
        assert pre["angular_error_deg"]["separated"][against]["mean"] == pytest.approx(
            dome["angular_error_deg"]["separated"][against]["mean"], abs=1e-3)
    np.testing.assert_allclose(read_pfm(str(out / "normals.pfm")), read_pfm(str(dome_dir / "normals.pfm")), atol=1e-4)


def test_per_light_phases_reject_a_user_phase(tmp_path):
    payload = {**FLAT_DOME, "dome": {"count": 6, "per_light_phases": True}}
    with pytest.raises(ValidationError, match="per-light"):
        run_dome_pipeline(RunManifest.model_validate({**payload, "phase_deg": 30.0}))
    manifest = _manifest(tmp_path / "dome.json", payload)
    assert main(["normals", "--manifest", manifest, "--out", str(tmp_path / "out"), "--phase", "30"]) == 2


def test_precomputed_stack_needs_lights(tmp_path):
    manifest = _manifest(tmp_path / "pre.json", {"inputs": {"diffuse_stack": ["a.pfm", "b.pfm", "c.pfm"]}})
    assert main(["normals", "--manifest", manifest, "--out", str(tmp_path / "out")]) == 2


# --- EXIT CODES AND ARCHIVE ---

def test_invalid_manifest_values(tmp_path):
    assert main(["simulate", "--out", str(tmp_path / "o"), "--k", "1"]) == 2
    bad = _manifest(tmp_path / "bad.json", {"solver": {"gamma_d": -1.0}})
    assert main(["simulate", "--manifest", bad, "--out", str(tmp_path / "o")]) == 2


def test_missing_manifest_is_an_io_error(tmp_path):
    assert main(["simulate", "--manifest", str(tmp_path / "absent.json"), "--out", str(tmp_path / "o")]) == 3


def test_runs_are_archived(tmp_path):
    archive = str(tmp_path / "runs.db")
    _simulate(tmp_path, "sim", "--archive", archive)
    assert main(["separate", "--out", str(tmp_path / "sep"), "--archive", archive]) == 2
    runs = database.get_all_runs(db_path=archive)
    assert [(r["subcommand"], r["status"]) for r in runs] == [("separate", "MissingInputError"), ("simulate", "ok")]
    assert runs[1]["manifest"]["scene"]["kind"] == "sphere"
    assert "error" in runs[0]["diagnostics"]


def test_sweep_rows_are_archived(tmp_path):
    archive = str(tmp_path / "runs.db")
    manifest = _manifest(tmp_path / "sweep.json", {"sweep": {"scenes": [SCENE], "ks": [4, 8], "solvers": ["l2"]}})
    assert main(["sweep", "--manifest", manifest, "--out", str(tmp_path / "sweep"), "--archive", archive]) == 0
    (run,) = database.get_all_runs("sweep", db_path=archive)
    assert [m.k for m in database.get_run_metrics(run["id"], db_path=archive)] == [4, 8]


def test_history_lists_shows_and_deletes_runs(tmp_path, capsys):
    archive = str(tmp_path / "runs.db")
    _simulate(tmp_path, "sim", "--archive", archive)
    (run_id,) = [r["id"] for r in database.get_all_runs(db_path=archive)]
    capsys.readouterr()

    assert main(["history", "--archive", archive]) == 0
    listing = capsys.readouterr().out
    assert run_id in listing and "simulate" in listing
    assert main(["history", "--archive", archive, "--only", "sweep"]) == 0
    assert "no archived runs" in capsys.readouterr().out

    assert main(["history", "--archive", archive, "--run-id", run_id]) == 0
    assert str(tmp_path / "sim") in capsys.readouterr().out
    # browsing the archive does not add to it
    assert len(database.get_all_runs(db_path=archive)) == 1

    assert main(["history", "--archive", archive, "--run-id", run_id, "--delete"]) == 0
    assert database.get_run(run_id, db_path=archive) is None
    assert main(["history", "--archive", archive, "--run-id", run_id]) == 2


def test_history_argument_errors(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "ARCHIVE_PATH", None)
    assert main(["history"]) == 2
    assert main(["history", "--archive", str(tmp_path / "runs.db"), "--delete"]) == 2
