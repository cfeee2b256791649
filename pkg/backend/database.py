import sqlite3  # Standard library for interacting with SQLite databases
import json  # Serializes manifests and diagnostics dictionaries into text columns
import math
import uuid  # Run identifiers
from typing import Any, Dict, Iterable, List, Optional

from backend.schemas import MetricReport

# Fallback archive file when neither the caller nor the settings name one.
DB_NAME = "polarsep_runs.db"


def _connect(db_path: Optional[str]) -> sqlite3.Connection:
    conn = sqlite3.connect(db_path or DB_NAME)
    conn.row_factory = sqlite3.Row  # Access columns by name (row['status'])
    return conn


def _encode_psnr(value: float) -> Optional[float]:
    # SQLite has no infinity literal that survives every driver; NULL means "identical".
    return None if math.isinf(value) else float(value)


def _decode_psnr(value: Optional[float]) -> float:
    return math.inf if value is None else float(value)


def init_db(db_path: Optional[str] = None) -> None:
    """
    Creates the archive tables ('runs' and 'metrics') if they do not already exist.
    Safe to call on every CLI start.
    """
    conn = _connect(db_path)
    c = conn.cursor()

    # Table 1: Runs
    # - id: UUID string.
    # - subcommand: simulate / separate / evaluate / sweep / normals.
    # - manifest: the full manifest as JSON, so the run can be replayed.
    # - out_dir: where the artefacts were written.
    # - status: 'ok' or the error class name.
    # - diagnostics: JSON sidecar (solver flags, phase estimate, wall time).
    c.execute('''
        CREATE TABLE IF NOT EXISTS runs (
            id TEXT PRIMARY KEY,
            subcommand TEXT NOT NULL,
            manifest TEXT,
            out_dir TEXT,
            status TEXT DEFAULT 'ok',
            diagnostics TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        )
    ''')

    # Table 2: Metrics
    # One row per evaluated (scene, pattern, K, solver) combination of a run.
    c.execute('''
        CREATE TABLE IF NOT EXISTS metrics (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_id TEXT,
            scene TEXT,
            pattern TEXT,
            k INTEGER,
            solver TEXT,
            psnr_diffuse REAL,
            psnr_specular REAL,
            psnr_sum REAL,
            wall_time_s REAL,
            FOREIGN KEY(run_id) REFERENCES runs(id)
        )
    ''')
    conn.commit()
    conn.close()


def record_run(subcommand: str, manifest: Dict[str, Any], out_dir: Optional[str] = None,
               status: str = "ok", diagnostics: Optional[Dict[str, Any]] = None,
               db_path: Optional[str] = None) -> str:
    """
    Inserts one run and returns its id.
    """
    run_id = str(uuid.uuid4())
    conn = _connect(db_path)
    c = conn.cursor()
    c.execute(
        "INSERT INTO runs (id, subcommand, manifest, out_dir, status, diagnostics) VALUES (?, ?, ?, ?, ?, ?)",
        (run_id, subcommand, json.dumps(manifest, sort_keys=True), out_dir, status,
         json.dumps(diagnostics, sort_keys=True, default=str) if diagnostics else None),
    )
    conn.commit()
    conn.close()
    return run_id


def add_metric_rows(run_id: str, rows: Iterable[MetricReport], db_path: Optional[str] = None) -> int:
    """Stores evaluation rows under a run. Returns how many were written."""
    records = [
        (run_id, r.scene, r.pattern, r.k, r.solver, _encode_psnr(r.psnr_diffuse),
         _encode_psnr(r.psnr_specular), _encode_psnr(r.psnr_sum), r.wall_time_s)
        for r in rows
    ]
    conn = _connect(db_path)
    c = conn.cursor()
    c.executemany(
        "INSERT INTO metrics (run_id, scene, pattern, k, solver, psnr_diffuse, psnr_specular, psnr_sum, wall_time_s) "
        "VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
        records,
    )
    conn.commit()
    conn.close()
    return len(records)


def _run_dict(row: sqlite3.Row) -> Dict[str, Any]:
    run = dict(row)
    # Parse the JSON columns back into dictionaries
    run["manifest"] = json.loads(run["manifest"]) if run["manifest"] else {}
    run["diagnostics"] = json.loads(run["diagnostics"]) if run["diagnostics"] else {}
    return run


def get_run(run_id: str, db_path: Optional[str] = None) -> Optional[Dict[str, Any]]:
    """One run with its manifest and diagnostics decoded, or None for an unknown id."""
    conn = _connect(db_path)
    c = conn.cursor()
    c.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
    row = c.fetchone()
    conn.close()
    return _run_dict(row) if row else None


def get_all_runs(subcommand: Optional[str] = None, db_path: Optional[str] = None) -> List[Dict[str, Any]]:
    """All archived runs, newest first, optionally filtered by subcommand."""
    conn = _connect(db_path)
    c = conn.cursor()
    if subcommand:
        c.execute("SELECT * FROM runs WHERE subcommand = ? ORDER BY created_at DESC, rowid DESC", (subcommand,))
    else:
        c.execute("SELECT * FROM runs ORDER BY created_at DESC, rowid DESC")
    rows = c.fetchall()
    conn.close()
    return [_run_dict(row) for row in rows]


def get_run_metrics(run_id: str, db_path: Optional[str] = None) -> List[MetricReport]:
    """Evaluation rows of one run, in insertion order."""
    conn = _connect(db_path)
    c = conn.cursor()
    c.execute("SELECT * FROM metrics WHERE run_id = ? ORDER BY id ASC", (run_id,))
    rows = c.fetchall()
    conn.close()
    return [
        MetricReport(scene=row["scene"], pattern=row["pattern"], k=row["k"], solver=row["solver"],
                     psnr_diffuse=_decode_psnr(row["psnr_diffuse"]),
                     psnr_specular=_decode_psnr(row["psnr_specular"]),
                     psnr_sum=_decode_psnr(row["psnr_sum"]),
                     wall_time_s=row["wall_time_s"] or 0.0)
        for row in rows
    ]


def delete_run(run_id: str, db_path: Optional[str] = None) -> bool:
    """
    Deletes a run and its metric rows. Artefact files on disk are left alone.
    Returns False when the id was unknown.
    """
    conn = _connect(db_path)
    c = conn.cursor()
    c.execute("DELETE FROM metrics WHERE run_id = ?", (run_id,))
    c.execute("DELETE FROM runs WHERE id = ?", (run_id,))
    deleted = c.rowcount > 0
    conn.commit()
    conn.close()
    return deleted
