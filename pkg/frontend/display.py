import math
from typing import Any, Dict, Iterable, List

import pandas as pd

from backend.metrics_io import metrics_frame
from backend.schemas import MetricReport


def render_header(subcommand: str, out_dir: str) -> str:
    """One-line banner printed before a subcommand runs."""
    return f"polarsep {subcommand} -> {out_dir}"


def render_metric_table(rows: Iterable[MetricReport]) -> str:
    """
    Metric rows as an aligned console table (same columns as the CSV).
    """
    frame = metrics_frame(rows)
    if frame.empty:
        return "(no rows)"
    return frame.to_string(index=False)


def render_separation(diagnostics: Dict[str, Any]) -> str:
    # 1. Phase line: where the phase came from and, when estimated, how well it fits
    lines = [f"phase      {diagnostics['phase_deg']:.3f} deg ({diagnostics['phase_source']})"]
    estimate = diagnostics.get("phase_estimate")
    if estimate:
        lines.append(f"fit rms    {estimate['residual']:.3e}  mu_d={estimate['mu_d']:.4f}  mu_s={estimate['mu_s']:.4f}")

    # 2. Solver summary
    lines.append(f"solver     {diagnostics['solver']}  iterations={diagnostics['iterations']}  "
                 f"residual={diagnostics['final_residual']:.3e}")
    if not diagnostics.get("converged", True):
        lines.append("WARNING    solver did not converge: " + ", ".join(diagnostics.get("flags", [])))
    lines.append(f"wall time  {diagnostics['wall_time_s']:.2f} s")
    return "\n".join(lines)


def render_normals_report(report: Dict[str, Any]) -> str:
    """Angular errors of every normal map that was compared, one line each."""
    rows = []
    for name, comparisons in report.get("angular_error_deg", {}).items():
        for against, stats in comparisons.items():
            rows.append({"normals": name, "against": against,
                         "mean_deg": stats["mean"], "median_deg": stats["median"]})
    if not rows:
        return f"valid pixels {report.get('valid_fraction', 0.0):.1%} (no reference to compare against)"
    table = pd.DataFrame(rows).to_string(index=False, float_format=lambda v: f"{v:.3f}")
    return f"{table}\nvalid pixels {report['valid_fraction']:.1%}"


def render_history(runs: List[Dict[str, Any]]) -> str:
    """Archived runs, newest first, one line each."""
    if not runs:
        return "(no archived runs)"
    frame = pd.DataFrame(runs, columns=["id", "created_at", "subcommand", "status", "out_dir"])
    return frame.to_string(index=False)


def render_archived_run(run: Dict[str, Any], rows: Iterable[MetricReport]) -> str:
    lines = [f"run        {run['id']}",
             f"created    {run['created_at']}",
             f"command    {run['subcommand']} ({run['status']})",
             f"output     {run['out_dir'] or '-'}"]
    error = run["diagnostics"].get("error")
    if error:
        lines.append(f"error      {error}")
    lines.append(render_metric_table(rows))
    return "\n".join(lines)


def format_psnr(value: float) -> str:
    return "identical" if math.isinf(value) else f"{value:.2f} dB"
