import os  # File replacement for atomic writes
import tempfile  # Temporary files next to the destination
from typing import Iterable, Optional

from fpdf import FPDF  # Lightweight library for generating PDF files programmatically

from backend.schemas import MetricReport


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """
    Writes `payload` to `path` through a temporary file in the same directory,
    then renames it over the destination. Readers never see a partial file.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def clean_text(text: str) -> str:
    """
    Sanitizes text for the PDF core fonts.

    FPDF's built-in fonts only cover Latin-1; characters such as the Greek
    letters used in parameter names are replaced by '?'.
    """
    if not text:
        return ""
    return text.encode("latin-1", "replace").decode("latin-1")


def _format_psnr(value: float) -> str:
    return "identical" if value == float("inf") else f"{value:.2f}"


def generate_pdf_report(rows: Iterable[MetricReport], title: str = "polarsep - separation report",
                        notes: Optional[str] = None) -> bytes:
    """
    Generates a printable PDF table from evaluation rows.
    Returns the raw PDF bytes.
    """
    pdf = FPDF()
    pdf.add_page()
    pdf.set_auto_page_break(auto=True, margin=15)

    # --- HEADER SECTION ---
    pdf.set_font("Helvetica", "B", 16)
    pdf.cell(0, 10, clean_text(title), new_x="LMARGIN", new_y="NEXT", align="C")
    pdf.ln(6)
    if notes:
        pdf.set_font("Helvetica", size=10)
        pdf.multi_cell(0, 6, clean_text(notes), new_x="LMARGIN", new_y="NEXT")
        pdf.ln(4)

    # --- TABLE SECTION ---
    columns = [("Scene", 40), ("Pattern", 25), ("K", 12), ("Solver", 25),
               ("PSNR d", 28), ("PSNR s", 28), ("PSNR sum", 28)]
    pdf.set_font("Helvetica", "B", 10)
    for name, width in columns:
        pdf.cell(width, 8, name, border=1, align="C")
    pdf.ln(8)

    # Monospace for the numbers so the columns line up
    pdf.set_font("Courier", size=9)
    for row in rows:
        cells = [row.scene, row.pattern, str(row.k), row.solver,
                 _format_psnr(row.psnr_diffuse), _format_psnr(row.psnr_specular),
                 _format_psnr(row.psnr_sum)]
        for (_, width), value in zip(columns, cells):
            pdf.cell(width, 7, clean_text(value), border=1)
        pdf.ln(7)

    return bytes(pdf.output())
