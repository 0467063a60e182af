"""
Report View - Plain-text reports
Renders parameter accounting, gradient checks and fidelity scores as
strings; the controller decides where they go.
"""

from typing import Iterable, List, Sequence, Tuple

from unicontrol_desk.models.evaluation import FidelityReport
from unicontrol_desk.models.grad_core import GradcheckReport
from unicontrol_desk.models.trainer import ParamTable

# Published counts of the full-scale model (millions), for comparison.
REFERENCE_ROWS: Tuple[Tuple[str, str], ...] = (
    ("base denoiser", "1065.7M"),
    ("control branch", "361M"),
    ("adapter module (per task)", "0.06M"),
    ("hypernet", "12.7M"),
)
REFERENCE_TOTALS: Tuple[Tuple[str, str], ...] = (
    ("unified, 9 tasks", "1.44B"),
    ("stacked 9 single-task models", "4.32B"),
)


def _table(rows: Sequence[Tuple[str, str]], title: str) -> List[str]:
    width = max(len(label) for label, _ in rows)
    lines = [title, "-" * len(title)]
    lines.extend(f"  {label.ljust(width)}  {value:>14}" for label, value in rows)
    return lines


def format_param_table(table: ParamTable, reference: bool = True) -> str:
    """Per-component counts and the unified vs stacked totals."""
    k = table.num_tasks
    components = [(label, f"{count:,}") for label, count in table.rows]
    totals = [
        (f"unified model ({k} tasks)", f"{table.unified:,}"),
        (f"stacked: {k} x (base + control)", f"{table.stacked:,}"),
        (f"shared base + {k} control branches", f"{table.multi_controlnet:,}"),
        ("task-specific overhead of unified", f"{table.task_specific:,}"),
        ("adapters + hypernet", f"{k * table.adapter_module + table.hypernet:,}"),
        ("one control branch", f"{table.control:,}"),
    ]
    lines = _table(components, "Parameters")
    lines.append("")
    lines.extend(_table(totals, "Totals"))
    if reference:
        lines.append("")
        lines.extend(_table(REFERENCE_ROWS + REFERENCE_TOTALS, "Reference (full-scale model)"))
    return "\n".join(lines) + "\n"


def format_gradcheck(reports: Iterable[GradcheckReport]) -> str:
    """Concatenated report texts followed by a one-line verdict."""
    reports = list(reports)
    body = "".join(report.to_text() for report in reports)
    failed = [report.title for report in reports if not report.passed]
    verdict = "all gradient checks passed" if not failed else f"FAILED: {', '.join(failed)}"
    return f"{body}{verdict}\n"


def format_fidelity(report: FidelityReport) -> str:
    rows = [
        ("task", report.task),
        ("samples", str(report.n_samples)),
        (f"conditional {report.metric}", f"{report.conditional_iou:.4f}"),
        ("conditional f1", f"{report.conditional_f1:.4f}"),
        (f"unconditional {report.metric}", f"{report.unconditional_iou:.4f}"),
        ("unconditional f1", f"{report.unconditional_f1:.4f}"),
    ]
    return "\n".join(_table(rows, "Condition fidelity")) + "\n"
