import csv
import io
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side

from app.core.exceptions import ExportError

logger = logging.getLogger(__name__)

Table = Tuple[Sequence[str], Iterable[Sequence[Any]]]


class ExportService:
    """Writes run artifacts: CSV curves, JSON results and an optional workbook."""

    EXPORT_COLUMNS = {
        "correlation": ("t", "C", "stderr"),
        "diffusivity": ("t", "D", "stderr"),
        "displacement": ("t", "D", "stderr"),
        "laplace": ("lambda", "laplace_est", "stderr"),
        "density": ("t", "density", "stderr"),
        "bound": ("lambda", "B", "fit_residual"),
        "susceptibility": ("a", "b", "chi"),
        "flux": ("a", "j", "flux"),
        "checks": ("name", "passed", "value", "expected", "tolerance"),
    }

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.written: List[str] = []

    def _target(self, name: str) -> Path:
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ExportError(f"Cannot create output directory {self.output_dir}: {e}")
        return self.output_dir / name

    def _write_atomic(self, name: str, payload: Union[str, bytes]) -> Path:
        """Write through a temp file in the target directory, then rename over the target."""
        target = self._target(name)
        binary = isinstance(payload, bytes)
        try:
            with tempfile.NamedTemporaryFile(
                "wb" if binary else "w",
                encoding=None if binary else "utf-8",
                newline=None if binary else "",
                dir=self.output_dir,
                prefix=f".{name}.",
                delete=False,
            ) as f:
                f.write(payload)
                temp_name = f.name
            os.replace(temp_name, target)
        except OSError as e:
            raise ExportError(f"Failed to write {target}: {e}")
        self.written.append(str(target))
        logger.info(f"Wrote {target}")
        return target

    @staticmethod
    def to_csv(columns: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
        output = io.StringIO()
        writer = csv.writer(output, lineterminator="\n")

        # Header row
        writer.writerow(list(columns))

        # Data rows
        for row in rows:
            writer.writerow([ExportService._format_value(v) for v in row])

        return output.getvalue()

    @staticmethod
    def to_json(payload: Any) -> str:
        if hasattr(payload, "model_dump"):
            payload = payload.model_dump(mode="json")
        return json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n"

    def write_csv(self, name: str, kind: str, rows: Iterable[Sequence[Any]]) -> Path:
        if kind not in self.EXPORT_COLUMNS:
            raise ExportError(f"No column layout for '{kind}'")
        return self._write_atomic(name, self.to_csv(self.EXPORT_COLUMNS[kind], rows))

    def write_json(self, name: str, payload: Any) -> Path:
        return self._write_atomic(name, self.to_json(payload))

    def write_text(self, name: str, text: str) -> Path:
        return self._write_atomic(name, text)

    def to_workbook(self, tables: Mapping[str, Tuple[str, Iterable[Sequence[Any]]]], title: Optional[str] = None) -> bytes:
        """One sheet per table; ``tables`` maps sheet name to (column kind, rows)."""
        if not tables:
            raise ExportError("No tables to export")

        wb = Workbook()
        wb.remove(wb.active)

        # Styles
        header_font = Font(bold=True, color="FFFFFF")
        header_fill = PatternFill(start_color="4472C4", end_color="4472C4", fill_type="solid")
        header_alignment = Alignment(horizontal="center", vertical="center")
        thin_border = Border(
            left=Side(style='thin'),
            right=Side(style='thin'),
            top=Side(style='thin'),
            bottom=Side(style='thin')
        )

        for sheet_name, (kind, rows) in tables.items():
            columns = self.EXPORT_COLUMNS.get(kind)
            if columns is None:
                raise ExportError(f"No column layout for '{kind}'")
            ws = wb.create_sheet(title=sheet_name[:31])
            start = 1
            if title:
                ws['A1'] = title
                ws['A1'].font = Font(bold=True, size=14)
                start = 3

            for col_idx, col_name in enumerate(columns, 1):
                cell = ws.cell(row=start, column=col_idx, value=col_name)
                cell.font = header_font
                cell.fill = header_fill
                cell.alignment = header_alignment
                cell.border = thin_border

            for row_idx, row in enumerate(rows, start + 1):
                for col_idx, value in enumerate(row, 1):
                    cell = ws.cell(row=row_idx, column=col_idx, value=self._format_value(value))
                    cell.border = thin_border
                    if isinstance(value, float):
                        cell.number_format = '0.000000E+00'

            for i in range(1, len(columns) + 1):
                ws.column_dimensions[chr(64 + i)].width = 18

            # Freeze header row
            ws.freeze_panes = f"A{start + 1}"

        output = io.BytesIO()
        wb.save(output)
        return output.getvalue()

    def write_workbook(self, name: str, tables: Mapping[str, Tuple[str, Iterable[Sequence[Any]]]], title: Optional[str] = None) -> Path:
        return self._write_atomic(name, self.to_workbook(tables, title))

    @staticmethod
    def _format_value(value: Any):
        """Format a value for export."""
        if value is None:
            return ""
        if isinstance(value, bool):
            return "pass" if value else "fail"
        if hasattr(value, "item"):
            return value.item()
        return value


def export_tables(
    service: ExportService,
    stem: str,
    tables: Dict[str, Tuple[str, List[Sequence[Any]]]],
    formats: Sequence[str],
    payload: Optional[Any] = None,
) -> List[str]:
    """Write each table as CSV, the payload as JSON and all tables as one workbook, per ``formats``."""
    paths: List[str] = []
    if "csv" in formats:
        for name, (kind, rows) in tables.items():
            paths.append(str(service.write_csv(f"{stem}_{name}.csv", kind, rows)))
    if "json" in formats and payload is not None:
        paths.append(str(service.write_json(f"{stem}.json", payload)))
    if "xlsx" in formats and tables:
        paths.append(str(service.write_workbook(f"{stem}.xlsx", tables, title=stem)))
    return paths
