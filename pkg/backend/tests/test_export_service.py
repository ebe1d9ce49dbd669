"""
Unit tests for ExportService: CSV layouts, deterministic JSON and workbooks.
"""
import json

import numpy as np
import pytest
from openpyxl import load_workbook

from app.core.exceptions import ExportError
from app.services.export_service import ExportService, export_tables


def correlation_rows():
    return [(0.0, 0.125, 0.002), (0.5, np.float64(0.01), 0.001)]


# ============================================================
# CSV TESTS
# ============================================================

class TestCsv:
    """Tests for CSV curves."""

    def test_header_follows_layout(self, tmp_path):
        service = ExportService(tmp_path)
        path = service.write_csv("curve.csv", "correlation", correlation_rows())

        lines = path.read_text().splitlines()
        assert lines[0] == "t,C,stderr"
        assert lines[2] == "0.5,0.01,0.001"

    def test_booleans_and_missing_values(self):
        text = ExportService.to_csv(("name", "passed", "value"), [("norm", True, None), ("q", False, 1)])
        assert text.splitlines()[1:] == ["norm,pass,", "q,fail,1"]

    def test_unknown_kind(self, tmp_path):
        with pytest.raises(ExportError) as exc_info:
            ExportService(tmp_path).write_csv("x.csv", "spectrum", [])

        assert "spectrum" in exc_info.value.message

    def test_no_temp_files_left(self, tmp_path):
        service = ExportService(tmp_path)
        service.write_csv("curve.csv", "correlation", correlation_rows())
        service.write_csv("curve.csv", "correlation", correlation_rows()[:1])

        assert [p.name for p in tmp_path.iterdir()] == ["curve.csv"]
        assert service.written == [str(tmp_path / "curve.csv")] * 2


# ============================================================
# JSON TESTS
# ============================================================

class TestJson:
    """Tests for JSON payloads."""

    def test_keys_sorted(self):
        text = ExportService.to_json({"b": 1, "a": [1, 2]})
        assert text.index('"a"') < text.index('"b"')
        assert text.endswith("\n")

    def test_deterministic(self, tmp_path):
        payload = {"kappa": 0.5, "rows": [[1, 2.5]]}
        first = ExportService(tmp_path / "one").write_json("r.json", payload).read_bytes()
        second = ExportService(tmp_path / "two").write_json("r.json", payload).read_bytes()
        assert first == second
        assert json.loads(first) == payload


# ============================================================
# WORKBOOK TESTS
# ============================================================

class TestWorkbook:
    """Tests for the optional spreadsheet export."""

    def test_one_sheet_per_table(self, tmp_path):
        service = ExportService(tmp_path)
        path = service.write_workbook(
            "run.xlsx",
            {"correlation": ("correlation", correlation_rows()), "bound": ("bound", [(1e-3, 0.2, 0.01)])},
            title="run",
        )

        wb = load_workbook(path)
        assert wb.sheetnames == ["correlation", "bound"]
        ws = wb["correlation"]
        assert ws["A1"].value == "run"
        assert [c.value for c in ws[3]] == ["t", "C", "stderr"]
        assert ws["B5"].value == pytest.approx(0.01)

    def test_empty_tables(self, tmp_path):
        with pytest.raises(ExportError):
            ExportService(tmp_path).to_workbook({})

    def test_unknown_sheet_kind(self, tmp_path):
        with pytest.raises(ExportError):
            ExportService(tmp_path).to_workbook({"s": ("spectrum", [])})


# ============================================================
# EXPORT_TABLES TESTS
# ============================================================

class TestExportTables:
    """Tests for the per-format dispatch."""

    def test_formats_select_files(self, tmp_path):
        service = ExportService(tmp_path)
        tables = {"c": ("correlation", correlation_rows())}

        paths = export_tables(service, "greenkubo", tables, ["csv", "json"], payload={"ok": True})
        assert sorted(p.split("/")[-1] for p in paths) == ["greenkubo.json", "greenkubo_c.csv"]

        paths = export_tables(service, "greenkubo", tables, ["xlsx"])
        assert paths == [str(tmp_path / "greenkubo.xlsx")]

    def test_json_needs_payload(self, tmp_path):
        assert export_tables(ExportService(tmp_path), "s", {}, ["json"]) == []
