import math

import pandas as pd

from app.services.report_service import ReportService


def test_line_chart_is_an_svg_document():
    svg = ReportService.line_chart_svg([0, 1, 2], {"score": [0.1, 0.5, 0.4]}, "Scores", "frame", "value",
                                       threshold=0.3, intervals=[(1, 2)])
    assert svg.lstrip().startswith("<?xml")
    assert "</svg>" in svg


def test_convergence_chart_handles_records_and_nothing():
    service = ReportService()
    records = [{"stage": "background", "iteration": i, "total": 1.0 / (i + 1)} for i in range(5)]
    records += [{"stage": "frame", "iteration": i, "total": 0.5} for i in range(3)]
    assert "</svg>" in service.convergence_svg(records)
    assert "</svg>" in service.convergence_svg([])


def test_query_chart_tolerates_nan_threshold():
    svg = ReportService().query_svg([0, 1], [math.nan, math.nan], math.nan, [], None)
    assert "</svg>" in svg


def test_metrics_html_lists_summary_and_tables():
    frames = pd.DataFrame({"frame": [0, 1], "psnr": [30.0, math.inf], "mIoU": [0.8, 0.9]})
    table = pd.DataFrame({"frame": [0, 1], "view": [0, 0], "psnr": [30.0, math.inf], "mIoU": [0.8, 0.9]})
    html = ReportService().metrics_html({"frames": frames, "table": table,
                                         "summary": {"psnr": math.inf, "mIoU": 0.85}}, title="Run <a>")
    assert "<title>Run &lt;a&gt;</title>" in html
    assert "exact" in html
    assert "0.8500" in html
    assert html.count("<svg") == 2


def test_write_text(tmp_path):
    path = tmp_path / "out" / "report.html"
    ReportService.write_text(path, "<p>ok</p>")
    assert path.read_text(encoding="utf-8") == "<p>ok</p>"
