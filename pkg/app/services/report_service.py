from io import StringIO
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import pandas as pd
from jinja2 import Environment, select_autoescape

from app.helpers.codec_helpers import atomic_write_bytes
from app.logFile import logger
from app.services.evalkit_service import convert_to_native

REPORT_TEMPLATE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{{ title }}</title>
<style>
body { font-family: sans-serif; margin: 2em; }
table { border-collapse: collapse; margin-bottom: 2em; }
td, th { border: 1px solid #ccc; padding: 4px 8px; text-align: right; }
</style>
</head>
<body>
<h1>{{ title }}</h1>
<h2>Sequence means</h2>
<table>
{% for name, value in summary.items() %}<tr><th>{{ name }}</th><td>{{ value }}</td></tr>
{% endfor %}</table>
{% for chart in charts %}<figure>{{ chart | safe }}</figure>
{% endfor %}
<h2>Per frame</h2>
{{ frames | safe }}
<h2>Per frame and view</h2>
{{ views | safe }}
</body>
</html>
"""


class ReportService:
    """
    Renders metric tables and charts: SVG line charts through matplotlib and the HTML
    evaluation report through Jinja2.
    """

    def __init__(self):
        self.environment = Environment(autoescape=select_autoescape(["html"]))
        self.template = self.environment.from_string(REPORT_TEMPLATE)

    @staticmethod
    def line_chart_svg(x: Sequence[float], series: Mapping[str, Sequence[float]], title: str, xlabel: str,
                       ylabel: str, threshold: Optional[float] = None,
                       intervals: Optional[List[Tuple[int, int]]] = None, log_y: bool = False) -> str:
        """
        Returns:
            str: An SVG document.
        """
        fig, ax = plt.subplots(figsize=(7, 3.5))
        try:
            for name, values in series.items():
                ax.plot(list(x)[:len(values)], list(values), label=name, linewidth=1.2)
            if threshold is not None:
                ax.axhline(threshold, color="gray", linestyle="--", linewidth=1.0, label="threshold")
            for start, end in intervals or []:
                ax.axvspan(start - 0.5, end + 0.5, color="tab:orange", alpha=0.2)
            if log_y:
                ax.set_yscale("log")
            ax.set_title(title)
            ax.set_xlabel(xlabel)
            ax.set_ylabel(ylabel)
            if series:
                ax.legend(loc="best", fontsize="small")
            fig.tight_layout()
            buffer = StringIO()
            fig.savefig(buffer, format="svg")
        finally:
            plt.close(fig)
        return buffer.getvalue()

    def convergence_svg(self, records: List[Dict]) -> str:
        """Total energy per logged iteration, one trace per stage, iterations concatenated across frames."""
        if not records:
            return self.line_chart_svg([], {}, "Convergence", "iteration", "total energy")
        table = pd.DataFrame(records)
        table["step"] = table.groupby("stage").cumcount()
        series, steps = {}, []
        for stage, group in table.groupby("stage", sort=False):
            series[stage] = group["total"].tolist()
            if len(group) > len(steps):
                steps = group["step"].tolist()
        positive = bool((table["total"] > 0).all())
        return self.line_chart_svg(steps, series, "Convergence", "logged iteration", "total energy", log_y=positive)

    def query_svg(self, frames: Sequence[int], scores: Sequence[float], threshold: float,
                  intervals: List[Tuple[int, int]], instance: Optional[int]) -> str:
        title = f"Relevance of instance {instance} per frame" if instance is not None else "Relevance per frame"
        finite_threshold = threshold if threshold == threshold else None
        return self.line_chart_svg(frames, {"score": scores}, title, "frame", "mean relevance",
                                   threshold=finite_threshold, intervals=intervals)

    def metrics_html(self, result: Dict, title: str = "Evaluation report") -> str:
        """
        Args:
            result (dict): Output of `EvalkitService.evaluate_run`.

        Returns:
            str: A self-contained HTML document with inline SVG charts.
        """
        frames: pd.DataFrame = result["frames"]
        charts = []
        if "psnr" in frames:
            charts.append(self.line_chart_svg(frames["frame"], {"PSNR": frames["psnr"].tolist()},
                                              "PSNR per frame", "frame", "dB"))
        seg = {name: frames[name].tolist() for name in ("mIoU", "Recall", "F1") if name in frames}
        if seg:
            charts.append(self.line_chart_svg(frames["frame"], seg, "Segmentation per frame", "frame", "score"))
        summary = convert_to_native(result["summary"])
        return self.template.render(
            title=title,
            summary={k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in summary.items()},
            charts=charts,
            frames=self._table_html(frames),
            views=self._table_html(result["table"]),
        )

    @staticmethod
    def _table_html(table: pd.DataFrame) -> str:
        return table.replace([float("inf")], "exact").to_html(index=False, float_format=lambda v: f"{v:.4f}",
                                                             na_rep="-")

    @staticmethod
    def write_text(path: Path, text: str) -> None:
        atomic_write_bytes(path, text.encode("utf-8"))
        logger.info(f"Wrote {path}")
