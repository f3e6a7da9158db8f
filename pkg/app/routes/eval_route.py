from pathlib import Path
from typing import List, Optional

import orjson
import typer

from app.helpers.codec_helpers import atomic_write_bytes
from app.helpers.exceptions import PipelineError
from app.routes import pipeline_errors
from app.services import evalkit_service, query_service, report_service
from app.services.dataset import dataset_service
from app.services.evalkit_service import convert_to_native

eval_router = typer.Typer()


@eval_router.command("eval")
def evaluate(checkpoints_dir: Path = typer.Argument(
                 ..., help="Directory of frame_XXXX.g4d checkpoints, or of background.g4d alone."),
             manifest: Path = typer.Argument(..., help="Dataset manifest the run was trained on."),
             view: Optional[List[int]] = typer.Option(None, help="Views to score (repeatable); all by default."),
             out: Optional[Path] = typer.Option(None, help="Output directory (default: the checkpoints directory).")):
    """Per-frame and per-view PSNR, SSIM, mIoU, Recall and F1 as JSON and an HTML report."""
    with pipeline_errors("eval"):
        dataset = dataset_service.load_dataset(manifest)
        views = view or None
        if views and any(v >= dataset.V for v in views):
            raise PipelineError(f"view index outside 0..{dataset.V - 1}")
        result = evalkit_service.evaluate_run(dataset, checkpoints_dir, views, threads=query_service.threads)
        out_dir = out or checkpoints_dir
        atomic_write_bytes(out_dir / "metrics.json", evalkit_service.metrics_json(result))
        report_service.write_text(out_dir / "report.html", report_service.metrics_html(result))
        typer.echo(orjson.dumps(convert_to_native(result["summary"]), option=orjson.OPT_SORT_KEYS).decode())
