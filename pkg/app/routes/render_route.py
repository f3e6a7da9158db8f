from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import typer

from app.helpers.codec_helpers import write_png_rgb
from app.helpers.exceptions import PipelineError
from app.routes import pipeline_errors
from app.services import editing_service, query_service, rasterizer_service, scene_service
from app.services.dataset.dataset_service import read_camera
from app.services.neural_heads_service import SemanticHeads

render_router = typer.Typer()


def load_scene_with_heads(checkpoint: Path, require_heads: bool):
    scene, sections, meta = scene_service.load_checkpoint(checkpoint)
    heads = SemanticHeads.from_sections(sections)
    if require_heads and heads is None:
        raise PipelineError(f"checkpoint {checkpoint} carries no semantic heads")
    return scene, heads, sections, meta


@render_router.command("render")
def render(checkpoint: Path = typer.Argument(..., help="Scene checkpoint (.g4d)."),
           camera: Path = typer.Argument(..., help="Camera JSON {K, R, t, width, height}."),
           out_png: Path = typer.Argument(..., help="Output color image."),
           feature: Optional[Path] = typer.Option(None, help="Also write the feature map (F32M)."),
           alpha: Optional[Path] = typer.Option(None, help="Also write the alpha map (F32M)."),
           depth: Optional[Path] = typer.Option(None, help="Also write the depth map (F32M)."),
           instance: Optional[int] = typer.Option(None, help="Render only the primitives of this instance.")):
    """Render a checkpoint from a camera, optionally restricted to one instance."""
    with pipeline_errors("render"):
        cam = read_camera(camera)
        scene, heads, _, _ = load_scene_with_heads(checkpoint, require_heads=instance is not None)
        if instance is None:
            target = rasterizer_service.render_scene(scene, cam)
            rasterizer_service.save_render(target, out_png, feature, alpha, depth)
            return
        result = query_service.render_instance(scene, heads, cam, instance)
        if result.target is None:
            write_png_rgb(out_png, np.zeros((cam.height, cam.width, 3)))
            typer.echo(f"instance={instance} primitives=0 contributor_audit=ok")
            return
        rasterizer_service.save_render(result.target, out_png, feature, alpha, depth)
        audit = "ok" if result.audit_ok else "failed"
        typer.echo(f"instance={instance} primitives={int(result.selected.sum())} contributor_audit={audit}")
        if not result.audit_ok:
            raise PipelineError(f"instance render of {instance} has foreign contributors")


@render_router.command("edit")
def edit(checkpoint: Path = typer.Argument(..., help="Scene checkpoint (.g4d)."),
         out_checkpoint: Path = typer.Argument(..., help="Edited checkpoint to write."),
         instance: int = typer.Option(..., help="Instance id to edit."),
         translate: Tuple[float, float, float] = typer.Option((0.0, 0.0, 0.0), help="Offset x y z."),
         rotate_deg: Tuple[float, float, float] = typer.Option((0.0, 0.0, 0.0), help="Euler angles x y z in degrees."),
         scale: float = typer.Option(1.0, help="Uniform scale about the instance centroid."),
         remove: bool = typer.Option(False, "--remove", help="Delete the instance.")):
    """Remove an instance or move it with a similarity transform."""
    with pipeline_errors("edit"):
        scene, heads, sections, meta = load_scene_with_heads(checkpoint, require_heads=True)
        edited, report = editing_service.edit_instance(scene, heads, instance, translate, rotate_deg, scale, remove)
        meta = {**meta, "edit": {"instance": instance, "selected": report.selected, "removed": report.removed}}
        scene_service.save_checkpoint(out_checkpoint, edited, sections, meta)
        typer.echo(f"instance={instance} selected={report.selected} removed={str(report.removed).lower()}")
