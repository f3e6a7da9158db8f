from pathlib import Path
from typing import Optional

import orjson
import typer

from app.helpers.codec_helpers import atomic_write_bytes, read_embeddings
from app.helpers.exceptions import QueryError
from app.routes import pipeline_errors
from app.services import query_service, report_service, scene_service
from app.services.dataset import dataset_service
from app.services.evalkit_service import convert_to_native
from app.services.neural_heads_service import SemanticHeads
from app.services.scene_service import Camera
from app.services.trainer import checkpoint_path

query_router = typer.Typer()


def load_query(path: Path):
    vectors = read_embeddings(path)
    if vectors.shape[0] != 1:
        raise QueryError(f"query file holds {vectors.shape[0]} vectors, expected 1", path=str(path))
    return vectors[0].astype("float64")


@query_router.command("query")
def query(checkpoints_dir: Path = typer.Argument(..., help="Directory of frame_XXXX.g4d checkpoints."),
          query_file: Path = typer.Argument(..., help="Raw-dimension query vector (embedding file, count 1)."),
          manifest: Optional[Path] = typer.Option(None, help="Take cameras from this dataset instead of the checkpoint."),
          out: Optional[Path] = typer.Option(None, help="Output directory (default: the checkpoints directory).")):
    """Resolve the queried instance at frame 0, then score every frame and select the relevant segments."""
    with pipeline_errors("query"):
        vector = load_query(query_file)
        first = checkpoint_path(checkpoints_dir, 0)
        if not first.exists():
            raise QueryError(f"missing frame-0 checkpoint {first}")
        scene, sections, meta = scene_service.load_checkpoint(first)
        heads = SemanticHeads.from_sections(sections)
        if heads is None:
            raise QueryError(f"checkpoint {first} carries no semantic heads")
        if manifest is not None:
            cameras = dataset_service.load_dataset(manifest, validate=False).rig.cameras
        elif meta.get("cameras"):
            cameras = [Camera.from_dict(c) for c in meta["cameras"]]
        else:
            raise QueryError("checkpoint records no cameras; pass --manifest")

        identity = query_service.identity_query(scene, heads, cameras, vector)
        result = {"instance": identity.instance, "identity_scores": identity.scores,
                  "per_frame_scores": [], "frames": [], "threshold": None, "intervals": []}
        if identity.matched:
            segments = query_service.segment_query(sorted(checkpoints_dir.glob("frame_*.g4d")), identity.instance,
                                                   vector, cameras)
            result.update(per_frame_scores=segments.scores, frames=segments.frames, threshold=segments.threshold,
                          intervals=[list(i) for i in segments.intervals])
            svg = report_service.query_svg(segments.frames, segments.scores, segments.threshold,
                                           segments.intervals, identity.instance)
        else:
            svg = report_service.query_svg([], [], float("nan"), [], None)
        out_dir = out or checkpoints_dir
        payload = orjson.dumps(convert_to_native(result), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)
        atomic_write_bytes(out_dir / "query_result.json", payload)
        report_service.write_text(out_dir / "query_scores.svg", svg)
        typer.echo(payload.decode())
