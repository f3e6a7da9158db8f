from pathlib import Path
from typing import Optional

import orjson
import typer

from app.helpers.config_helpers import dump_default_config, load_train_config
from app.helpers.exceptions import PipelineError
from app.logFile import TrainingLogWriter, logger, read_training_log
from app.routes import default_out_dir, parse_frame_range, pipeline_errors
from app.services import report_service, scene_service, trainer_service
from app.services.dataset import dataset_service
from app.services.evalkit_service import convert_to_native
from app.services.scene_service import BACKGROUND_CHECKPOINT
from app.services.trainer import checkpoint_path

training_router = typer.Typer()

TRAIN_LOG = "train_log.jsonl"


@training_router.command("init-bg")
def init_bg(manifest: Path = typer.Argument(..., help="Dataset manifest."),
            config: Optional[Path] = typer.Argument(None, help="Training config (YAML); G4D_CONFIG otherwise."),
            out: Optional[Path] = typer.Option(None, help="Run directory (default: run/ next to the manifest).")):
    """Pretrain the background layer and write the background checkpoint."""
    with pipeline_errors("init-bg"):
        dataset = dataset_service.load_dataset(manifest)
        train_config = load_train_config(config)
        out_dir = default_out_dir(manifest, out)
        with TrainingLogWriter(out_dir / TRAIN_LOG, train_config.log_every) as log:
            scene = trainer_service.init_background(dataset, train_config, log)
        path = out_dir / BACKGROUND_CHECKPOINT
        trainer_service.save(path, scene, None, dataset, stage="background")
        typer.echo(str(path))


@training_router.command("init-frame")
def init_frame(manifest: Path = typer.Argument(..., help="Dataset manifest."),
               config: Optional[Path] = typer.Argument(None, help="Training config (YAML); G4D_CONFIG otherwise."),
               out: Optional[Path] = typer.Option(None, help="Run directory holding background.g4d.")):
    """Seed and train frame 0, writing the scene and both heads."""
    with pipeline_errors("init-frame"):
        dataset = dataset_service.load_dataset(manifest)
        train_config = load_train_config(config)
        out_dir = default_out_dir(manifest, out)
        background = out_dir / BACKGROUND_CHECKPOINT
        if not background.exists():
            raise PipelineError(f"missing background checkpoint {background}; run init-bg first")
        bg_scene, _, _ = scene_service.load_checkpoint(background)
        with TrainingLogWriter(out_dir / TRAIN_LOG, train_config.log_every) as log:
            scene, heads = trainer_service.init_first_frame(dataset, bg_scene, train_config, log)
        metrics = trainer_service.evalkit.frame_metrics(scene, heads, dataset, 0,
                                                        trainer_service.eval_views(dataset, train_config),
                                                        train_config.raster)
        path = checkpoint_path(out_dir, 0)
        trainer_service.save(path, scene, heads, dataset, stage="first_frame", metrics=metrics)
        logger.info(f"Frame 0 metrics: {metrics}")
        typer.echo(str(path))


@training_router.command("track")
def track(manifest: Path = typer.Argument(..., help="Dataset manifest."),
          config: Optional[Path] = typer.Argument(None, help="Training config (YAML); G4D_CONFIG otherwise."),
          frames: str = typer.Option(..., "--frames", help="Inclusive frame range a..b."),
          out: Optional[Path] = typer.Option(None, help="Run directory holding the frame checkpoints.")):
    """Warp, refine and train each frame of the range, resuming after the last finished frame."""
    with pipeline_errors("track"):
        start, end = parse_frame_range(frames)
        dataset = dataset_service.load_dataset(manifest)
        train_config = load_train_config(config)
        out_dir = default_out_dir(manifest, out)
        records = trainer_service.track(dataset, train_config, start, end, out_dir)
        report_service.write_text(out_dir / "convergence.svg",
                                  report_service.convergence_svg(read_training_log(out_dir / TRAIN_LOG)))
        for record in records:
            typer.echo(orjson.dumps(convert_to_native(record)).decode())


@training_router.command("config-defaults")
def config_defaults():
    """Print every training-config key with its default, as YAML."""
    with pipeline_errors("config-defaults"):
        typer.echo(dump_default_config(), nl=False)
