from pathlib import Path
from typing import Optional

import numpy as np
import orjson
import typer
from pydantic import ValidationError

from app.helpers.codec_helpers import atomic_write_bytes, write_embeddings, write_label_png
from app.helpers.config_helpers import load_train_config
from app.helpers.exceptions import DatasetError
from app.logFile import logger
from app.routes import pipeline_errors
from app.services import identity_align_service, neural_heads_service
from app.services.dataset import dataset_service, synthetic_service
from app.services.dataset.synthetic_service import SyntheticSpec

dataset_router = typer.Typer()

ALIGNED_TEMPLATE = "aligned/v{view:02d}_t{frame:04d}.png"
COMPRESSED_TEMPLATE = "compressed/t{frame:04d}.emb"
AUTOENCODER_FILE = "autoencoder.json"


@dataset_router.command("gen")
def gen(spec_file: Path = typer.Argument(..., help="Synthetic spec JSON."),
        out_dir: Path = typer.Argument(..., help="Directory to write the dataset into.")):
    """Generate a synthetic dataset with its ground-truth sidecar."""
    with pipeline_errors("gen"):
        try:
            spec = SyntheticSpec.model_validate(orjson.loads(spec_file.read_bytes()))
        except (OSError, orjson.JSONDecodeError) as e:
            raise DatasetError(f"cannot read synthetic spec: {e}", path=str(spec_file), rule="spec")
        except ValidationError as e:
            raise DatasetError(f"invalid synthetic spec: {e.errors()[0]['msg']}", path=str(spec_file), rule="spec")
        manifest = synthetic_service.gen_synthetic(spec, out_dir)
        typer.echo(str(manifest))


@dataset_router.command("align")
def align(manifest: Path = typer.Argument(..., help="Dataset manifest.")):
    """Match every view's labels to the canonical labeling and write canonicalized masks."""
    with pipeline_errors("align"):
        dataset = dataset_service.load_dataset(manifest)
        sequences = [[dataset.raw_mask(v, t) for t in range(dataset.T)] for v in range(dataset.V)]
        canonical = [dataset.canonical_mask(v) for v in range(dataset.V)]
        mappings, aligned, dropped = identity_align_service.align_views(canonical, sequences)
        for v, frames in enumerate(aligned):
            for t, labels in enumerate(frames):
                write_label_png(dataset.path(ALIGNED_TEMPLATE, v, t), labels)
        dataset.update_manifest(aligned_mask_template=ALIGNED_TEMPLATE)
        report = {"views": [{"view": v, "mapping": {str(k): int(c) for k, c in m.mapping.items()},
                             "unmatched": [int(x) for x in m.unmatched_view]} for v, m in enumerate(mappings)],
                  "dropped_pixels": int(dropped)}
        atomic_write_bytes(dataset.root / "alignment.json", orjson.dumps(report, option=orjson.OPT_INDENT_2))
        logger.info(f"Aligned {dataset.V} views, {dropped} pixels dropped")
        typer.echo(orjson.dumps(report).decode())


@dataset_router.command("compress-emb")
def compress_emb(manifest: Path = typer.Argument(..., help="Dataset manifest."),
                 steps: int = typer.Option(None, help="Gradient steps after the PCA warm start."),
                 config: Optional[Path] = typer.Option(None, help="Training config (YAML) supplying lr.autoencoder.")):
    """Fit the embedding autoencoder and write the compressed per-frame embeddings."""
    with pipeline_errors("compress-emb"):
        dataset = dataset_service.load_dataset(manifest)
        train_config = load_train_config(config)
        raw = np.concatenate([dataset.embeddings(t) for t in range(dataset.T)]).astype(np.float64)
        fit = neural_heads_service.autoencoder_fit(raw, code_dim=neural_heads_service.config.code_dim,
                                                   steps=steps, lr=train_config.lr.autoencoder,
                                                   seed=train_config.seed)
        atomic_write_bytes(dataset.root / AUTOENCODER_FILE, fit.autoencoder.to_bytes())
        for t in range(dataset.T):
            write_embeddings(dataset.path(COMPRESSED_TEMPLATE, 0, t), fit.autoencoder.encode(dataset.embeddings(t)))
        dataset.update_manifest(compressed_template=COMPRESSED_TEMPLATE, autoencoder=AUTOENCODER_FILE)
        summary = {"reconstruction_error": fit.reconstruction_error, "min_cosine": float(np.min(fit.cosine))}
        logger.info(f"Autoencoder fitted: {summary}")
        typer.echo(orjson.dumps(summary).decode())
