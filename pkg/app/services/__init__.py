"""
This module wires the pipeline services into shared instances.

Every service takes its collaborators through its constructor; the instances below
share one scene service, one rasterizer and one set of heads so that the worker
pool size set by the CLI reaches every stage.

Attributes:
    scene_service (SceneService): Primitive activation, k-NN and checkpoints.
    rasterizer_service (RasterizerService): Tile-based splatting forward and backward.
    mask_geometry_service (MaskGeometryService): Distance transforms and mask IoU.
    identity_align_service (IdentityAlignService): Cross-view label canonicalization.
    flow_warp_service (FlowWarpService): Flow-driven triangulation of foreground positions.
    neural_heads_service (NeuralHeadsService): Classifier, semantic head and autoencoder.
    evalkit_service (EvalkitService): Image and segmentation metrics.
    report_service (ReportService): SVG charts and the HTML report.
    query_service (QueryService): Identity and segment queries.
    editing_service (EditingService): Instance removal and transforms.
    trainer_service (TrainerService): The four optimization schedules and tracking.
"""

from app.helpers import settings

from .scene_service import SceneService
from .rasterizer_service import RasterizerService
from .mask_geometry_service import MaskGeometryService
from .identity_align_service import IdentityAlignService
from .flow_warp_service import FlowWarpService
from .neural_heads_service import NeuralHeadsService
from .evalkit_service import EvalkitService
from .report_service import ReportService
from .query_service import QueryService
from .editing_service import EditingService
from .losses import photometric_loss_service, geometric_loss_service
from .losses.semantic_loss_service import SemanticLossService
from .trainer import TrainerService
from .dataset import dataset_service, synthetic_service

scene_service = SceneService()
rasterizer_service = RasterizerService(scene_service, threads=settings.threads)
mask_geometry_service = MaskGeometryService()
identity_align_service = IdentityAlignService(mask_geometry_service)
flow_warp_service = FlowWarpService(threads=settings.threads)
neural_heads_service = NeuralHeadsService()
semantic_loss_service = SemanticLossService(neural_heads_service, scene_service)
evalkit_service = EvalkitService(rasterizer_service, neural_heads_service, photometric_loss_service, scene_service)
report_service = ReportService()
query_service = QueryService(rasterizer_service, neural_heads_service, scene_service, threads=settings.threads)
editing_service = EditingService(neural_heads_service)
trainer_service = TrainerService(scene_service, rasterizer_service, neural_heads_service, photometric_loss_service,
                                 semantic_loss_service, geometric_loss_service, mask_geometry_service,
                                 evalkit_service)
synthetic_service.rasterizer = rasterizer_service


def set_threads(threads: int) -> None:
    """Resize every worker pool."""
    rasterizer_service.set_threads(threads)
    flow_warp_service.threads = max(1, int(threads))
    query_service.threads = max(1, int(threads))
