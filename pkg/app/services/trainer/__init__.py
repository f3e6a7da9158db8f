"""
Optimization machinery: Adam updates, densification and the stage schedules.

Attributes:
    optimizer_service (OptimizerService): Adam with per-attribute learning rates.
    densify_service (DensifyService): Budgeted clone/split/prune passes.
"""

from .optimizer_service import AdamState, OptimizerService
from .densify_service import DensifyReport, DensifyService, DensifyStats
from .trainer_service import StagePlan, StageReferences, TrainerService, checkpoint_path

optimizer_service = OptimizerService()
densify_service = DensifyService()
