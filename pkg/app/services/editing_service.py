from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from app.helpers.exceptions import PipelineError
from app.helpers.geometry_helpers import normalize_quaternions, quaternion_from_euler_degrees, quaternion_to_rotation, \
    quaternion_multiply
from app.logFile import logger
from app.services.neural_heads_service import NeuralHeadsService, SemanticHeads
from app.services.scene_service import SceneModel


@dataclass
class EditReport:
    instance: int
    selected: int
    removed: bool


class EditingService:
    """Instance-level edits of a trained scene, selecting primitives by classifier argmax."""

    def __init__(self, heads: Optional[NeuralHeadsService] = None):
        self.heads = heads or NeuralHeadsService()

    def edit_instance(self, scene: SceneModel, heads: SemanticHeads, instance: int,
                      translation: Sequence[float] = (0.0, 0.0, 0.0), rotation_deg: Sequence[float] = (0.0, 0.0, 0.0),
                      scale: float = 1.0, remove: bool = False):
        """
        Remove an instance or apply a similarity transform about its centroid.

        Positions are scaled and rotated about the centroid then translated, rotations are
        pre-multiplied by the edit rotation and log-scales shift by log(scale). Higher SH bands
        are left in the object frame they were trained in.

        Args:
            scene (SceneModel): The scene to edit; left untouched.
            heads (SemanticHeads): Heads whose classifier labels the primitives.
            instance (int): Instance id in 1..D.
            translation (Sequence[float]): World-space offset.
            rotation_deg (Sequence[float]): Intrinsic xyz Euler angles in degrees.
            scale (float): Uniform scale factor, > 0.
            remove (bool): Delete the instance instead of transforming it.

        Returns:
            tuple: (edited SceneModel, EditReport).

        Raises:
            PipelineError: On an id outside 1..D or a non-positive scale.
        """
        if not 1 <= instance < heads.n_classes:
            raise PipelineError(f"instance {instance} outside 1..{heads.n_classes - 1}")
        if not scale > 0:
            raise PipelineError(f"scale must be positive, got {scale}")
        edited = scene.copy()
        if len(scene.fg) == 0:
            return edited, EditReport(instance=instance, selected=0, removed=remove)
        labels = np.argmax(self.heads.classify(heads.classifier, scene.fg.features), axis=1)
        selected = np.flatnonzero(labels == instance)
        if selected.size == 0:
            logger.warning(f"Edit: no foreground primitive is classified as instance {instance}")
            return edited, EditReport(instance=instance, selected=0, removed=remove)

        if remove:
            keep = np.setdiff1d(np.arange(len(scene.fg)), selected)
            edited.fg = scene.fg.subset(keep)
            logger.info(f"Edit: removed {selected.size} primitives of instance {instance}")
            return edited, EditReport(instance=instance, selected=int(selected.size), removed=True)

        q_edit = quaternion_from_euler_degrees(np.asarray(rotation_deg, dtype=np.float64))
        R = quaternion_to_rotation(q_edit[None])[0]
        fg = edited.fg
        centroid = fg.positions[selected].mean(axis=0)
        fg.positions[selected] = ((fg.positions[selected] - centroid) * scale) @ R.T + centroid \
            + np.asarray(translation, dtype=np.float64)
        rotated = quaternion_multiply(np.broadcast_to(q_edit, (selected.size, 4)), fg.rotations[selected])
        fg.rotations[selected] = normalize_quaternions(rotated)
        fg.log_scales[selected] += np.log(scale)
        logger.info(f"Edit: transformed {selected.size} primitives of instance {instance}")
        return edited, EditReport(instance=instance, selected=int(selected.size), removed=False)
