"""
Energy terms of the optimization stages.

Attributes:
    photometric_loss_service (PhotometricLossService): L1 + D-SSIM color term and SSIM.
    semantic_loss_service (SemanticLossService): Identity cross-entropy, embedding L1 and 3D KL terms.
    geometric_loss_service (GeometricLossService): Shape, ARAP, silhouette SDF and temporal terms.
"""

from .photometric_loss_service import LossResult, PhotometricLossService
from .semantic_loss_service import SemanticLossService
from .geometric_loss_service import GeometricLossService

photometric_loss_service = PhotometricLossService()
semantic_loss_service = SemanticLossService()
geometric_loss_service = GeometricLossService()
