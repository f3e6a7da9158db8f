"""
Dataset manifests, validated loading and the synthetic sequence generator.

Attributes:
    dataset_service (DatasetService): Loads and validates manifests.
    synthetic_service (SyntheticService): Writes ground-truth-complete synthetic datasets.
"""

from .dataset_service import Dataset, DatasetManifest, DatasetService
from .synthetic_service import SyntheticService, SyntheticSpec

dataset_service = DatasetService()
synthetic_service = SyntheticService()
