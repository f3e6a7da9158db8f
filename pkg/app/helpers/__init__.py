"""
This module exposes the shared helpers of the pipeline.

It imports and exposes the following utilities:
- Settings / TrainConfig: environment settings and the validated training configuration.
- load_train_config: Reads a YAML config file into a TrainConfig.
- PipelineError: Base of every error reported on the command line.

Attributes:
    settings (Settings): Process-level settings resolved once at import.
"""

from .config_helpers import Settings, TrainConfig, load_train_config, dump_default_config
from .exceptions import PipelineError

settings = Settings()
