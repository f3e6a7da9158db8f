"""
This module initializes the logging configuration for the pipeline.

It imports the logger instance from the log_config module to provide a centralized logging mechanism,
and the JSON-lines writer used for per-iteration training telemetry.

Attributes:
    logger (Logger): An instance of the logger used for logging pipeline events and errors.
    TrainingLogWriter (type): Appends loss-term breakdowns to a JSON-lines file.
"""

from .log_config import logger
from .jsonl_writer import TrainingLogWriter, read_training_log

logger = logger
