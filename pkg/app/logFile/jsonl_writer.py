from pathlib import Path
from typing import Dict, Iterator, List, Optional

import orjson

from .log_config import logger


class TrainingLogWriter:
    """
    Streams per-iteration loss-term breakdowns as JSON lines.

    Each record carries the stage name, the frame index, the iteration and one
    key per energy term. The file is opened in append mode so a resumed `track`
    run keeps extending the same log.
    """

    def __init__(self, path: Optional[Path], every: int = 1):
        self.path = Path(path) if path is not None else None
        self.every = max(1, int(every))
        self._handle = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "ab")

    def write(self, stage: str, frame: int, iteration: int, terms: Dict[str, float]) -> None:
        if self._handle is None or iteration % self.every != 0:
            return
        record = {"stage": stage, "frame": int(frame), "iteration": int(iteration)}
        record.update({key: float(value) for key, value in terms.items()})
        self._handle.write(orjson.dumps(record, option=orjson.OPT_SERIALIZE_NUMPY) + b"\n")

    def close(self) -> None:
        if self._handle is not None:
            self._handle.close()
            self._handle = None

    def __enter__(self) -> "TrainingLogWriter":
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        self.close()


def read_training_log(path: Path) -> List[Dict]:
    """
    Load every record of a JSON-lines training log.

    Args:
        path (Path): The log file written by TrainingLogWriter.

    Returns:
        list: One dict per logged iteration, in file order. Malformed lines are skipped.
    """
    records = []
    for line in _iter_lines(Path(path)):
        try:
            records.append(orjson.loads(line))
        except orjson.JSONDecodeError:
            logger.warning(f"Skipping malformed training log line in {path}")
    return records


def _iter_lines(path: Path) -> Iterator[bytes]:
    if not path.exists():
        return
    with open(path, "rb") as handle:
        for line in handle:
            line = line.strip()
            if line:
                yield line
