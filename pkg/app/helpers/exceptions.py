from typing import Any, Dict, Optional


class PipelineError(ValueError):
    """
    Base class for every failure the pipeline reports to its caller.

    Attributes:
        code (str): A short stable identifier used in machine-parsable error lines.
        detail (str): The human readable description.
    """

    code = "pipeline_error"

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def to_line(self) -> str:
        """
        Render the error as a single machine-parsable line.

        Returns:
            str: `error=<code> detail="<text>"` followed by any `key=value` context.
        """
        detail = self.detail.replace("\n", " ").replace('"', "'")
        parts = [f"error={self.code}", f'detail="{detail}"']
        for key, value in self.context.items():
            parts.append(f"{key}={str(value).replace(' ', '_')}")
        return " ".join(parts)


class InvalidPrimitiveError(PipelineError):
    code = "invalid_primitive"

    def __init__(self, detail: str, index: Optional[int] = None):
        super().__init__(detail, index=index)
        self.index = index


class ShapeMismatchError(PipelineError):
    code = "shape_mismatch"


class RenderError(PipelineError):
    code = "render_error"


class MaskError(PipelineError):
    code = "mask_error"


class DatasetError(PipelineError):
    code = "dataset_error"

    def __init__(self, detail: str, path: Optional[str] = None, rule: Optional[str] = None):
        super().__init__(detail, path=path, rule=rule)
        self.path = path
        self.rule = rule


class LossInputError(PipelineError):
    code = "loss_input"


class HeadError(PipelineError):
    code = "head_error"


class TrainingAbort(PipelineError):
    code = "training_abort"

    def __init__(self, detail: str, dump: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.dump = dump or {}


class QueryError(PipelineError):
    code = "query_error"


class CheckpointError(PipelineError):
    code = "checkpoint_error"
