"""Error types raised during attention export."""


class ExportError(RuntimeError):
    """Base class for everything that can abort an export job."""


class ExportStartupError(ExportError):
    """Raised before any tensor is written: missing image, missing weights."""


class CaptureShapeError(ExportError):
    """An attention tensor arrived with an unexpected shape.

    Carries the layer name so the abort message points at the exact
    module that misbehaved.
    """

    def __init__(self, layer: str, detail: str):
        self.layer = layer
        super().__init__(f"attention capture aborted at layer {layer}: {detail}")
