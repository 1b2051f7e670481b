# ##################################################################
# errors
# shared error types; the cli maps each category to an error line


# ##################################################################
# mal error
# base error carrying a short machine-readable category and a detail
class MalError(Exception):
    category = "error"

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def one_line(self) -> str:
        detail = " ".join(str(self.detail).split())
        return f"error: {self.category}: {detail}"


class ConfigError(MalError):
    category = "config"


class GeometryError(MalError, ValueError):
    category = "geometry"


class LossError(MalError, ValueError):
    category = "loss"


class ShapeError(MalError, ValueError):
    category = "shape"


class DatasetError(MalError):
    category = "dataset"


class CheckpointError(MalError):
    category = "checkpoint"


# ##################################################################
# training error
# raised on non-finite losses or gradients; names the iteration and scene
class TrainingError(MalError):
    category = "divergence"

    def __init__(self, detail: str, iteration: int | None = None, scene_id: int | None = None):
        super().__init__(detail)
        self.iteration = iteration
        self.scene_id = scene_id


class ReportError(MalError):
    category = "report"
