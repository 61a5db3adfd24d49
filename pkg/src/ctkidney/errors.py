"""Exception hierarchy shared by the pipeline.

Every error carries an ``exit_code`` so the command line can map failures
onto its exit-code contract without a lookup table.
"""


class PipelineError(Exception):
    exit_code = 4


class ConfigError(PipelineError, ValueError):
    exit_code = 2


class MissingPrerequisite(PipelineError):
    exit_code = 3


# dataset_manifest
class MissingRoot(ConfigError):
    pass


class EmptyClass(PipelineError, ValueError):
    pass


class UnreadableImage(PipelineError):
    pass


class IndexOutOfRange(PipelineError, IndexError):
    exit_code = 2


class DegenerateClass(PipelineError, ValueError):
    pass


# augmentation
class DecodeError(PipelineError):
    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}: {reason}".rstrip(": "))


# model_zoo
class WeightsUnavailable(MissingPrerequisite):
    pass


class UnsupportedInputSize(ConfigError):
    pass


class ShapeMismatch(PipelineError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


# trainer
class NonFiniteLoss(PipelineError, FloatingPointError):
    def __init__(self, epoch, value):
        self.epoch = epoch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")


class StreamExhausted(PipelineError):
    pass


# metrics_engine
class LengthMismatch(PipelineError, ValueError):
    pass


class SingleClass(PipelineError, ValueError):
    pass


# lime_explainer
class SingularSystem(PipelineError, ValueError):
    pass


# reporting_cli
class MissingCheckpoint(MissingPrerequisite):
    pass
