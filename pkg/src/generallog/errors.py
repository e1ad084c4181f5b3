"""Exception types shared across the pipeline stages."""


class GeneralLogError(Exception):
    """Base class for every error raised by this package."""


class EmptyLine(GeneralLogError):
    pass


class MalformedHeader(GeneralLogError):
    def __init__(self, line_number, raw):
        super().__init__(f"line {line_number}: header does not match the configured format")
        self.line_number = line_number
        self.raw = raw


class LengthMismatch(GeneralLogError):
    pass


class EmptyCorpus(GeneralLogError):
    pass


class EmptySequence(GeneralLogError):
    pass


class UnknownTemplate(GeneralLogError):
    def __init__(self, template_id):
        super().__init__(f"no embedding for template id {template_id}")
        self.template_id = template_id


class DimensionMismatch(GeneralLogError):
    pass


class EmptyIndex(GeneralLogError):
    pass


class ShapeMismatch(GeneralLogError):
    pass


class NonFiniteError(GeneralLogError):
    def __init__(self, name):
        super().__init__(f"non-finite values in {name}")
        self.name = name


class InsufficientData(GeneralLogError):
    pass


class OneDomainOnly(GeneralLogError):
    pass


class NoLabels(GeneralLogError):
    pass


class DivergedTask(GeneralLogError):
    def __init__(self, task_id):
        super().__init__(f"meta-task {task_id} produced a non-finite loss")
        self.task_id = task_id


class MetaStepFailed(GeneralLogError):
    pass


class UnparseableVerdict(GeneralLogError):
    def __init__(self, raw_response):
        super().__init__(f"cannot read a verdict from response: {raw_response!r}")
        self.raw_response = raw_response


class ConfigError(GeneralLogError):
    pass


class StageError(GeneralLogError):
    """A fatal failure inside one pipeline stage; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
