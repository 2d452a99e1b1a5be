"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class ArmError(Exception):
    exit_code = 5
    kind = "error"


class ConfigError(ArmError):
    exit_code = 2
    kind = "config"


class ValidationError(ArmError, ValueError):
    exit_code = 4
    kind = "validation"


class FormatError(ValidationError):
    kind = "format"


class IncompatibilityError(ValidationError):
    kind = "incompatible"

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class InputError(ValidationError):
    kind = "input"


class RoleCoverageError(InputError):
    kind = "role_coverage"


class StageError(ArmError):
    """Failure inside a pipeline stage; ``stage`` names where it happened."""

    exit_code = 5
    kind = "stage"

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


class TransplantConflictError(ArmError):
    kind = "transplant_conflict"


class ForgeError(ArmError):
    kind = "forge"
