"""Exception hierarchy; exit codes map onto the CLI contract (2 config, 3 runtime)."""


class AtamError(Exception):
    exit_code = 3


class ConfigError(AtamError):
    exit_code = 2


class DataError(AtamError):
    pass


class AnnotationConflictError(AtamError):
    pass


class BudgetError(AtamError):
    pass


class TrainingAbort(AtamError):
    pass
