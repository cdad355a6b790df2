"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit code it maps to.
"""


class XDistillError(Exception):
    exit_code = 4


class ShapeError(XDistillError, ValueError):
    exit_code = 4


class ConfigError(XDistillError, ValueError):
    exit_code = 2


class StateError(XDistillError, RuntimeError):
    exit_code = 4


class DataError(XDistillError, ValueError):
    exit_code = 2


class ArtifactError(XDistillError, IOError):
    exit_code = 3


class InvariantError(XDistillError, AssertionError):
    exit_code = 4


class TokenIndexError(XDistillError, IndexError):
    exit_code = 2


class DegenerateRowError(XDistillError, ValueError):
    exit_code = 4
