"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front-end:
2 for configuration/shape problems, 3 for bad data or corrupt streams,
4 for training divergence.
"""


class BafError(Exception):
    exit_code = 1


class ConfigError(BafError):
    exit_code = 2


class ShapeError(ConfigError):
    pass


class CompatibilityError(ConfigError):
    pass


class InvertibilityError(ConfigError):
    pass


class DataError(BafError):
    exit_code = 3


class InputError(DataError):
    pass


class RangeError(DataError):
    pass


class FormatError(DataError):
    pass


class CorruptionError(DataError):
    pass


class TrainingError(BafError):
    exit_code = 4
