"""Exception types shared by every stage.

The CLI maps these onto process exit codes.
"""


class HieposeError(Exception):
    exit_code = 4


class InvalidInputError(HieposeError, ValueError):
    exit_code = 2


class UnsupportedSizeError(InvalidInputError):
    pass


class MissingInputError(HieposeError, FileNotFoundError):
    exit_code = 3
