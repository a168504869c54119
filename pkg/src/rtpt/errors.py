"""Exception hierarchy shared by every module.

Each class carries the process exit code the command-line front end uses,
so scripts can tell a bad config from bad data from a corrupted cache.
"""


class RTPTError(Exception):
    exit_code = 1


class ConfigurationError(RTPTError, ValueError):
    """A setting is out of range or inconsistent with another setting."""

    exit_code = 2


class InputError(RTPTError, ValueError):
    """Data handed to an operation violates its preconditions."""

    exit_code = 3


class IntegrityError(RTPTError):
    """Persisted artifacts do not match their recorded checksums or keys."""

    exit_code = 4
