"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class RffError(Exception):
    exit_code = 1


class ConfigError(RffError):
    exit_code = 2


class InvalidInputError(RffError, ValueError):
    exit_code = 3


class FormatError(RffError):
    """Malformed dataset or checkpoint file; ``offset`` is the byte where parsing failed."""

    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ProtocolError(RffError):
    exit_code = 3


class TrainingDivergedError(RffError):
    exit_code = 4

    def __init__(self, message, epoch=None, client=None, round_index=None):
        tags = []
        if client is not None:
            tags.append(f"client {client}")
        if round_index is not None:
            tags.append(f"round {round_index}")
        if epoch is not None:
            tags.append(f"epoch {epoch}")
        if tags:
            message = f"{message} [{', '.join(tags)}]"
        super().__init__(message)
        self.epoch = epoch
        self.client = client
        self.round_index = round_index
