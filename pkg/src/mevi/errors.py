"""Exception hierarchy. ``exit_code`` is what the CLI returns for each family."""


class MeviError(Exception):
    exit_code = 4


class DataError(MeviError, ValueError):
    """Bad input data: shapes, values, ids, malformed text files."""

    exit_code = 3


class StoreError(DataError):
    """On-disk artifact failed validation. ``code`` names the failure kind."""

    code = "format_error"

    def __init__(self, message, path=None):
        self.path = str(path) if path is not None else None
        if self.path:
            message = f"{self.path}: {message}"
        super().__init__(message)


class MagicMismatch(StoreError):
    code = "magic_mismatch"


class VersionUnsupported(StoreError):
    code = "version_unsupported"


class ChecksumMismatch(StoreError):
    code = "checksum_mismatch"


class TruncatedFile(StoreError):
    code = "truncated_file"


class HeaderMismatch(StoreError):
    code = "header_mismatch"
