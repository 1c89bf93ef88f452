"""Exception taxonomy and the process exit codes the CLI maps it to."""

from __future__ import annotations


class MoelabError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(MoelabError):
    """Invalid, unknown, or inconsistent configuration."""


class ShapeError(MoelabError):
    """Tensor kernel received operands with incompatible dimensions."""


class ContractError(MoelabError):
    """A documented precondition was violated by the caller."""


class DegenerateSliceError(ContractError):
    """A softmax slice contained no finite entry."""


class IngestionError(MoelabError):
    """Raised when loading external data fails; carries per-line issues."""

    def __init__(self, path: str, issues: list[tuple[int, str]]):
        self.path = path
        self.issues = issues
        lines = "; ".join(f"line {n}: {msg}" for n, msg in issues)
        super().__init__(f"{path}: {lines}")


class CheckpointError(MoelabError):
    """Checkpoint file missing, corrupt, or incompatible."""


class LockError(MoelabError):
    """Output directory already locked by another run."""


# Exit codes: 0 success, distinct nonzero per error family.
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONTRACT = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (IngestionError, CheckpointError, LockError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ContractError, ShapeError)):
        return EXIT_CONTRACT
    return EXIT_UNEXPECTED
