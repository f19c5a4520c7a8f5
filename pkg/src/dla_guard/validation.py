"""Validation of paths and input files before a command touches anything."""

from __future__ import annotations

import errno
import os
import sys
from pathlib import Path

from .datasets import MNIST_FILES
from .exceptions import InputError

# Windows error code for an invalid pathname.
ERROR_INVALID_NAME = 123


def is_pathname_valid(pathname: str) -> bool:
    """Check whether `pathname` is syntactically valid on the current OS.

    Nothing needs to exist: missing or unreadable components are fine, only names the OS
    rejects outright (too long, embedded NUL, reserved on Windows) make the path invalid.

    Args:
        pathname: Path to check

    Returns:
        True if the OS would accept the pathname, False otherwise
    """
    if not isinstance(pathname, str) or not pathname:
        return False
    try:
        _, pathname = os.path.splitdrive(pathname)
        root_dirname = os.environ.get("HOMEDRIVE", "C:") if sys.platform == "win32" else os.path.sep
        root_dirname = root_dirname.rstrip(os.path.sep) + os.path.sep
        for part in pathname.split(os.path.sep):
            try:
                os.lstat(root_dirname + part)
            except OSError as exc:
                if getattr(exc, "winerror", None) == ERROR_INVALID_NAME:
                    return False
                if exc.errno in {errno.ENAMETOOLONG, errno.ERANGE}:
                    return False
            except ValueError:
                return False
    except TypeError:
        return False
    return True


def _present(directory: Path, name: str) -> bool:
    return (directory / name).is_file() or (directory / f"{name}.gz").is_file()


def missing_mnist_files(directory: Path) -> list[str]:
    """Names of the four IDX files that are absent from `directory`, plain or gzipped."""
    return [name for pair in MNIST_FILES.values() for name in pair if not _present(directory, name)]


def is_mnist_dir(directory: Path) -> bool:
    return directory.is_dir() and not missing_mnist_files(directory)


def check_data_dir(directory: Path) -> None:
    """Ensure `directory` holds the MNIST IDX files.

    Raises:
        InputError: If the directory or any of the files is missing
    """
    if not directory.is_dir():
        error_msg = f"MNIST directory {directory} does not exist"
        raise InputError(error_msg)
    missing = missing_mnist_files(directory)
    if missing:
        error_msg = f"MNIST directory {directory} lacks {', '.join(missing)}"
        raise InputError(error_msg)


def check_artifact_dir(directory: Path) -> None:
    """Ensure the artifact root is a usable directory name and not an existing file.

    Raises:
        InputError: If the path is invalid or names a regular file
    """
    if not is_pathname_valid(str(directory)):
        error_msg = f"invalid artifact directory: {directory}"
        raise InputError(error_msg)
    if directory.exists() and not directory.is_dir():
        error_msg = f"artifact path {directory} is not a directory"
        raise InputError(error_msg)


def check_artifacts(paths: list[Path]) -> None:
    """Ensure every upstream artifact a command reads exists.

    Raises:
        InputError: Naming every missing artifact
    """
    missing = [str(path) for path in paths if not path.is_file()]
    if missing:
        error_msg = f"missing artifacts (run the upstream command first): {', '.join(missing)}"
        raise InputError(error_msg)
