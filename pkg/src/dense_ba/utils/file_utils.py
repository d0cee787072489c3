import hashlib
import os
import tempfile
from dense_ba.config.logger import logger


def ensure_directory(directory: str) -> None:
    if directory and not os.path.exists(directory):
        os.makedirs(directory, exist_ok=True)
        logger.info(f"Created directory: {directory}")


def save_file(directory: str, filename: str, content: str) -> str:
    """
    Write ``content`` next to its final location, then atomically move it there.

    Returns the path of the written file.
    """
    ensure_directory(directory)
    file_path = os.path.join(directory, filename)
    temp_path = None
    try:
        with tempfile.NamedTemporaryFile(
            mode="w",
            encoding="utf-8",
            dir=directory or ".",
            prefix=filename + ".",
            suffix=".tmp",
            delete=False,
        ) as temp_file:
            temp_path = temp_file.name
            temp_file.write(content)
            temp_file.flush()
            os.fsync(temp_file.fileno())
        os.replace(temp_path, file_path)
        logger.debug(f"Content successfully written to {file_path}")
    finally:
        if temp_path and os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError as e:
                logger.error(f"Failed to remove temporary file {temp_path}: {e}")
    return file_path


def read_file(file_path: str) -> str:
    with open(file_path, "r", encoding="utf-8") as f:
        return f.read()


def cleanup_temp_files(directory: str, basename: str) -> None:
    """Remove ``basename.*.tmp`` leftovers of interrupted writes."""
    try:
        for filename in os.listdir(directory):
            if filename.startswith(basename + ".") and filename.endswith(".tmp"):
                temp_file_path = os.path.join(directory, filename)
                try:
                    os.remove(temp_file_path)
                    logger.info(f"Removed leftover temp file: {temp_file_path}")
                except OSError as e:
                    logger.error(f"Failed to remove temp file {temp_file_path}: {e}")
    except FileNotFoundError:
        logger.warning(f"Directory {directory} does not exist when cleaning temp files.")


def file_checksum(file_path: str) -> str:
    """SHA-256 hex digest of a file's bytes."""
    digest = hashlib.sha256()
    with open(file_path, "rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()
