import json
import os
from typing import Any, Dict

from pydantic import BaseModel

from dense_ba.config.logger import logger
from dense_ba.utils.file_utils import read_file, save_file


def load_json(file_path: str) -> Dict[str, Any]:
    """Parse a JSON object from disk; missing or corrupt files give {}."""
    try:
        data = json.loads(read_file(file_path))
        logger.debug(f"Successfully loaded JSON from {file_path}")
        return data
    except FileNotFoundError:
        return {}
    except json.JSONDecodeError:
        logger.error(f"Invalid JSON in {file_path}")
        return {}


def save_json(directory: str, filename: str, data: Any) -> str:
    """
    Atomically write ``data`` as JSON with sorted keys.

    Identical data always gives byte-identical files.
    """
    json_filename = f"{os.path.splitext(filename)[0]}.json"
    content = json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True, allow_nan=False)
    return save_file(directory, json_filename, content + "\n")


def save_model(directory: str, filename: str, model: BaseModel) -> str:
    return save_json(directory, filename, model.model_dump(mode="json"))
