"""Utility functions for run manifests and failure records.

This module provides JSON encoding for numpy and dataclass values and
helpers that write the JSON artifacts of a run.
"""

import dataclasses
import json
import os
from typing import Any, Dict

import numpy as np

from tools.particle_system import config


class NumpyJSONEncoder(json.JSONEncoder):
    """Custom JSON encoder for numpy and dataclass values.

    Non-finite floats are written as null so manifests stay valid JSON.
    """

    def default(self, obj):
        """Convert numpy and dataclass objects to JSON-serializable types.

        Args:
            obj: Object to encode.

        Returns:
            JSON-serializable version of the object.
        """
        if isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return _finite_or_none(float(obj))
        elif isinstance(obj, np.bool_):
            return bool(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
            return dataclasses.asdict(obj)
        return super().default(obj)


def _finite_or_none(value: float):
    return value if np.isfinite(value) else None


def _sanitize(data: Any) -> Any:
    if isinstance(data, float):
        return _finite_or_none(data)
    if isinstance(data, dict):
        return {key: _sanitize(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [_sanitize(value) for value in data]
    return data


def prepare_json_data(data: dict) -> dict:
    """Prepare data for JSON serialization.

    Args:
        data (dict): Data to prepare for JSON serialization.

    Returns:
        dict: JSON-serializable data with non-finite floats replaced by None.
    """
    if not data:
        return {}

    return _sanitize(json.loads(json.dumps(data, cls=NumpyJSONEncoder)))


def write_json(path: str, data: Dict[str, Any]) -> str:
    """Write a JSON artifact, creating the parent directory if needed.

    Args:
        path (str): Destination file.
        data (dict): Content to write.

    Returns:
        str: The path written.
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w") as f:
        json.dump(prepare_json_data(data), f, indent=config.JSON_INDENT)
        f.write("\n")
    return path
