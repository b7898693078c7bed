"""
Artifact Storage
JSON manifests with little-endian binary blobs, plus content hashes for provenance
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Blob dtypes are always little-endian, whatever the host byte order
BLOB_DTYPES = {
    "f8": np.dtype("<f8"),
    "f4": np.dtype("<f4"),
    "u4": np.dtype("<u4"),
}


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def write_json(path: PathLike, data: Dict[str, Any]) -> Path:
    """Write a JSON document, creating parent directories"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, default=_json_default)
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    """Read a JSON document"""
    with open(path) as f:
        return json.load(f)


def save_blob(path: PathLike, array: np.ndarray, kind: str) -> Dict[str, Any]:
    """Write an array as a raw little-endian blob.

    Args:
        path: Destination file
        array: Array to store
        kind: One of "f8", "f4", "u4"

    Returns:
        Descriptor with file name, kind and shape for the manifest
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(array, dtype=BLOB_DTYPES[kind])
    data.tofile(path)
    return {"file": path.name, "kind": kind, "shape": list(data.shape)}


def load_blob(directory: PathLike, descriptor: Dict[str, Any]) -> np.ndarray:
    """Read a blob written by save_blob, returned in native byte order"""
    dtype = BLOB_DTYPES[descriptor["kind"]]
    raw = np.fromfile(Path(directory) / descriptor["file"], dtype=dtype)
    return raw.reshape(descriptor["shape"]).astype(dtype.newbyteorder("="))


def content_hash(*arrays: np.ndarray, extra: str = "") -> str:
    """Short sha256 over dtype, shape and bytes of the given arrays"""
    digest = hashlib.sha256()
    for array in arrays:
        array = np.ascontiguousarray(array)
        digest.update(str(array.dtype.str).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    digest.update(extra.encode())
    return digest.hexdigest()[:16]


def file_hash(path: PathLike) -> str:
    """Short sha256 of a file's bytes"""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()[:16]
