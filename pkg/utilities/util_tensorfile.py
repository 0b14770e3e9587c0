"""
TensorFile codec and checkpoint directories.

Layout of one blob:
    b"PVTD" | version u8 (0x01) | dtype u8 (0x01 = f64 LE) | rank u8
    | rank x u64 LE dims | row-major f64 LE payload
A checkpoint directory holds one blob per named tensor plus a key-sorted
manifest.json listing names, files, dims and free-form metadata.
"""

import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

from core.core_constants import (
    DTYPE_F64_LE, MANIFEST_NAME, TENSORFILE_MAGIC, TENSORFILE_SUFFIX, TENSORFILE_VERSION,
)
from core.core_errors import TensorFileError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ============================================================================
# ATOMIC WRITES
# ============================================================================
def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ============================================================================
# BLOB CODEC
# ============================================================================
def encode_tensor(array) -> bytes:
    array = np.asarray(array, dtype=np.float64)
    if array.ndim > 255:
        raise TensorFileError(f"rank {array.ndim} exceeds the 255 limit")
    header = TENSORFILE_MAGIC + bytes([TENSORFILE_VERSION, DTYPE_F64_LE, array.ndim])
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array).astype("<f8", copy=False).tobytes(order="C")
    return header + dims + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 7 or blob[:4] != TENSORFILE_MAGIC:
        raise TensorFileError("not a TensorFile (bad magic)")
    version, dtype, rank = blob[4], blob[5], blob[6]
    if version != TENSORFILE_VERSION:
        raise TensorFileError(f"unsupported TensorFile version 0x{version:02x}")
    if dtype != DTYPE_F64_LE:
        raise TensorFileError(f"unsupported dtype byte 0x{dtype:02x}")
    dims_end = 7 + 8 * rank
    if len(blob) < dims_end:
        raise TensorFileError("truncated TensorFile header")
    dims = struct.unpack(f"<{rank}Q", blob[7:dims_end])
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - dims_end != 8 * count:
        raise TensorFileError(f"payload holds {len(blob) - dims_end} bytes, expected {8 * count}")
    if count == 0:
        return np.zeros(dims, dtype=np.float64)
    return np.frombuffer(blob, dtype="<f8", offset=dims_end).astype(np.float64).reshape(dims)


def write_tensor(path: PathLike, array) -> None:
    atomic_write_bytes(path, encode_tensor(array))


def read_tensor(path: PathLike) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise TensorFileError(f"cannot read {path}: {e}") from None
    return decode_tensor(blob)


# ============================================================================
# CHECKPOINT DIRECTORIES
# ============================================================================
def dumps_document(document: Any) -> str:
    """Key-sorted structured-text rendering used for every written document."""
    return json.dumps(document, sort_keys=True, indent=2) + "\n"


def save_checkpoint(directory: PathLike, tensors: Dict[str, np.ndarray],
                    metadata: Dict[str, Any]) -> Dict[str, Any]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        file_name = f"{name}{TENSORFILE_SUFFIX}"
        array = np.asarray(tensors[name], dtype=np.float64)
        write_tensor(directory / file_name, array)
        entries[name] = {"dims": list(array.shape), "file": file_name}
    listed = {entry["file"] for entry in entries.values()}
    for stale in sorted(directory.glob(f"*{TENSORFILE_SUFFIX}")):
        if stale.name not in listed:
            stale.unlink()
            logger.debug(f"Removed stale tensor {stale.name}")
    manifest = {"format": "PVTD/1", "metadata": metadata, "tensors": entries}
    atomic_write_text(directory / MANIFEST_NAME, dumps_document(manifest))
    logger.info(f"Checkpoint saved to {directory} ({len(entries)} tensors)")
    return manifest


def load_checkpoint(directory: PathLike) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise TensorFileError(f"cannot read checkpoint manifest {manifest_path}: {e}") from None

    tensors = {}
    for name, entry in manifest.get("tensors", {}).items():
        array = read_tensor(directory / entry["file"])
        if list(array.shape) != list(entry["dims"]):
            raise TensorFileError(f"{name}: dims {array.shape} disagree with manifest {entry['dims']}")
        tensors[name] = array
    return tensors, manifest.get("metadata", {})
