"""
Binary and image codecs for every on-disk artifact.

- "F32M" raw planar float32 files: 16-byte header {magic "F32M", H, W, C} (uint32, little-endian),
  then C planes of H*W float32 values. Used for flows (planes dx, dy), SDFs, features, alpha and depth.
- Embedding files: header {count, dim} (uint32, little-endian), then count*dim float32 values.
- PNG color images (8-bit RGB) and label maps (8-bit single channel) through Pillow.
"""

import os
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

from app.helpers.exceptions import DatasetError

F32M_MAGIC = b"F32M"
PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """
    Write bytes to `path` through a temporary sibling file and an atomic rename.

    Args:
        path (PathLike): Destination file.
        data (bytes): The full file content.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    finally:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)


def encode_f32m(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"F32M arrays must be HxW or HxWxC, got shape {array.shape}")
    h, w, c = array.shape
    planes = np.ascontiguousarray(np.transpose(array, (2, 0, 1)), dtype="<f4")
    return F32M_MAGIC + struct.pack("<III", h, w, c) + planes.tobytes()


def decode_f32m(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 16 or data[:4] != F32M_MAGIC:
        raise DatasetError(f"not an F32M file", path=source, rule="magic")
    h, w, c = struct.unpack("<III", data[4:16])
    expected = 16 + 4 * h * w * c
    if len(data) != expected:
        raise DatasetError(f"F32M payload has {len(data)} bytes, expected {expected}", path=source, rule="length")
    planes = np.frombuffer(data, dtype="<f4", offset=16).reshape(c, h, w)
    return np.transpose(planes, (1, 2, 0)).astype(np.float32)


def write_f32m(path: PathLike, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_f32m(array))


def read_f32m(path: PathLike) -> np.ndarray:
    """
    Returns:
        np.ndarray: (H, W, C) float32 array, C >= 1.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read F32M file: {e}", path=str(path), rule="exists")
    return decode_f32m(data, str(path))


def write_flow(path: PathLike, flow: np.ndarray) -> None:
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {flow.shape}")
    write_f32m(path, flow)


def read_flow(path: PathLike) -> np.ndarray:
    flow = read_f32m(path)
    if flow.shape[2] != 2:
        raise DatasetError(f"flow file has {flow.shape[2]} planes, expected 2", path=str(path), rule="planes")
    return flow


def encode_embeddings(vectors: np.ndarray) -> bytes:
    vectors = np.atleast_2d(np.asarray(vectors))
    count, dim = vectors.shape
    return struct.pack("<II", count, dim) + np.ascontiguousarray(vectors, dtype="<f4").tobytes()


def decode_embeddings(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise DatasetError("embedding file shorter than its header", path=source, rule="header")
    count, dim = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * count * dim:
        raise DatasetError(f"embedding file does not hold {count}x{dim} float32 values", path=source, rule="length")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(count, dim).astype(np.float32)


def write_embeddings(path: PathLike, vectors: np.ndarray) -> None:
    atomic_write_bytes(path, encode_embeddings(vectors))


def read_embeddings(path: PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetError(f"cannot read embedding file: {e}", path=str(path), rule="exists")
    return decode_embeddings(data, str(path))


def write_png_rgb(path: PathLike, image: np.ndarray) -> None:
    """
    Args:
        path (PathLike): Destination PNG.
        image (np.ndarray): (H, W, 3) floats in [0, 1] or uint8.
    """
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(path, format="PNG", optimize=False)


def read_png_rgb(path: PathLike) -> np.ndarray:
    """
    Returns:
        np.ndarray: (H, W, 3) float64 image in [0, 1].
    """
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as e:
        raise DatasetError(f"cannot read PNG image: {e}", path=str(path), rule="exists")
    return data.astype(np.float64) / 255.0


def write_label_png(path: PathLike, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label maps must fit in 8 bits")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PNG", optimize=False)


def read_label_png(path: PathLike) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I", "I;16"):
                raise DatasetError(f"label map must be single channel, got mode {img.mode}",
                                   path=str(path), rule="channels")
            data = np.asarray(img, dtype=np.int64)
    except OSError as e:
        raise DatasetError(f"cannot read label PNG: {e}", path=str(path), rule="exists")
    return data
