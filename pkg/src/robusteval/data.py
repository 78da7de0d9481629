"""Dataset ingestion: IDX files (MNIST format) and seeded Gaussian toys."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

# IDX type code -> big-endian dtype
_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class IdxFormatError(ValueError):
    pass


def read_idx(path) -> np.ndarray:
    """Read an IDX file into an array of its declared type and shape."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: truncated magic at offset 0")
    zero, code, ndim = struct.unpack_from(">HBB", data, 0)
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad magic 0x{struct.unpack_from('>I', data, 0)[0]:08x} at offset 0")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = _IDX_TYPES[code]
    count = int(np.prod(dims))
    need = header_end + count * dtype.itemsize
    if len(data) < need:
        raise IdxFormatError(f"{path}: payload truncated at offset {len(data)}, expected {need} bytes")
    if len(data) > need:
        raise IdxFormatError(f"{path}: {len(data) - need} trailing bytes at offset {need}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=header_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array) -> None:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.astype(_IDX_TYPES[code]).tobytes())


def _magic(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        raise IdxFormatError(f"{path}: truncated magic at offset 0")
    return struct.unpack(">I", head)[0]


def load_idx(images_path, labels_path):
    """Load an image/label IDX pair.

    Unsigned-byte images are scaled to [0, 1] as float64; labels become int64
    class ids. The two files must hold the same number of items.
    """
    for path, want in ((images_path, IMAGE_MAGIC), (labels_path, LABEL_MAGIC)):
        got = _magic(path)
        if got != want:
            raise IdxFormatError(f"{path}: magic 0x{got:08x} at offset 0, expected 0x{want:08x}")
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{labels_path}: count {labels.shape[0]} at offset 4 does not match "
            f"{images.shape[0]} images in {images_path}"
        )
    if images.dtype == np.uint8:
        x = images.astype(np.float64) / 255.0
    else:
        x = images.astype(np.float64)
    return x, labels.astype(np.int64)


def class_means(classes: int, dims: int, separation: float) -> np.ndarray:
    """Class centers around 0.5 with pairwise distance ``separation``.

    Scaled basis vectors when ``dims >= classes``; otherwise the centers sit on
    a line along the first coordinate, spanning ``separation * (classes - 1)``,
    so keep that below 1 or the outer clusters get clipped together.
    """
    means = np.full((classes, dims), 0.5)
    if dims >= classes:
        offsets = np.eye(classes) - 1.0 / classes
        means[:, :classes] += offsets * (separation / np.sqrt(2.0))
    else:
        means[:, 0] += (np.arange(classes) - (classes - 1) / 2.0) * separation
    return means


def gen_synthetic(classes: int = 2, dims: int = 2, separation: float = 0.5, count: int = 200,
                  seed: int = 0, sigma: float = 0.05):
    """Balanced Gaussian clusters (std ``sigma``) clipped to [0, 1]."""
    if classes < 2 or dims < 1:
        raise ValueError("need classes >= 2 and dims >= 1")
    rng = np.random.default_rng(seed)
    means = class_means(classes, dims, separation)
    labels = rng.permutation(np.arange(count) % classes)
    x = means[labels] + sigma * rng.standard_normal((count, dims))
    return np.clip(x, 0.0, 1.0), labels.astype(np.int64)
