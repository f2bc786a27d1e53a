"""Dataset ingestion: IDX files, binarization modes, synthetic bars."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "IdxFormatError", "load_idx", "write_idx", "Binarized", "binarize",
    "save_obin", "load_obin", "synthetic_bars", "Splits", "split_images",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
OBIN_MAGIC = b"OBIN"
OBIN_VERSION = 1


class IdxFormatError(ValueError):
    """Malformed IDX or OBIN file."""


def load_idx(path) -> np.ndarray:
    """Parse an IDX file: images scale to [0,1] floats, labels stay uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic == IDX_IMAGE_MAGIC:
        rank = 3
    elif magic == IDX_LABEL_MAGIC:
        rank = 1
    else:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}")
    header = 4 + 4 * rank
    if len(blob) < header:
        raise IdxFormatError(f"{path}: truncated extents")
    extents = struct.unpack_from(f">{rank}I", blob, 4)
    count = int(np.prod([int(e) for e in extents], dtype=object))
    if count > len(blob) - header:
        raise IdxFormatError(
            f"{path}: extents {extents} need {count} bytes, "
            f"only {len(blob) - header} present")
    raw = np.frombuffer(blob, dtype=np.uint8, count=count, offset=header)
    if magic == IDX_LABEL_MAGIC:
        return raw.copy()
    return raw.reshape(extents).astype(np.float64) / 255.0


def write_idx(path, array: np.ndarray) -> None:
    """Inverse of load_idx, for fixtures and round-trip tests."""
    array = np.asarray(array)
    if array.ndim == 3:
        magic = IDX_IMAGE_MAGIC
        raw = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    elif array.ndim == 1:
        magic = IDX_LABEL_MAGIC
        raw = array.astype(np.uint8)
    else:
        raise IdxFormatError(f"cannot encode rank {array.ndim} as IDX")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for extent in raw.shape:
            fh.write(struct.pack(">I", extent))
        fh.write(raw.tobytes(order="C"))


# ---------------------------------------------------------------------------
# binarization

@dataclass
class Binarized:
    """Binary view over a dataset; static modes are bit-stable across epochs."""
    mode: str
    base: np.ndarray                 # N x D intensities in [0,1]
    seed: int = 0
    static: np.ndarray | None = None

    @property
    def count(self) -> int:
        return self.base.shape[0]

    @property
    def width(self) -> int:
        return self.base.shape[1]

    def batch(self, epoch: int, indices: np.ndarray) -> np.ndarray:
        """Rows for one batch; dynamic draws depend only on (seed, epoch, index)."""
        if self.static is not None:
            return self.static[indices]
        out = np.empty((len(indices), self.width))
        for row, idx in enumerate(indices):
            rng = np.random.default_rng([self.seed, epoch, int(idx)])
            out[row] = (rng.uniform(size=self.width) < self.base[idx])
        return out.astype(np.float64)

    def all_rows(self, epoch: int = 0) -> np.ndarray:
        return self.batch(epoch, np.arange(self.count))


def binarize(images: np.ndarray, mode: str, seed: int = 0,
             static_file: np.ndarray | None = None) -> Binarized:
    """threshold: 1{pixel > 0.5} once; file: use the given bits verbatim;
    dynamic: fresh Bernoulli(pixel) draw per epoch."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 2:
        images = images.reshape(images.shape[0], -1)
    if mode == "threshold":
        return Binarized(mode, images, seed, (images > 0.5).astype(np.float64))
    if mode == "file":
        if static_file is None:
            raise ValueError("file mode needs the pre-binarized array")
        bits = np.asarray(static_file, dtype=np.float64)
        if bits.shape != images.shape:
            raise ValueError(
                f"pre-binarized shape {bits.shape} != dataset {images.shape}")
        return Binarized(mode, images, seed, bits)
    if mode == "dynamic":
        return Binarized(mode, images, seed, None)
    raise ValueError(f"unknown binarization mode '{mode}'")


# ---------------------------------------------------------------------------
# bit-packed pre-binarized container

def save_obin(path, bits: np.ndarray) -> None:
    bits = np.asarray(bits)
    n, d = bits.shape
    packed = np.packbits(bits.astype(np.uint8), axis=1)
    with open(path, "wb") as fh:
        fh.write(OBIN_MAGIC)
        fh.write(struct.pack("<III", OBIN_VERSION, n, d))
        fh.write(packed.tobytes(order="C"))


def load_obin(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != OBIN_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, n, d = struct.unpack_from("<III", blob, 4)
    if version != OBIN_VERSION:
        raise IdxFormatError(f"{path}: unsupported version {version}")
    row_bytes = (d + 7) // 8
    expected = 16 + n * row_bytes
    if len(blob) < expected:
        raise IdxFormatError(f"{path}: truncated payload")
    packed = np.frombuffer(blob, dtype=np.uint8, count=n * row_bytes,
                           offset=16).reshape(n, row_bytes)
    return np.unpackbits(packed, axis=1)[:, :d].astype(np.float64)


# ---------------------------------------------------------------------------
# synthetic bars

def synthetic_bars(n: int, size: int, noise: float,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Images with one horizontal or vertical bar plus pixel-flip noise.

    Returns (images: n x size^2 in {0,1}, modes: n ints in [0, 2*size)),
    mode = orientation * size + position.
    """
    if size < 4:
        raise ValueError("size must be >= 4")
    rng = np.random.default_rng(np.random.Philox(seed))
    modes = rng.integers(0, 2 * size, size=n)
    images = np.zeros((n, size, size))
    for row, mode in enumerate(modes):
        pos = int(mode) % size
        if mode < size:
            images[row, pos, :] = 1.0
        else:
            images[row, :, pos] = 1.0
    flat = images.reshape(n, size * size)
    if noise > 0:
        flips = rng.uniform(size=flat.shape) < noise
        flat = np.where(flips, 1.0 - flat, flat)
    return flat, modes.astype(np.int64)


@dataclass
class Splits:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray


def split_images(images: np.ndarray, n_valid: int,
                 test: np.ndarray | None = None) -> Splits:
    """Carve the validation rows off the end of train; test stays separate."""
    if n_valid >= images.shape[0]:
        raise ValueError("validation split exceeds dataset size")
    if n_valid:
        train, valid = images[:-n_valid], images[-n_valid:]
    else:
        train, valid = images, images[:0]
    return Splits(train, valid, test if test is not None else images[:0])
