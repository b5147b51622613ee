"""Dataset ingestion (IDX), pixel encodings, and constant-shift vectors.

Pixel order is row-major with the origin at the top-left corner; the
checkerboard phase depends on this and it is fixed here once.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Rng

IMAGE_SIDE = 28
INPUT_DIM = IMAGE_SIDE * IMAGE_SIDE

SHIFT_KINDS = ("constant-scalar", "checkerboard", "image", "attack")

_IDX_UBYTE = 0x08


# ---------------------------------------------------------------------------
# IDX files
# ---------------------------------------------------------------------------

def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte string (big-endian, unsigned-byte payload) to float64.

    Raises FormatError with the offending byte offset for truncated or
    malformed input.
    """
    if len(data) < 4:
        raise FormatError(f"IDX header truncated at byte offset {len(data)} (need 4 magic bytes)")
    if data[0] != 0 or data[1] != 0:
        raise FormatError(f"bad IDX magic bytes {data[0]:#04x} {data[1]:#04x} at byte offset 0")
    type_code = data[2]
    if type_code != _IDX_UBYTE:
        raise FormatError(f"unsupported IDX type code {type_code:#04x} at byte offset 2 "
                          f"(only unsigned byte {_IDX_UBYTE:#04x} is supported)")
    ndim = data[3]
    if ndim == 0:
        raise FormatError("IDX dimension count is zero at byte offset 3")
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise FormatError(f"IDX header truncated at byte offset {len(data)} "
                          f"(need {header_end} bytes for {ndim} extents)")
    extents = struct.unpack(f">{ndim}I", data[4:header_end])
    expected = math.prod(extents)
    payload = len(data) - header_end
    if payload < expected:
        raise FormatError(f"IDX payload truncated at byte offset {len(data)}: "
                          f"expected {expected} bytes, got {payload}")
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after IDX payload "
                          f"at byte offset {header_end + expected}")
    values = np.frombuffer(data, dtype=np.uint8, offset=header_end)
    return values.astype(np.float64).reshape(extents)


def write_idx(values: np.ndarray) -> bytes:
    """Serialize an array of integers in [0, 255] back to IDX bytes."""
    arr = np.asarray(values)
    if arr.ndim == 0 or arr.ndim > 255:
        raise ValueError(f"IDX requires 1..255 dimensions, got {arr.ndim}")
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError("IDX unsigned-byte payload requires values in [0, 255]")
    header = bytes([0, 0, _IDX_UBYTE, arr.ndim])
    header += struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def load_idx(path) -> np.ndarray:
    """Read an IDX file; a ``.gz`` suffix (or a missing plain file with a
    ``.gz`` sibling) is decompressed transparently."""
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".gz").exists():
        path = path.with_name(path.name + ".gz")
    raw = path.read_bytes()
    if path.suffix == ".gz" or raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


# ---------------------------------------------------------------------------
# Datasets and encodings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Flattened images with class labels.

    ``encoding_offset`` documents the accumulated constant-scalar shift
    applied on top of the base [0, 1] encoding (0 for the base encoding,
    -1 after a shift by -1, and so on).
    """

    images: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64
    encoding_offset: float = 0.0

    def __post_init__(self):
        if self.images.ndim != 2:
            raise ValueError(f"images must be 2-D (n, d), got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)


def encode_unit(raw: np.ndarray, labels) -> Dataset:
    """Map raw pixels in [0, 255] to the base [0, 1] encoding."""
    arr = np.asarray(raw, dtype=np.float64).reshape(len(raw), -1)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"raw pixels must lie in [0, 255], got range "
                         f"[{arr.min()}, {arr.max()}]")
    labels = np.asarray(labels, dtype=np.int64)
    return Dataset(images=arr / 255.0, labels=labels, encoding_offset=0.0)


@dataclass(frozen=True)
class ShiftVector:
    """A constant vector added to every sample of a dataset."""

    values: np.ndarray  # (d,) float64
    kind: str

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ValueError(f"unknown shift kind {self.kind!r}, expected one of {SHIFT_KINDS}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).ravel())
        if self.kind == "constant-scalar" and len(self.values) \
                and not np.all(self.values == self.values[0]):
            raise ValueError("constant-scalar shift must have all entries equal")

    def __len__(self) -> int:
        return len(self.values)


def apply_shift(d: Dataset, m: ShiftVector) -> Dataset:
    """Add ``m`` to every sample; labels are untouched."""
    if len(m) != d.images.shape[1]:
        raise ValueError(f"shift length {len(m)} does not match input "
                         f"dimensionality {d.images.shape[1]}")
    offset = d.encoding_offset
    if m.kind == "constant-scalar" and len(m):
        offset += float(m.values[0])
    return Dataset(images=d.images + m.values[None, :], labels=d.labels,
                   encoding_offset=offset)


def make_scalar_shift(v: float, dim: int = INPUT_DIM) -> ShiftVector:
    """Shift vector with every entry equal to ``v``."""
    return ShiftVector(values=np.full(dim, float(v)), kind="constant-scalar")


def make_checkerboard_shift(cell_px: int, amplitude: float, side: int = IMAGE_SIDE) -> ShiftVector:
    """Alternating ``cell_px``-sized blocks valued 0 and ``amplitude``.

    Entry (r, c) is ``amplitude * (((r // cell_px) + (c // cell_px)) % 2)``;
    the top-left block is 0.
    """
    if cell_px < 1:
        raise ValueError(f"cell_px must be >= 1, got {cell_px}")
    r = np.arange(side)[:, None] // cell_px
    c = np.arange(side)[None, :] // cell_px
    board = ((r + c) % 2).astype(np.float64) * amplitude
    return ShiftVector(values=board.ravel(), kind="checkerboard")


def image_to_shift(img: np.ndarray, scale: float) -> ShiftVector:
    """Flatten a [0, 1] grayscale image and scale it into a shift vector."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (IMAGE_SIDE, IMAGE_SIDE):
        raise ValueError(f"expected a {IMAGE_SIDE}x{IMAGE_SIDE} image, got shape {arr.shape}")
    if arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ValueError("image values must lie in [0, 1]")
    return ShiftVector(values=arr.ravel() * scale, kind="image")


# ---------------------------------------------------------------------------
# Portable graymaps (binary P5)
# ---------------------------------------------------------------------------

def read_pgm(path) -> np.ndarray:
    """Read a binary P5 graymap (maxval <= 255) to floats in [0, 1]."""
    data = Path(path).read_bytes()
    pos = 0

    def next_token():
        nonlocal pos
        while pos < len(data):
            if data[pos:pos + 1].isspace():
                pos += 1
            elif data[pos:pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"PGM header truncated at byte offset {pos}")
        return data[start:pos]

    if next_token() != b"P5":
        raise FormatError("not a binary P5 graymap")
    try:
        width, height, maxval = (int(next_token()) for _ in range(3))
    except ValueError as exc:
        raise FormatError(f"non-numeric PGM header field: {exc}") from exc
    if not 0 < maxval <= 255:
        raise FormatError(f"PGM maxval {maxval} out of supported range 1..255")
    pos += 1  # single whitespace byte after maxval
    pixels = data[pos:]
    if len(pixels) != width * height:
        raise FormatError(f"PGM payload has {len(pixels)} bytes, expected {width * height}")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width)
    return img.astype(np.float64) / maxval


def write_pgm(values: np.ndarray, path) -> None:
    """Write a 2-D uint8 array as a binary P5 graymap with maxval 255."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {arr.shape}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Hermetic synthetic digits
# ---------------------------------------------------------------------------

_TEMPLATE_SEED = 0x5A17D161


def synthetic_digits(n: int, seed: int, n_classes: int = 10):
    """Generate ``n`` digit-like 28x28 glyphs as raw [0, 255] pixel values.

    Each class is a fixed constellation of soft blobs (derived only from
    the class index, so train/test splits share templates); samples add
    positional jitter, amplitude jitter, and clipped pixel noise.  The
    background clips to exactly 0, like the dark background of scanned
    digits.  Returns ``(images, labels)`` with images of shape (n, 784).
    """
    if n < 0:
        raise ValueError(f"sample count must be non-negative, got {n}")
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    grid = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)  # (784, 2)

    templates = []
    for cls in range(n_classes):
        trng = Rng(_TEMPLATE_SEED + cls)
        centers = 7.0 + 14.0 * trng.uniform((4, 2))
        sigmas = 2.2 + 1.4 * trng.uniform(4)
        amps = 140.0 + 90.0 * trng.uniform(4)
        templates.append((centers, sigmas, amps))

    rng = Rng(seed)
    labels = np.arange(n, dtype=np.int64) % n_classes
    images = np.zeros((n, INPUT_DIM))
    for cls in range(n_classes):
        rows = np.nonzero(labels == cls)[0]
        if len(rows) == 0:
            continue
        centers, sigmas, amps = templates[cls]
        jitter = rng.gaussian((len(rows), 4, 2), 0.9)
        scale = 0.75 + 0.25 * rng.uniform((len(rows), 4))
        # (rows, blobs, pixels) distance field, summed over blobs
        d2 = ((grid[None, None, :, :] - (centers[None, :, None, :] + jitter[:, :, None, :])) ** 2
              ).sum(axis=3)
        blob = (amps[None, :, None] * scale[:, :, None]
                * np.exp(-d2 / (2.0 * sigmas[None, :, None] ** 2)))
        img = blob.sum(axis=1)
        img += rng.gaussian(img.shape, 9.0)
        images[rows] = img
    np.clip(images, 0.0, 255.0, out=images)
    np.rint(images, out=images)
    return images, labels


def make_synthetic_dataset(n: int, seed: int, n_classes: int = 10) -> Dataset:
    """Synthetic digits in the base [0, 1] encoding."""
    images, labels = synthetic_digits(n, seed, n_classes)
    return encode_unit(images, labels)


# ---------------------------------------------------------------------------
# MNIST-style data directories
# ---------------------------------------------------------------------------

_SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def load_data_dir(directory, split: str = "train") -> Dataset:
    """Load one split of an MNIST-layout directory into the [0, 1] encoding."""
    if split not in _SPLIT_FILES:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    image_name, label_name = _SPLIT_FILES[split]
    directory = Path(directory)
    images = load_idx(directory / image_name)
    labels = load_idx(directory / label_name)
    if labels.ndim != 1:
        raise FormatError(f"label file {label_name} must be 1-D, got shape {labels.shape}")
    return encode_unit(images, labels.astype(np.int64))


def has_split(directory, split: str) -> bool:
    image_name, label_name = _SPLIT_FILES[split]
    directory = Path(directory)
    return all((directory / name).exists() or (directory / (name + ".gz")).exists()
               for name in (image_name, label_name))


def write_data_dir(directory, train_images, train_labels, test_images, test_labels) -> None:
    """Write raw [0, 255] images + labels as an MNIST-layout IDX directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, images, labels in (("train", train_images, train_labels),
                                  ("test", test_images, test_labels)):
        image_name, label_name = _SPLIT_FILES[split]
        stacked = np.asarray(images).reshape(len(images), IMAGE_SIDE, IMAGE_SIDE)
        (directory / image_name).write_bytes(write_idx(stacked))
        (directory / label_name).write_bytes(write_idx(np.asarray(labels)))
