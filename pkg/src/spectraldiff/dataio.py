"""Dataset ingestion: IDX image/label archives and binary PGM/PPM images.

IDX files follow the published big-endian layout: a 4-byte magic
(0x00000803 for images, 0x00000801 for labels), one 4-byte size per
dimension, then the unsigned-byte payload.  PGM (P5) and PPM (P6) are the
binary variants with maxval up to 255.  Pixel values are scaled to [0, 1]
on load; images may be zero-padded symmetrically onto a larger even square
(e.g. 28 -> 32), which is recorded on the handle so downstream statistics
stay comparable.
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

__all__ = [
    "FormatError",
    "BadMagicError",
    "TruncatedFileError",
    "LabelCountMismatchError",
    "IDX_IMAGE_MAGIC",
    "IDX_LABEL_MAGIC",
    "DatasetHandle",
    "load_idx_images",
    "load_idx_labels",
    "load_idx",
    "write_idx_images",
    "write_idx_labels",
    "read_image",
    "write_pgm",
    "write_ppm",
    "write_image",
    "load_image_dir",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """A file does not conform to its declared format."""


class BadMagicError(FormatError):
    """The magic number does not identify the expected file kind."""


class TruncatedFileError(FormatError):
    """The payload is shorter than the header promises."""


class LabelCountMismatchError(FormatError):
    """Image and label archives disagree on the item count."""


@dataclass
class DatasetHandle:
    """A decoded dataset: images as (n, C, H, W) float32 in [0, 1]."""

    images: np.ndarray
    labels: Optional[np.ndarray]
    source: str
    padded_from: Optional[tuple] = None
    label_names: Optional[dict] = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError("images must be (n, C, H, W)")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise LabelCountMismatchError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )

    @property
    def n_items(self):
        return len(self.images)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def classes(self):
        if self.labels is None:
            return []
        return sorted(set(self.labels.tolist()))

    def iter_images(self, indices=None):
        """Yield float64 (C, H, W) images one at a time."""
        if indices is None:
            indices = range(self.n_items)
        for i in indices:
            yield self.images[i].astype(np.float64)

    def subset(self, mask_or_indices):
        labels = None if self.labels is None else self.labels[mask_or_indices]
        return DatasetHandle(
            images=self.images[mask_or_indices], labels=labels,
            source=self.source, padded_from=self.padded_from,
            label_names=self.label_names,
        )


def _read_exact(fh, count, path, what):
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedFileError(
            f"{path}: truncated {what}: expected {count} bytes, got {len(data)}"
        )
    return data


def load_idx_images(path):
    """Decode an IDX image archive to a (n, H, W) uint8 array."""
    path = str(path)
    with open(path, "rb") as fh:
        magic, = struct.unpack(">i", _read_exact(fh, 4, path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise BadMagicError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x} "
                "for an image archive"
            )
        count, rows, cols = struct.unpack(">iii", _read_exact(fh, 12, path, "header"))
        payload = _read_exact(fh, count * rows * cols, path, "pixel payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path):
    """Decode an IDX label archive to a (n,) uint8 array."""
    path = str(path)
    with open(path, "rb") as fh:
        magic, = struct.unpack(">i", _read_exact(fh, 4, path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise BadMagicError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x} "
                "for a label archive"
            )
        count, = struct.unpack(">i", _read_exact(fh, 4, path, "header"))
        payload = _read_exact(fh, count, path, "label payload")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        fh.write(labels.tobytes())


def _pad_center(images, pad_to):
    n, c, h, w = images.shape
    if pad_to % 2 or pad_to < max(h, w):
        raise ValueError(
            f"pad target must be even and >= {max(h, w)}, got {pad_to}"
        )
    out = np.zeros((n, c, pad_to, pad_to), dtype=images.dtype)
    top = (pad_to - h) // 2
    left = (pad_to - w) // 2
    out[:, :, top:top + h, left:left + w] = images
    return out


def load_idx(images_path, labels_path=None, pad_to=None):
    """Load an IDX image archive (optionally with labels) as a dataset.

    Pixels are scaled to [0, 1]; ``pad_to`` zero-pads each image centered
    on an even square canvas.
    """
    raw = load_idx_images(images_path)
    images = (raw.astype(np.float32) / 255.0)[:, None]
    labels = None
    if labels_path is not None:
        labels = load_idx_labels(labels_path)
        if len(labels) != len(images):
            raise LabelCountMismatchError(
                f"{images_path}: {len(images)} images but "
                f"{labels_path}: {len(labels)} labels"
            )
    padded_from = None
    if pad_to is not None and (raw.shape[1] != pad_to or raw.shape[2] != pad_to):
        padded_from = tuple(raw.shape[1:])
        images = _pad_center(images, pad_to)
    return DatasetHandle(images=images, labels=labels,
                         source=str(images_path), padded_from=padded_from)


def _read_netpbm_header(fh, path):
    """Parse magic, dimensions and maxval, skipping comments."""
    def next_token():
        token = b""
        while True:
            ch = fh.read(1)
            if not ch:
                raise TruncatedFileError(f"{path}: truncated header")
            if ch == b"#":
                while ch not in (b"\n", b""):
                    ch = fh.read(1)
                continue
            if ch.isspace():
                if token:
                    return token
                continue
            token += ch

    magic = next_token()
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(
            f"{path}: unsupported format {magic!r}; only binary PGM (P5) "
            "and PPM (P6) are supported"
        )
    width = int(next_token())
    height = int(next_token())
    maxval = int(next_token())
    if not 0 < maxval <= 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    return magic.decode(), width, height, maxval


def read_image(path):
    """Read a binary PGM/PPM file to a (C, H, W) float64 array in [0, 1]."""
    path = str(path)
    with open(path, "rb") as fh:
        magic, width, height, maxval = _read_netpbm_header(fh, path)
        channels = 1 if magic == "P5" else 3
        payload = _read_exact(fh, width * height * channels, path, "pixel payload")
    data = np.frombuffer(payload, dtype=np.uint8).astype(np.float64) / maxval
    if magic == "P5":
        return data.reshape(1, height, width)
    return data.reshape(height, width, 3).transpose(2, 0, 1)


def _quantize(img):
    img = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, img):
    """Write a (H, W) or (1, H, W) image as binary PGM, maxval 255."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError("PGM holds a single channel; use write_ppm")
        img = img[0]
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(img).tobytes())


def write_ppm(path, img):
    """Write a (3, H, W) image as binary PPM, maxval 255."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("PPM needs a (3, H, W) image")
    h, w = img.shape[1:]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(_quantize(img).transpose(1, 2, 0).tobytes())


def write_image(path, img):
    """Write PGM for single-channel images, PPM for three channels."""
    img = np.asarray(img)
    if img.ndim == 2 or img.shape[0] == 1:
        write_pgm(path, img)
    elif img.shape[0] == 3:
        write_ppm(path, img)
    else:
        raise ValueError(f"cannot encode {img.shape[0]}-channel image")


_IMAGE_SUFFIXES = (".pgm", ".ppm")


def load_image_dir(path, layout="auto", pad_to=None):
    """Load a directory of PGM/PPM files as a dataset.

    ``layout="per-class"`` (or "auto" when subdirectories are present)
    assigns integer labels from lexicographically sorted subdirectory
    names; "flat" reads files directly from ``path``.  All images must
    decode to one shape.
    """
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"{path} is not a directory")
    subdirs = sorted(d for d in root.iterdir() if d.is_dir())
    if layout == "auto":
        layout = "per-class" if subdirs else "flat"
    if layout not in ("flat", "per-class"):
        raise ValueError(f"unknown layout {layout!r}")

    entries = []
    label_names = None
    if layout == "per-class":
        if not subdirs:
            raise FormatError(f"{path}: per-class layout needs subdirectories")
        label_names = {i: d.name for i, d in enumerate(subdirs)}
        for i, d in enumerate(subdirs):
            for f in sorted(d.iterdir()):
                if f.suffix.lower() in _IMAGE_SUFFIXES:
                    entries.append((f, i))
    else:
        for f in sorted(root.iterdir()):
            if f.suffix.lower() in _IMAGE_SUFFIXES:
                entries.append((f, None))
    if not entries:
        raise FormatError(f"{path}: no PGM/PPM files found")

    images = []
    labels = []
    shape = None
    for f, label in entries:
        img = read_image(f)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise FormatError(
                f"{f}: shape {img.shape} differs from {shape} seen earlier"
            )
        images.append(img.astype(np.float32))
        labels.append(label)

    stacked = np.stack(images)
    padded_from = None
    if pad_to is not None and (pad_to != shape[1] or pad_to != shape[2]):
        padded_from = shape[1:]
        stacked = _pad_center(stacked, pad_to)
    return DatasetHandle(
        images=stacked,
        labels=None if layout == "flat" else np.asarray(labels),
        source=str(path),
        padded_from=padded_from,
        label_names=label_names,
    )
