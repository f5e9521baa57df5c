"""MNIST ingestion (IDX format), stratified subsetting and the encoded-dataset cache."""

from __future__ import annotations

import gzip
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoding import EncodedDataset, EncoderConfig, encode_images

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"SSNNENC\x00"
CACHE_VERSION = 1
DATA_DIR_ENV = "SIAMESE_SNN_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    pass


@dataclass
class RawDataset:
    images: np.ndarray  # (n, 28, 28) uint8
    labels: np.ndarray  # (n,) uint8
    split: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(
                f"image count {self.images.shape[0]} does not match label count {self.labels.shape[0]}"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def normalized(self) -> np.ndarray:
        """Flattened ``(n, 784)`` intensities divided by the global maximum 255."""
        return self.images.reshape(len(self), -1).astype(np.float64) / 255.0

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, idx) -> "RawDataset":
        idx = np.asarray(idx)
        return RawDataset(self.images[idx], self.labels[idx], self.split)


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob: bytes, path, expected_magic: int, ndim: int) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise DataFormatError(f"{path}: truncated at byte 0, file has {len(blob)} bytes")
    (magic,) = struct.unpack_from(">I", blob, 0)
    if magic != expected_magic:
        raise DataFormatError(
            f"{path}: bad magic number 0x{magic:08x} at byte 0 (expected 0x{expected_magic:08x})"
        )
    if len(blob) < header:
        raise DataFormatError(f"{path}: header truncated at byte {len(blob)} (needs {header} bytes)")
    dims = struct.unpack_from(">" + "I" * ndim, blob, 4)
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise DataFormatError(
            f"{path}: data truncated at byte {len(blob)}, expected {header + size} bytes for dims {dims}"
        )
    if len(blob) > header + size:
        raise DataFormatError(f"{path}: {len(blob) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims).copy()


def load_idx(path_images, path_labels, split: str = "") -> RawDataset:
    """Parse an IDX image file and its label file."""
    images = _parse_idx(_read_bytes(path_images), path_images, IMAGE_MAGIC, 3)
    labels = _parse_idx(_read_bytes(path_labels), path_labels, LABEL_MAGIC, 1)
    if images.shape[1:] != (28, 28):
        raise DataFormatError(f"{path_images}: expected 28x28 images at byte 8, got {images.shape[1:]}")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {path_images} holds {images.shape[0]} images (byte 4), "
            f"{path_labels} holds {labels.shape[0]} labels (byte 4)"
        )
    return RawDataset(images, labels, split)


def write_idx(path_images, path_labels, images: np.ndarray, labels: np.ndarray) -> None:
    """Write IDX files; used for fixtures and exported subsets."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path_images, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(path_labels, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def data_dir(override=None) -> Path:
    if override is not None:
        return Path(override)
    return Path(os.environ.get(DATA_DIR_ENV, "data/mnist"))


def load_mnist(split: str, directory=None) -> RawDataset:
    if split not in MNIST_FILES:
        raise ValueError(f"unknown split {split!r}; expected 'train' or 'test'")
    root = data_dir(directory)
    paths = []
    for name in MNIST_FILES[split]:
        for candidate in (root / name, root / (name + ".gz")):
            if candidate.exists():
                paths.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{root / name} not found (set {DATA_DIR_ENV} or --data-dir)")
    return load_idx(*paths, split=split)


def stratified_indices(labels: np.ndarray, total: int | None, skip: int = 0) -> np.ndarray:
    """First ``total / n_classes`` examples of every class, after skipping ``skip`` per class.

    Returned indices keep dataset order. ``total=None`` takes everything left.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    per_class = None if total is None else total // len(classes)
    extra = 0 if total is None else total - per_class * len(classes)
    chosen = []
    for rank, c in enumerate(classes):
        idx = np.flatnonzero(labels == c)[skip:]
        if per_class is not None:
            idx = idx[: per_class + (1 if rank < extra else 0)]
        chosen.append(idx)
    return np.sort(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# encoded cache


def cache_path(cache_dir, raw: RawDataset, cfg: EncoderConfig) -> Path:
    key = hashlib.sha256((cfg.digest() + raw.digest()).encode()).hexdigest()[:16]
    return Path(cache_dir) / f"{cfg.scheme}-{key}.bin"


def save_encoded(path, ds: EncodedDataset, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta, version=CACHE_VERSION, scheme=ds.scheme, n=len(ds), channels=ds.times.shape[1])
    hbytes = json.dumps(header, sort_keys=True).encode()
    bitmap = np.packbits(ds.present, axis=None)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(ds.labels.astype("<i8").tobytes())
        fh.write(bitmap.tobytes())
        fh.write(ds.times[ds.present].astype("<f8").tobytes())
    os.replace(tmp, path)


def load_encoded(path) -> tuple[EncodedDataset, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CACHE_MAGIC:
        raise DataFormatError(f"{path}: not an encoded-dataset cache")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    header = json.loads(blob[12 : 12 + hlen])
    if header.get("version") != CACHE_VERSION:
        raise DataFormatError(f"{path}: cache version {header.get('version')} != {CACHE_VERSION}")
    n, ch = header["n"], header["channels"]
    off = 12 + hlen
    labels = np.frombuffer(blob, "<i8", n, off)
    off += 8 * n
    nbytes = (n * ch + 7) // 8
    present = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, off), count=n * ch).astype(bool).reshape(n, ch)
    off += nbytes
    k = int(present.sum())
    if len(blob) != off + 8 * k:
        raise DataFormatError(f"{path}: expected {off + 8 * k} bytes, found {len(blob)}")
    times = np.zeros((n, ch))
    times[present] = np.frombuffer(blob, "<f8", k, off)
    return EncodedDataset(times, present, labels.copy(), header["scheme"]), header


def encode_dataset(raw: RawDataset, cfg: EncoderConfig, cache_dir=None) -> EncodedDataset:
    """Encode every image; reuse ``cache_dir/<scheme>-<hash>.bin`` when valid."""
    path = cache_path(cache_dir, raw, cfg) if cache_dir is not None else None
    if path is not None and path.exists():
        try:
            ds, header = load_encoded(path)
            if header.get("config") == cfg.digest() and header.get("source") == raw.digest():
                return ds
            log.warning("cache %s does not match the requested data; re-encoding", path)
        except (DataFormatError, KeyError, ValueError) as exc:
            log.warning("cache %s unusable (%s); re-encoding", path, exc)
    times, present = encode_images(raw.normalized(), cfg)
    ds = EncodedDataset(times, present, raw.labels.astype(np.int64), cfg.scheme)
    if path is not None:
        save_encoded(path, ds, {"config": cfg.digest(), "source": raw.digest()})
    return ds
