"""Pixel-to-spike conversion for flattened 28x28 images.

Three schemes are provided:

``black_white``
    binarize at a fraction of the global maximum intensity; bright pixels
    fire at ``t0``, dark pixels at ``t1``.
``binary``
    same binarization, but dark pixels emit no event at all.
``grayscale``
    each pixel is an integrate-and-fire converter driven by a constant
    current equal to its intensity, firing at ``v_thr * tau_syn / I``.
    Black pixels never fire.

Intensities are normalized to ``[0, 1]`` by the dataset-wide maximum (255 for
MNIST), so the 50% binarization threshold is 127.5 in raw units.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from .spiketrain import ChannelEvents

SCHEMES = ("black_white", "binary", "grayscale")
N_PIXELS = 784


@dataclass(frozen=True)
class EncoderConfig:
    scheme: str = "black_white"
    t0: float = 0.0
    t1: float = 1.79
    threshold: float = 0.5
    v_thr: float = 1.0
    tau_syn: float = 1.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
        if not self.t0 < self.t1:
            raise ValueError("t0 must be earlier than t1")
        if self.t0 < 0:
            raise ValueError("t0 must be >= 0")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold fraction must lie in (0, 1)")
        if self.v_thr <= 0 or self.tau_syn <= 0:
            raise ValueError("v_thr and tau_syn must be positive")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class EncodedDataset:
    """Labeled spike-encoded images, ``times``/``present`` of shape ``(n, channels)``."""

    times: np.ndarray
    present: np.ndarray
    labels: np.ndarray
    scheme: str = ""

    def __post_init__(self):
        self.times = np.ascontiguousarray(self.times, dtype=np.float64)
        self.present = np.ascontiguousarray(self.present, dtype=bool)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.times.shape != self.present.shape or self.times.shape[0] != self.labels.shape[0]:
            raise ValueError("times, present and labels must agree in length")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, idx) -> "EncodedDataset":
        idx = np.asarray(idx)
        return EncodedDataset(self.times[idx], self.present[idx], self.labels[idx], self.scheme)

    def example(self, i: int) -> ChannelEvents:
        return ChannelEvents(self.times[i], self.present[i])


def _check_images(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.shape[-1] != N_PIXELS:
        arr = arr.reshape(arr.shape[:-2] + (N_PIXELS,)) if arr.shape[-2:] == (28, 28) else arr
    if arr.shape[-1] != N_PIXELS:
        raise ValueError(f"images must have {N_PIXELS} pixels, got shape {arr.shape}")
    if np.any(arr < 0) or np.any(arr > 1) or not np.all(np.isfinite(arr)):
        raise ValueError("pixel intensities must lie in [0, 1]")
    return arr


def _single(arr_times, arr_present, images):
    if np.asarray(images).ndim == 1:
        return ChannelEvents(arr_times, arr_present)
    return arr_times, arr_present


def encode_black_white_array(images, cfg: EncoderConfig = EncoderConfig()):
    img = _check_images(images)
    bright = img >= cfg.threshold
    return np.where(bright, cfg.t0, cfg.t1), np.ones(img.shape, dtype=bool)


def encode_binary_array(images, cfg: EncoderConfig = EncoderConfig()):
    img = _check_images(images)
    bright = img >= cfg.threshold
    return np.where(bright, cfg.t0, 0.0), bright


def encode_grayscale_array(images, cfg: EncoderConfig = EncoderConfig()):
    img = _check_images(images)
    with np.errstate(divide="ignore", over="ignore"):
        times = cfg.v_thr * cfg.tau_syn / img
    # an intensity so small that its spike time overflows is as good as dark
    lit = np.isfinite(times)
    return np.where(lit, times, 0.0), lit


def encode_black_white(img, cfg: EncoderConfig = EncoderConfig()):
    """Every channel gets an event: ``t0`` if the pixel is at least the threshold, else ``t1``."""
    return _single(*encode_black_white_array(img, cfg), img)


def encode_binary(img, cfg: EncoderConfig = EncoderConfig()):
    return _single(*encode_binary_array(img, cfg), img)


def encode_grayscale(img, cfg: EncoderConfig = EncoderConfig()):
    """Event at ``v_thr * tau_syn / I`` for ``I > 0``; black pixels stay silent.

    No clipping: the dimmest MNIST level (1/255) fires at 255 ms.
    """
    return _single(*encode_grayscale_array(img, cfg), img)


_ENCODERS = {
    "black_white": encode_black_white_array,
    "binary": encode_binary_array,
    "grayscale": encode_grayscale_array,
}


def encode_images(images, cfg: EncoderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Encode an ``(n, 784)`` array of normalized images with the configured scheme."""
    return _ENCODERS[cfg.scheme](images, cfg)
