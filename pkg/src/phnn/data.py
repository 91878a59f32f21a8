"""Image file readers, channel policies and synthetic data generators."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ChannelPolicyError, ParseError, SpecInvalid
from .tensor import Tensor

POLICIES = ("natural", "zero_pad_to_n")

_IDX_TYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("f8"): 0x0E}


# ---------------------------------------------------------------- file formats

def read_idx(path) -> np.ndarray:
    """Parse an IDX file: two zero bytes, type code, rank, big-endian u32 dims, raw data."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[0] != 0 or blob[1] != 0:
        raise ParseError(f"{path}: bad IDX magic")
    code, rank = blob[2], blob[3]
    if code not in _IDX_TYPES:
        raise ParseError(f"{path}: unknown IDX type code 0x{code:02x}")
    if rank == 0 or len(blob) < 4 + 4 * rank:
        raise ParseError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{rank}I", blob[4:4 + 4 * rank])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    body = blob[4 + 4 * rank:]
    if len(body) != expected:
        raise ParseError(f"{path}: expected {expected} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = _IDX_CODES.get(np.dtype(arr.dtype.str.lstrip("<>=|")))
    if code is None:
        raise ParseError(f"cannot write dtype {arr.dtype} as IDX")
    dtype = _IDX_TYPES[code]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(dtype).tobytes())


def read_cifar_binary(path, image_shape=(3, 32, 32)) -> tuple:
    """Rows of one label byte followed by channel-planar uint8 pixels."""
    blob = Path(path).read_bytes()
    row = 1 + int(np.prod(image_shape))
    if not blob or len(blob) % row:
        raise ParseError(f"{path}: size {len(blob)} is not a multiple of the {row}-byte row")
    rows = np.frombuffer(blob, dtype=np.uint8).reshape(-1, row)
    return rows[:, 1:].reshape(-1, *image_shape), rows[:, 0].astype(np.int64)


def write_cifar_binary(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    rows = np.concatenate([labels, images.reshape(len(images), -1)], axis=1)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(rows.tobytes())


# ---------------------------------------------------------------- channel handling

def apply_channel_policy(images: np.ndarray, policy: str, n: int) -> np.ndarray:
    """``natural`` requires n | C; ``zero_pad_to_n`` prepends zero channels up to a multiple of n."""
    if policy not in POLICIES:
        raise ChannelPolicyError(f"unknown channel policy {policy!r}")
    C = images.shape[1]
    if policy == "natural":
        if C % n:
            raise ChannelPolicyError(f"n={n} does not divide {C} channels; use zero_pad_to_n")
        return images
    pad = (-C) % n
    if pad == 0:
        return images
    zeros = np.zeros((images.shape[0], pad, *images.shape[2:]), dtype=images.dtype)
    return np.concatenate([zeros, images], axis=1)


@dataclass
class ImageDataset:
    images: Tensor
    labels: Optional[np.ndarray]


def load_image_dataset(path, format: str, channel_policy: str = "natural", n: int = 1,
                       labels_path=None, image_shape=(3, 32, 32)) -> ImageDataset:
    """Load images as [B, C, H, W] in [0, 1] and reconcile the channel count with n.

    IDX files of rank 3 are read as single-channel [B, H, W]; rank 4 as [B, C, H, W].
    """
    if format == "idx":
        raw = read_idx(path)
        if raw.ndim == 3:
            raw = raw[:, None]
        elif raw.ndim != 4:
            raise ParseError(f"IDX images must have rank 3 or 4, got {raw.ndim}")
        labels = read_idx(labels_path).astype(np.int64) if labels_path is not None else None
    elif format == "cifar_binary":
        raw, labels = read_cifar_binary(path, image_shape)
    else:
        raise ParseError(f"unknown image format {format!r}")
    if raw.dtype == np.uint8:
        images = raw.astype(np.float64) / 255.0
    elif raw.dtype.kind == "f":
        images = raw.astype(np.float64)
        if images.size and (images.min() < 0 or images.max() > 1):
            raise ParseError("floating-point images must already lie in [0, 1]")
    else:
        raise ParseError(f"unsupported pixel type {raw.dtype}")
    if labels is not None and len(labels) != len(images):
        raise ParseError(f"{len(labels)} labels for {len(images)} images")
    images = apply_channel_policy(images, channel_policy, n)
    return ImageDataset(Tensor(images), labels)


# ---------------------------------------------------------------- desk classification set

def make_desk_images(num: int = 10_000, seed: int = 0, size: int = 8, num_classes: int = 10,
                     noise: float = 0.12) -> tuple:
    """Colour-pattern images (uint8, [B, 3, size, size]) with one smooth template per class.

    Each sample is its class template scaled by a random contrast, shifted by up
    to one pixel and corrupted with Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    coarse = rng.normal(size=(num_classes, 3, 4, 4))
    templates = coarse.repeat(size // 4, axis=2).repeat(size // 4, axis=3)
    templates += 0.5 * rng.normal(size=templates.shape)
    templates /= np.abs(templates).max(axis=(1, 2, 3), keepdims=True)
    labels = rng.integers(0, num_classes, size=num)
    contrast = rng.uniform(0.6, 1.0, size=(num, 1, 1, 1))
    imgs = 0.5 + 0.4 * contrast * templates[labels]
    shifts = rng.integers(-1, 2, size=(num, 2))
    for i, (dy, dx) in enumerate(shifts):
        imgs[i] = np.roll(imgs[i], (dy, dx), axis=(1, 2))
    imgs += noise * rng.normal(size=imgs.shape)
    return np.clip(np.round(imgs * 255), 0, 255).astype(np.uint8), labels.astype(np.int64)


# ---------------------------------------------------------------- synthetic SED

@dataclass
class SyntheticSedParams:
    num_clips: int = 200
    frames: int = 32
    mel_bins: int = 16
    channels: int = 8
    num_classes: int = 6
    max_overlap: int = 3
    snr_db: tuple = (0.0, 20.0)
    events_per_clip: tuple = (1, 4)
    event_frames: tuple = (4, 12)
    phase: bool = False

    def validate(self) -> None:
        if self.channels not in (4, 8, 16):
            raise SpecInvalid(f"channels must be 4, 8 or 16, got {self.channels}")
        if not 1 <= self.max_overlap <= 3:
            raise SpecInvalid("max_overlap must lie in [1, 3]")
        if self.channels == 16 and not self.phase:
            raise SpecInvalid("16 channels means two microphones with phases; set phase=True")
        if self.channels == 4 and self.phase:
            raise SpecInvalid("4 channels cannot hold a phase block")
        if self.num_clips < 1 or self.frames < 1 or self.mel_bins < 1 or self.num_classes < 1:
            raise SpecInvalid("sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _channel_layout(params: SyntheticSedParams) -> list:
    """(microphone, kind) per channel in [W, Z, Y, X] capsule order, phases after magnitudes."""
    mics = 1 if params.channels == 4 or (params.channels == 8 and params.phase) else 2
    layout = []
    for m in range(mics):
        layout += [(m, "mag", c) for c in range(4)]
        if params.phase:
            layout += [(m, "phase", c) for c in range(4)]
    return layout


def generate_synthetic_sed(params: SyntheticSedParams, seed: int = 0) -> tuple:
    """Multichannel spectrogram-like clips with frame-level multi-label targets.

    Returns (features [B, C, frames, mels], labels [B, frames, classes]); features
    are normalised to zero mean and unit standard deviation per channel.
    """
    params.validate()
    rng = np.random.default_rng(seed)
    K, T, M = params.num_classes, params.frames, params.mel_bins
    layout = _channel_layout(params)
    mics = 1 + max(m for m, _, _ in layout)

    mel = np.arange(M)
    templates = np.zeros((K, M))
    for k in range(K):
        for _ in range(2):
            centre = rng.uniform(0, M - 1)
            width = rng.uniform(0.8, 2.0)
            templates[k] += rng.uniform(0.5, 1.0) * np.exp(-0.5 * ((mel - centre) / width) ** 2)
        templates[k] /= templates[k].max()

    mags = np.zeros((params.num_clips, mics, 4, T, M))
    phases = np.zeros_like(mags)
    labels = np.zeros((params.num_clips, T, K))
    noise_level = 0.1
    for b in range(params.num_clips):
        mags[b] = noise_level * np.abs(rng.normal(size=(mics, 4, T, M)))
        phases[b] = rng.uniform(-np.pi, np.pi, size=(mics, 4, T, M))
        active = np.zeros(T, dtype=int)
        count = rng.integers(params.events_per_clip[0], params.events_per_clip[1] + 1)
        for _ in range(count):
            k = rng.integers(K)
            dur = rng.integers(params.event_frames[0], params.event_frames[1] + 1)
            onset = rng.integers(0, max(1, T - dur + 1))
            span = slice(onset, min(T, onset + dur))
            if np.any(active[span] >= params.max_overlap) or np.any(labels[b, span, k] > 0):
                continue
            active[span] += 1
            labels[b, span, k] = 1.0
            amp = noise_level * 10 ** (rng.uniform(*params.snr_db) / 20.0)
            azimuth, elevation = rng.uniform(-np.pi, np.pi), rng.uniform(-np.pi / 4, np.pi / 4)
            capsule = np.array([1.0, np.sin(elevation), np.sin(azimuth) * np.cos(elevation),
                                np.cos(azimuth) * np.cos(elevation)])
            envelope = np.hanning(dur + 2)[1:-1][: span.stop - span.start]
            for m in range(mics):
                gain = np.abs(capsule) * rng.uniform(0.8, 1.2)
                mags[b, m, :, span] += amp * gain[:, None, None] * envelope[:, None] * templates[k][None, :]
                phases[b, m, :, span] = np.angle(np.exp(1j * (phases[b, m, :, span] * 0.2 + azimuth * (m + 1))))

    feats = np.empty((params.num_clips, len(layout), T, M))
    for c, (m, kind, cap) in enumerate(layout):
        feats[:, c] = np.log1p(mags[:, m, cap]) if kind == "mag" else phases[:, m, cap]
    mu = feats.mean(axis=(0, 2, 3), keepdims=True)
    sd = feats.std(axis=(0, 2, 3), keepdims=True)
    feats = (feats - mu) / np.where(sd > 0, sd, 1.0)
    return feats, labels
