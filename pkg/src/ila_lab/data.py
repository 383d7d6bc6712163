"""Synthetic ultra-fine-grained images and the resize/crop/flip/normalise pipeline.

Every synthetic image shares one procedural base texture. Classes differ
only by a low-amplitude signature (peak magnitude ``inter_class_scale``) on a
fixed patch near the image centre. Intra-class variation has two parts:
Gaussian pixel noise of std ``intra_class_scale`` and a random integer shift
of the signature (up to ``max_shift`` pixels). With ``intra_class_scale == 0``
both are off and every sample of a class is identical. Difficulty is tuned by
the ratio of the two scales.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .errors import ConfigError, UsageError

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406])
IMAGENET_STD = np.array([0.229, 0.224, 0.225])

# resize-then-crop geometry of the 300 -> 224 recipe
RESIZE_RATIO = 300 / 224

_SPLIT_IDS = {"train": 0, "test": 1}
_BASE_LEVEL = 0.5
_TEXTURE_AMPLITUDE = 0.2


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_classes: int = 20
    samples_per_class_train: int = 10
    samples_per_class_test: int = 10
    image_size: int = 32
    inter_class_scale: float = 0.08
    intra_class_scale: float = 0.1
    max_shift: int = 1
    seed: int = 0

    @model_validator(mode="after")
    def _check(self) -> "SyntheticSpec":
        if self.num_classes < 1 or self.image_size < 8:
            raise ValueError("need num_classes >= 1 and image_size >= 8")
        if self.samples_per_class_train < 0 or self.samples_per_class_test < 0:
            raise ValueError("sample counts must be >= 0")
        if self.inter_class_scale < 0 or self.intra_class_scale < 0 or self.max_shift < 0:
            raise ValueError("scales and max_shift must be >= 0")
        return self


@dataclass
class Sample:
    image: np.ndarray  # [3, H, W] in [0, 1]
    label: int


@dataclass
class Split:
    images: np.ndarray  # [N, 3, H, W]
    labels: np.ndarray  # [N]
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Sample:
        return Sample(self.images[i], int(self.labels[i]))

    def __iter__(self) -> Iterator[Sample]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "Split":
        idx = np.asarray(idx, dtype=np.int64)
        return Split(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------- generator


def base_texture(spec: SyntheticSpec) -> np.ndarray:
    """Shared background: a few random oriented sinusoids, values in [-1, 1]."""
    rng = np.random.default_rng([spec.seed, 100])
    s = spec.image_size
    yy, xx = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    tex = np.zeros((3, s, s))
    for c in range(3):
        for _ in range(4):
            fy, fx = rng.uniform(-0.5, 0.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            tex[c] += np.sin(2 * np.pi * (fy * yy + fx * xx) / 4 + phase)
    return tex / np.abs(tex).max()


def class_signature(spec: SyntheticSpec, label: int) -> np.ndarray:
    """Class pattern with peak absolute value exactly ``inter_class_scale``."""
    rng = np.random.default_rng([spec.seed, 200, label])
    s = spec.image_size
    side = max(2, s // 4)
    # keep the support clear of the border so crops rarely cut it
    lo, hi = s // 4, s - s // 4 - side
    y0, x0 = (rng.integers(lo, max(lo, hi) + 1, size=2) if hi > lo else (lo, lo))
    # smooth field so small shifts keep the pattern recognisable
    coarse = rng.standard_normal((3, 3, 3))
    taper = np.sin(np.pi * (np.arange(side) + 0.5) / side)
    pattern = resize_bilinear(coarse, side) * np.outer(taper, taper)
    pattern /= np.abs(pattern).max()
    sig = np.zeros((3, s, s))
    sig[:, y0 : y0 + side, x0 : x0 + side] = pattern * spec.inter_class_scale
    return sig


def _sample(spec: SyntheticSpec, base: np.ndarray, sig: np.ndarray, split: str, label: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, _SPLIT_IDS[split], label, index])
    if spec.max_shift and spec.intra_class_scale:
        dy, dx = rng.integers(-spec.max_shift, spec.max_shift + 1, size=2)
        sig = np.roll(sig, (int(dy), int(dx)), axis=(1, 2))
    img = base + sig
    if spec.intra_class_scale:
        img = img + spec.intra_class_scale * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(spec: SyntheticSpec) -> tuple[Split, Split]:
    """Deterministic (train, test) splits; each sample seeds its own stream."""
    base = _BASE_LEVEL + _TEXTURE_AMPLITUDE * base_texture(spec)
    sigs = [class_signature(spec, c) for c in range(spec.num_classes)]
    out = []
    for split, per_class in (("train", spec.samples_per_class_train), ("test", spec.samples_per_class_test)):
        images, labels = [], []
        for c in range(spec.num_classes):
            for i in range(per_class):
                images.append(_sample(spec, base, sigs[c], split, c, i))
                labels.append(c)
        arr = np.stack(images) if images else np.zeros((0, 3, spec.image_size, spec.image_size))
        out.append(Split(arr.astype(np.float32), np.asarray(labels, dtype=np.int64), spec.num_classes))
    return out[0], out[1]


# ---------------------------------------------------------------- preprocessing


@lru_cache(maxsize=32)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights with half-pixel centres (align_corners=False)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        j0 = min(int(np.floor(src)), n_in - 1)
        j1 = min(j0 + 1, n_in - 1)
        frac = src - j0
        m[i, j0] += 1.0 - frac
        m[i, j1] += frac
    return m


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    c, h, w = image.shape
    if h == size and w == size:
        return image.astype(np.float64)
    rows, cols = _bilinear_matrix(h, size), _bilinear_matrix(w, size)
    return rows @ image @ cols.T


def default_resize(target_size: int) -> int:
    return int(round(target_size * RESIZE_RATIO))


def preprocess(
    image: np.ndarray,
    mode: str,
    target_size: int,
    rng: Optional[np.random.Generator] = None,
    resize_size: Optional[int] = None,
) -> np.ndarray:
    """Resize, crop (random for ``train``, centre for ``eval``), flip (train), normalise.

    All randomness comes from ``rng``; ``train`` mode without one is an error.
    """
    resize_size = resize_size or default_resize(target_size)
    if target_size > resize_size:
        raise ConfigError(f"crop {target_size} larger than resized image {resize_size}")
    img = resize_bilinear(np.asarray(image, dtype=np.float64), resize_size)
    return crop_flip_normalize(img, mode, target_size, rng)


def crop_flip_normalize(
    resized: np.ndarray, mode: str, target_size: int, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """The post-resize half of :func:`preprocess`."""
    slack = resized.shape[-1] - target_size
    if slack < 0:
        raise ConfigError(f"crop {target_size} larger than resized image {resized.shape[-1]}")
    if mode == "train":
        if rng is None:
            raise UsageError("train-mode preprocessing needs the run's random generator")
        oy, ox = (int(v) for v in rng.integers(0, slack + 1, size=2))
        img = resized[:, oy : oy + target_size, ox : ox + target_size]
        if rng.random() < 0.5:
            img = img[:, :, ::-1]
    elif mode == "eval":
        o = slack // 2
        img = resized[:, o : o + target_size, o : o + target_size]
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return (img - IMAGENET_MEAN[:, None, None]) / IMAGENET_STD[:, None, None]


def preprocess_batch(images: np.ndarray, mode: str, target_size: int, rng=None, dtype=np.float32) -> np.ndarray:
    return np.stack([preprocess(im, mode, target_size, rng) for im in images]).astype(dtype)


def resize_all(images: np.ndarray, target_size: int) -> np.ndarray:
    """Resize a stack once so per-step augmentation only crops and flips."""
    size = default_resize(target_size)
    return np.stack([resize_bilinear(im, size) for im in images]) if len(images) else images


# ---------------------------------------------------------------- on-disk datasets


def save_dataset(root: Union[str, Path], train: Split, test: Split, class_names: Optional[list[str]] = None) -> Path:
    """Cache splits as ``manifest.json`` plus little-endian float32 payloads."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": "ila-lab-dataset",
        "version": 1,
        "num_classes": train.num_classes,
        "class_names": class_names or [str(i) for i in range(train.num_classes)],
        "splits": {},
    }
    for name, split in (("train", train), ("test", test)):
        payload = np.ascontiguousarray(split.images, dtype="<f4")
        (root / f"{name}.bin").write_bytes(payload.tobytes())
        manifest["splits"][name] = {
            "count": len(split),
            "image_shape": list(split.images.shape[1:]),
            "dtype": "<f4",
            "file": f"{name}.bin",
            "labels": [int(v) for v in split.labels],
        }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return root


def load_dataset(root: Union[str, Path], image_size: Optional[int] = None) -> tuple[Split, Split]:
    """Load a cached dataset, or a ``{train,test}/<class_name>/<file>`` image tree."""
    root = Path(root)
    if (root / "manifest.json").exists():
        manifest = json.loads((root / "manifest.json").read_text())
        out = []
        for name in ("train", "test"):
            meta = manifest["splits"][name]
            raw = np.frombuffer((root / meta["file"]).read_bytes(), dtype=np.dtype(meta["dtype"]))
            images = raw.reshape([meta["count"], *meta["image_shape"]]).astype(np.float32)
            out.append(Split(images, np.asarray(meta["labels"], dtype=np.int64), manifest["num_classes"]))
        return out[0], out[1]
    if (root / "train").is_dir() and (root / "test").is_dir():
        classes = sorted(p.name for p in (root / "train").iterdir() if p.is_dir())
        return (
            _load_image_folder(root / "train", classes, image_size),
            _load_image_folder(root / "test", classes, image_size),
        )
    raise FileNotFoundError(f"{root}: neither a cached dataset nor a train/test image tree")


def _load_image_folder(root: Path, classes: list[str], image_size: Optional[int]) -> Split:
    from PIL import Image

    images, labels = [], []
    for label, name in enumerate(classes):
        folder = root / name
        if not folder.is_dir():
            continue
        for f in sorted(folder.iterdir()):
            if not f.is_file():
                continue
            with Image.open(f) as im:
                im = im.convert("RGB")
                if image_size:
                    im = im.resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
            images.append(arr.transpose(2, 0, 1))
            labels.append(label)
    if not images:
        raise FileNotFoundError(f"{root}: no images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ConfigError(f"{root}: images have differing sizes {sorted(shapes)[:3]}; set an image size")
    return Split(np.stack(images), np.asarray(labels, dtype=np.int64), len(classes))
