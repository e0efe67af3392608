"""Dataset ingestion, augmentation and the resize/normalize contract.

Supported layouts (auto-detected under the profile root):
  - images/ + masks/ with matching stems (custom layout)
  - <split>_A/ + <split>_B/ (ISTD triplets; the shadow-free <split>_C dir
    is ignored)
  - ShadowImages/ + ShadowMasks/ (SBU / UCF convention)

Masks are single-channel PNGs with 0 = background and 255 = shadow,
binarized at 128/255 on ingestion.
"""

import os
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, IngestionError
from .losses import FocalParams

IMAGE_EXTS = (".png", ".jpg", ".jpeg")


@dataclass
class DatasetSample:
    image: np.ndarray  # (H, W, 3) float32 in [0,1]
    gt_mask: np.ndarray  # (H, W) uint8 binary
    id: str
    original_size: tuple  # (H, W)


@dataclass
class DatasetProfile:
    name: str = "custom"
    root: str = "."
    split: str = "train"
    focal: FocalParams = field(default_factory=FocalParams)
    epochs: int = 40


# Per-dataset training settings: focal alpha/gamma and epoch budget.
PROFILE_DEFAULTS = {
    "sbu": dict(focal=FocalParams(8 / 9, 2.0), epochs=40),
    "ucf": dict(focal=FocalParams(8 / 9, 2.0), epochs=40),
    "istd": dict(focal=FocalParams(8 / 9, 2.0), epochs=200),
    "cuhk": dict(focal=FocalParams(0.7, 2.0), epochs=200),
    "custom": dict(focal=FocalParams(8 / 9, 2.0), epochs=40),
}


def make_profile(name, root, split="train", **overrides):
    if name not in PROFILE_DEFAULTS:
        raise ConfigError(
            f"unknown profile {name!r}; choose from {sorted(PROFILE_DEFAULTS)}"
        )
    kwargs = dict(PROFILE_DEFAULTS[name])
    kwargs.update(overrides)
    return DatasetProfile(name=name, root=root, split=split, **kwargs)


def _resolve_layout(profile):
    root = profile.root
    candidates = [
        ("images", "masks"),
        (f"{profile.split}_A", f"{profile.split}_B"),
        ("ShadowImages", "ShadowMasks"),
    ]
    for img_dir, mask_dir in candidates:
        ip, mp = os.path.join(root, img_dir), os.path.join(root, mask_dir)
        if os.path.isdir(ip) and os.path.isdir(mp):
            return ip, mp
    raise IngestionError(
        f"no recognized dataset layout under {root!r} "
        f"(tried {[c[0] for c in candidates]})"
    )


def _load_image(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def _load_mask(path):
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return (arr >= 128).astype(np.uint8)


def load_dataset(profile: DatasetProfile):
    """Load all image/mask pairs, ordered lexicographically by stem."""
    img_dir, mask_dir = _resolve_layout(profile)
    images = {}
    for fn in os.listdir(img_dir):
        stem, ext = os.path.splitext(fn)
        if ext.lower() in IMAGE_EXTS:
            images[stem] = os.path.join(img_dir, fn)
    masks = {}
    for fn in os.listdir(mask_dir):
        stem, ext = os.path.splitext(fn)
        if ext.lower() in IMAGE_EXTS:
            masks[stem] = os.path.join(mask_dir, fn)
    if not images:
        raise IngestionError(f"no images found in {img_dir!r}")
    missing = sorted(set(images) - set(masks))
    if missing:
        raise IngestionError(f"images lacking masks: {missing}")
    samples = []
    for stem in sorted(images):
        image = _load_image(images[stem])
        mask = _load_mask(masks[stem])
        if mask.shape != image.shape[:2]:
            raise IngestionError(
                f"{stem}: mask shape {mask.shape} != image shape {image.shape[:2]}"
            )
        samples.append(DatasetSample(image, mask, stem, image.shape[:2]))
    return samples


def augment(sample: DatasetSample, seed, crop_scale=(0.75, 1.0)):
    """Seeded horizontal flip (p=0.5) and random crop, applied identically
    to image and mask."""
    rng = np.random.default_rng(seed)
    image, mask = sample.image, sample.gt_mask
    if rng.random() < 0.5:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    h, w = mask.shape
    scale = rng.uniform(*crop_scale)
    ch, cw = max(1, round(scale * h)), max(1, round(scale * w))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    image = image[y0:y0 + ch, x0:x0 + cw]
    mask = mask[y0:y0 + ch, x0:x0 + cw]
    return replace(sample, image=image, gt_mask=mask,
                   original_size=(ch, cw))


def resize_normalize(sample: DatasetSample, input_size, mask_size,
                     pixel_mean=(0.5, 0.5, 0.5), pixel_std=(0.5, 0.5, 0.5)):
    """Image -> (3, S, S) normalized tensor; mask -> (m, m) binary tensor.

    Returns (image, mask, original_size); the original size is retained so
    predictions can be restored for evaluation.
    """
    img = torch.from_numpy(np.ascontiguousarray(sample.image)).permute(2, 0, 1)[None]
    img = F.interpolate(img, size=(input_size, input_size), mode="bilinear",
                        align_corners=False)[0]
    mean = torch.tensor(pixel_mean).view(3, 1, 1)
    std = torch.tensor(pixel_std).view(3, 1, 1)
    img = (img - mean) / std
    mask = torch.from_numpy(np.ascontiguousarray(sample.gt_mask))[None, None].float()
    mask = F.interpolate(mask, size=(mask_size, mask_size), mode="nearest")[0, 0]
    return img, mask, sample.original_size


def synthetic_samples(n, size=64, seed=0):
    """Learnable toy data: a darkened random rectangle is the shadow."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        base = rng.uniform(0.4, 0.9, size=(size, size, 1)).astype(np.float32)
        base = base * rng.uniform(0.7, 1.0, size=(1, 1, 3)).astype(np.float32)
        mask = np.zeros((size, size), dtype=np.uint8)
        h = int(rng.integers(size // 4, size // 2))
        w = int(rng.integers(size // 4, size // 2))
        y0 = int(rng.integers(0, size - h))
        x0 = int(rng.integers(0, size - w))
        mask[y0:y0 + h, x0:x0 + w] = 1
        image = base * np.where(mask[..., None] == 1, 0.3, 1.0).astype(np.float32)
        samples.append(DatasetSample(image, mask, f"synthetic_{i:03d}", (size, size)))
    return samples
