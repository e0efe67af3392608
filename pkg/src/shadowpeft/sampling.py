"""Point prompt synthesis from a coarse shadow-probability mask.

A coarse mask is a (H, W) float array with values in [0, 1]. All sampling
runs at mask resolution; coordinates are rescaled to the segmentation
model's input space with a center-of-pixel mapping only when prompts are
assembled.

Determinism: ties are always broken by row-major pixel index (smaller
index wins), which makes every sampler reproducible and oracle-testable.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, RequestError

POSITIVE = 1
NEGATIVE = 0


@dataclass(frozen=True)
class PointPrompt:
    """A single labeled point in coarse-mask pixel coordinates."""

    x: int  # column
    y: int  # row
    label: int  # 1 = shadow, 0 = background
    score: float  # mask value at (y, x)


@dataclass
class PromptSet:
    """Prompts handed to the segmentation model.

    ``point_coords`` / ``box`` are in encoder-input pixel space (center-of-pixel
    mapping from mask space); ``points`` keeps the raw mask-space picks.
    """

    points: list = field(default_factory=list)
    point_coords: np.ndarray | None = None  # (n, 2) float, xy
    point_labels: np.ndarray | None = None  # (n,) int
    bbox: tuple | None = None  # (x_min, y_min, x_max, y_max)
    dense_mask: np.ndarray | None = None


@dataclass
class SamplingConfig:
    strategy: str = "grid"  # "topk" or "grid"
    k: int = 1
    grid_size: int = 16
    tau: float = 0.5
    n_pos: int = 8
    n_neg: int = 8

    def __post_init__(self):
        if self.strategy not in ("topk", "grid"):
            raise ConfigError(f"unknown sampling strategy {self.strategy!r}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0,1)")
        if self.grid_size < 1:
            raise ConfigError("grid_size must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.n_pos < 0 or self.n_neg < 0:
            raise ConfigError("n_pos/n_neg must be non-negative")


def _check_mask(mask):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise RequestError(f"expected a 2D mask, got shape {mask.shape}")
    return mask


def topk_sample(mask, n_pos, n_neg):
    """Globally highest-scored pixels as positives, lowest as negatives.

    Returns positives (score descending) followed by negatives (score
    ascending); ties broken by row-major index.
    """
    mask = _check_mask(mask)
    if n_pos + n_neg < 1:
        raise RequestError("n_pos + n_neg must be at least 1")
    if n_pos + n_neg > mask.size:
        raise RequestError(
            f"requested {n_pos + n_neg} points from a mask of {mask.size} pixels"
        )
    h, w = mask.shape
    flat = mask.ravel()
    points = []
    for idx in np.argsort(-flat, kind="stable")[:n_pos]:
        points.append(PointPrompt(int(idx % w), int(idx // w), POSITIVE, float(flat[idx])))
    for idx in np.argsort(flat, kind="stable")[:n_neg]:
        points.append(PointPrompt(int(idx % w), int(idx // w), NEGATIVE, float(flat[idx])))
    return points


def _block_edges(n, g):
    # Balanced partition: first n % g blocks get the extra pixel, so every
    # block is non-empty whenever g <= n and trailing blocks are smaller.
    base, rem = divmod(n, g)
    edges = [0]
    for i in range(g):
        edges.append(edges[-1] + base + (1 if i < rem else 0))
    return edges


def grid_sample(mask, g, k, tau):
    """Partition the mask into g x g blocks; pick the k best pixels per block.

    Each pick is labeled positive iff its score >= tau. Blocks are emitted
    row-major; within a block, picks are score-descending with row-major
    tie-break. Always returns exactly g * g * k points.
    """
    mask = _check_mask(mask)
    h, w = mask.shape
    if g < 1 or g > min(h, w):
        raise RequestError(f"grid size {g} must lie in [1, min(H, W)={min(h, w)}]")
    if k < 1:
        raise RequestError("k must be >= 1")
    rows = _block_edges(h, g)
    cols = _block_edges(w, g)
    points = []
    for bi in range(g):
        r0, r1 = rows[bi], rows[bi + 1]
        for bj in range(g):
            c0, c1 = cols[bj], cols[bj + 1]
            sub = mask[r0:r1, c0:c1]
            if sub.size < k:
                raise RequestError(
                    f"block ({bi},{bj}) has {sub.size} pixels but k={k}"
                )
            flat = sub.ravel()
            bw = c1 - c0
            for idx in np.argsort(-flat, kind="stable")[:k]:
                x = c0 + int(idx % bw)
                y = r0 + int(idx // bw)
                score = float(flat[idx])
                points.append(PointPrompt(x, y, int(score >= tau), score))
    return points


def bbox_from_mask(mask, tau):
    """Tight box over pixels >= tau, or None when nothing crosses tau."""
    mask = _check_mask(mask)
    ys, xs = np.nonzero(mask >= tau)
    if ys.size == 0:
        return None
    return (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))


def rescale_coords(coords, mask_shape, input_size):
    """Center-of-pixel mapping from mask space to encoder-input space."""
    h, w = mask_shape
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(coords)
    out[..., 0] = (coords[..., 0] + 0.5) * (input_size / w)
    out[..., 1] = (coords[..., 1] + 0.5) * (input_size / h)
    return out


def assemble_prompts(mask, cfg, mode, input_size=1024):
    """Build the PromptSet for one of the three prompt modes.

    mode 0: points per cfg.strategy; mode 1: bounding box; mode 2: the
    mask itself, resampled to the dense-prompt grid (input_size / 4 per
    side).
    """
    mask = _check_mask(mask)
    if mode not in (0, 1, 2):
        raise RequestError(f"prompt mode must be 0, 1 or 2, got {mode}")
    if mode == 0:
        if cfg.strategy == "topk":
            points = topk_sample(mask, cfg.n_pos, cfg.n_neg)
        else:
            points = grid_sample(mask, cfg.grid_size, cfg.k, cfg.tau)
        raw = np.array([[p.x, p.y] for p in points], dtype=np.float64)
        return PromptSet(
            points=points,
            point_coords=rescale_coords(raw, mask.shape, input_size),
            point_labels=np.array([p.label for p in points], dtype=np.int64),
        )
    if mode == 1:
        box = bbox_from_mask(mask, cfg.tau)
        if box is None:
            return PromptSet(bbox=None)
        corners = np.array([[box[0], box[1]], [box[2], box[3]]], dtype=np.float64)
        scaled = rescale_coords(corners, mask.shape, input_size)
        return PromptSet(
            bbox=(scaled[0, 0], scaled[0, 1], scaled[1, 0], scaled[1, 1])
        )
    side = input_size // 4
    t = torch.from_numpy(mask.astype(np.float32))[None, None]
    dense = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return PromptSet(dense_mask=dense[0, 0].numpy())
