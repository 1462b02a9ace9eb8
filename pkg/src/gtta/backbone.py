"""Patch-MLP feature extractor f_theta and linear classifier g_omega.

Images are cut into non-overlapping patches; each patch is embedded
linearly and passed through two per-region layers that add the mean over
regions (a global context vector) before an ELU.  The pooled feature is
the mean of the region rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from gtta import tensor as T
from gtta.config import ModelConfig
from gtta.errors import ShapeMismatch


@dataclass
class RegionFeatures:
    features: T.Tensor  # [B x N x F_b] (or [N x F_b])
    region_geometry: list  # (row, col) per region


def region_geometry(cfg: ModelConfig) -> list:
    return [(r, c) for r in range(cfg.grid) for c in range(cfg.grid)]


def patchify(image, cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    """[C x H x W] -> [N x C*p*p] (or batched), patches row-major over the grid."""
    image = np.asarray(image, dtype=np.float64)
    batched = image.ndim == 4
    x = image if batched else image[None]
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatch(f"expected image shape {expected}, got {image.shape}")
    b, p, g = x.shape[0], cfg.patch, cfg.grid
    # b, c, gy, py, gx, px -> b, gy, gx, c, py, px
    out = x.reshape(b, cfg.channels, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    out = out.reshape(b, g * g, cfg.patch_dim)
    return out if batched else out[0]


def unpatchify(patches, cfg: ModelConfig = ModelConfig()) -> np.ndarray:
    g, p, c = cfg.grid, cfg.patch, cfg.channels
    x = np.asarray(patches).reshape(g, g, c, p, p).transpose(2, 0, 3, 1, 4)
    return x.reshape(c, cfg.image_size, cfg.image_size)


def standardize(images: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Zero mean, unit variance per image and channel."""
    axes = (-2, -1)
    mu = images.mean(axis=axes, keepdims=True)
    sd = images.std(axis=axes, keepdims=True)
    return (images - mu) / (sd + eps)


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    fb, pd, k = cfg.feat_dim, cfg.patch_dim, cfg.num_classes

    def dense(fan_in, fan_out):
        return T.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)))

    return {
        "backbone/patch_W": dense(pd, fb),
        "backbone/patch_b": T.parameter(np.zeros(fb)),
        "backbone/mix1_W": dense(fb, fb),
        "backbone/mix1_b": T.parameter(np.zeros(fb)),
        "backbone/mix2_W": dense(fb, fb),
        "backbone/mix2_b": T.parameter(np.zeros(fb)),
        "backbone/clf_W": dense(fb, k),
        "backbone/clf_b": T.parameter(np.zeros(k)),
    }


def _mix(x, W, b):
    u = x @ W + b
    return T.elu(u + T.reduce("mean", u, axis=-2, keepdims=True))


def backbone_forward(params: dict, images, cfg: ModelConfig = ModelConfig()):
    """Return (RegionFeatures, pooled) for one image or a batch."""
    arr = np.asarray(images, dtype=np.float64)
    if cfg.standardize:
        arr = standardize(arr)
    patches = patchify(arr, cfg)
    x = T.Tensor(patches) @ params["backbone/patch_W"] + params["backbone/patch_b"]
    x = _mix(x, params["backbone/mix1_W"], params["backbone/mix1_b"])
    x = _mix(x, params["backbone/mix2_W"], params["backbone/mix2_b"])
    pooled = T.reduce("mean", x, axis=-2)
    return RegionFeatures(x, region_geometry(cfg)), pooled


def classifier_logits(params: dict, pooled):
    """pooled [.. x F_b] -> logits [.. x K]."""
    pooled = T.as_tensor(pooled)
    squeeze = pooled.ndim == 1
    if squeeze:
        pooled = T.reshape(pooled, (1, -1))
    logits = pooled @ params["backbone/clf_W"] + params["backbone/clf_b"]
    return T.reshape(logits, (-1,)) if squeeze else logits


def extract_features(params: dict, images, cfg: ModelConfig = ModelConfig(), chunk: int = 256) -> np.ndarray:
    """Pooled features for a stack of images, no tape."""
    out = []
    with T.no_grad():
        for i in range(0, len(images), chunk):
            _, pooled = backbone_forward(params, images[i:i + chunk], cfg)
            out.append(pooled.data)
    return np.concatenate(out, axis=0)
