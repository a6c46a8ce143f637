"""Training-time augmentation of standardized ``[k, C, H, W]`` samples."""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def augment(images, seed, strength: float = 1.0, missing=None):
    """Random rotation, scale, brightness/contrast, blur and per-channel noise.

    One geometric transform is shared by every frame and channel of the
    sample. ``strength=0`` returns an unchanged copy.
    """
    x = np.array(images, dtype=np.float32, copy=True)
    if strength == 0:
        return x
    rng = np.random.default_rng(seed)
    k, c, h, w = x.shape
    angle = np.deg2rad(rng.uniform(-15, 15) * strength)
    scale = 1 + rng.uniform(-0.1, 0.1) * strength
    brightness = rng.uniform(-0.1, 0.1) * strength
    contrast = 1 + rng.uniform(-0.1, 0.1) * strength
    blur = rng.uniform(0, 0.5) * strength
    noise = rng.uniform(0, 0.05, c) * strength

    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - rot @ centre
    flat = x.reshape(k * c, h, w)
    for i in range(flat.shape[0]):
        flat[i] = ndimage.affine_transform(flat[i], rot, offset=offset, order=1, mode="nearest")
        if blur > 1e-3:
            flat[i] = ndimage.gaussian_filter(flat[i], blur, mode="nearest")
    x = flat.reshape(k, c, h, w)
    x = contrast * x + brightness
    x += (rng.standard_normal(x.shape) * noise[None, :, None, None]).astype(np.float32)
    if missing is not None:
        x[np.asarray(missing, dtype=bool)] = 0.0
    return x.astype(np.float32)
