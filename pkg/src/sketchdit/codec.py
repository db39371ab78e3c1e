"""Exactly invertible video <-> latent codec.

Stands in for a learned video autoencoder with the same compression geometry:
8x8 space-to-depth within each frame plus stacking of 4-frame temporal groups,
so a [T,H,W,3] clip with T = 4k+1 becomes a [T', H/8, W/8, 768] latent with
T' = 1 + (T-1)/4. Frame 0 forms its own causal group (replicated four times on
encode, slot 0 read back on decode); every later group covers pixel frames
[4g-3 .. 4g]. Everything here is a reshape, so decode(encode(x)) == x bitwise.

Arrays are [T, H, W(, C)] = [frame, row, col(, rgb)]; coordinates elsewhere in
the package use x = column, y = row.
"""

from __future__ import annotations

import numpy as np

SPATIAL = 8
TEMPORAL = 4
LATENT_CHANNELS = 3 * SPATIAL * SPATIAL * TEMPORAL  # 768


def latent_frames(t: int) -> int:
    """Number of latent frames for a clip of T = 4k+1 pixel frames."""
    if t < 1 or (t - 1) % TEMPORAL != 0:
        raise ValueError(f"frame count must be 4k+1, got {t}")
    return 1 + (t - 1) // TEMPORAL


def latent_group(t: int) -> int:
    """Latent frame index holding pixel frame t (kappa in the token grid)."""
    if t < 0:
        raise ValueError(f"negative frame index {t}")
    return 0 if t == 0 else (t + TEMPORAL - 1) // TEMPORAL


def group_pixel_frames(g: int, t_total: int) -> list[int]:
    """Pixel frames covered by latent group g of a T-frame clip."""
    if g == 0:
        return [0]
    frames = [4 * g - 3 + i for i in range(TEMPORAL)]
    if frames[-1] >= t_total:
        raise ValueError(f"group {g} out of range for T={t_total}")
    return frames


def _check_clip_shape(shape: tuple[int, ...], channels: int | None) -> None:
    want = 4 if channels else 3
    if len(shape) != want:
        raise ValueError(f"expected rank-{want} array, got shape {shape}")
    t, h, w = shape[:3]
    if (t - 1) % TEMPORAL != 0 or t < 1:
        raise ValueError(f"frame count must be 4k+1, got {t}")
    if h % SPATIAL or w % SPATIAL:
        raise ValueError(f"H and W must be multiples of {SPATIAL}, got {h}x{w}")
    if channels and shape[3] != channels:
        raise ValueError(f"expected {channels} channels, got {shape[3]}")


def _grouped(clip: np.ndarray) -> np.ndarray:
    """[T,H,W,C] -> [T',4,H,W,C] with frame 0 replicated into group 0."""
    t = clip.shape[0]
    tp = latent_frames(t)
    out = np.empty((tp, TEMPORAL) + clip.shape[1:], dtype=clip.dtype)
    out[0] = clip[0]
    if tp > 1:
        out[1:] = clip[1:].reshape((tp - 1, TEMPORAL) + clip.shape[1:])
    return out


def encode_video(clip: np.ndarray) -> np.ndarray:
    """[T,H,W,3] in [0,1] -> [T',h,w,768] latent. Pure reshape, lossless.

    Channel packing order within each latent cell is (group slot, row offset,
    col offset, rgb); decode_video depends on this exact layout.
    """
    _check_clip_shape(clip.shape, 3)
    t, h, w, _ = clip.shape
    hp, wp = h // SPATIAL, w // SPATIAL
    g = _grouped(clip)  # [T',4,H,W,3]
    g = g.reshape(g.shape[0], TEMPORAL, hp, SPATIAL, wp, SPATIAL, 3)
    g = g.transpose(0, 2, 4, 1, 3, 5, 6)  # [T',h,w,4,8,8,3]
    return np.ascontiguousarray(g.reshape(g.shape[0], hp, wp, LATENT_CHANNELS))


def decode_video(latent: np.ndarray) -> np.ndarray:
    """Exact inverse of encode_video. Frame 0 comes from slot 0 of group 0."""
    if latent.ndim != 4 or latent.shape[3] != LATENT_CHANNELS:
        raise ValueError(f"malformed latent shape {latent.shape}")
    tp, hp, wp, _ = latent.shape
    t = 1 + (tp - 1) * TEMPORAL
    g = latent.reshape(tp, hp, wp, TEMPORAL, SPATIAL, SPATIAL, 3)
    g = g.transpose(0, 3, 1, 4, 2, 5, 6)  # [T',4,h,8,w,8,3]
    g = g.reshape(tp, TEMPORAL, hp * SPATIAL, wp * SPATIAL, 3)
    out = np.empty((t,) + g.shape[2:], dtype=latent.dtype)
    out[0] = g[0, 0]
    if tp > 1:
        out[1:] = g[1:].reshape((tp - 1) * TEMPORAL, *g.shape[2:])
    return np.ascontiguousarray(out)


def encode_mask(pixel_masks: np.ndarray) -> np.ndarray:
    """Binary [T,H,W] -> binary [T',h,w] by OR over each 8x8 cell and 4-frame group.

    Conservative by construction: a latent cell is marked the moment any pixel
    it covers is marked, so complements of latent masks only ever cover pixels
    that are themselves unmarked.
    """
    _check_clip_shape(pixel_masks.shape, None)
    m = pixel_masks.astype(bool)
    t, h, w = m.shape
    hp, wp = h // SPATIAL, w // SPATIAL
    g = _grouped(m)  # [T',4,H,W]
    g = g.reshape(g.shape[0], TEMPORAL, hp, SPATIAL, wp, SPATIAL)
    return np.ascontiguousarray(g.any(axis=(1, 3, 5)).astype(np.uint8))
