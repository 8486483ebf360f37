"""Binary PPM export of images, segmentations and component grids."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metrics import predicted_labels

PALETTE = np.array([
    (31, 119, 180), (255, 127, 14), (44, 160, 44), (214, 39, 40),
    (148, 103, 189), (140, 86, 75), (227, 119, 194), (127, 127, 127),
    (188, 189, 34), (23, 190, 207), (255, 255, 153), (0, 0, 0),
], dtype=np.uint8)
GUTTER = 2


def to_bytes(image) -> np.ndarray:
    """(H, W, 3) float in [0, 1] or uint8 -> uint8."""
    arr = np.asarray(getattr(image, "data", image))
    if arr.dtype == np.uint8:
        return arr
    if arr.size and (np.nanmin(arr) < 0.0 or np.nanmax(arr) > 1.0) or np.isnan(arr).any():
        raise ValueError("image values must lie in [0, 1]")
    return np.round(arr * 255.0).astype(np.uint8)


def encode_ppm(image) -> bytes:
    arr = to_bytes(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"PPM export needs an (H, W, 3) image, got {arr.shape}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def write_ppm(image, path) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file with maxval 255 into an (H, W, 3) uint8 array."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        tokens.append(raw[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P6" or maxval != 255:
        raise ValueError(f"{path}: only binary P6 with maxval 255 is supported")
    body = raw[pos + 1:pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def render_labels(labels) -> np.ndarray:
    """Colour an (H, W) integer label map with the fixed 12-colour palette."""
    labels = np.asarray(labels)
    return PALETTE[labels % len(PALETTE)]


def render_segmentation(masks) -> np.ndarray:
    """Argmax of (K, H, W) masks rendered as palette colours."""
    return render_labels(predicted_labels(masks))


def tile_images(images) -> np.ndarray:
    """Concatenate equal-sized images left to right with white gutters."""
    tiles = [to_bytes(im) for im in images]
    if not tiles:
        raise ValueError("tile_images: nothing to tile")
    h, w, c = tiles[0].shape
    k = len(tiles)
    out = np.full((h, k * w + (k - 1) * GUTTER, c), 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        if tile.shape != (h, w, c):
            raise ValueError(f"tile {i} has shape {tile.shape}, expected {(h, w, c)}")
        x0 = i * (w + GUTTER)
        out[:, x0:x0 + w] = tile
    return out


def component_tiles(components) -> list:
    """Per-slot images pi_k * mu_k for one scene's components."""
    means = np.asarray(components.means.data)
    pi = np.asarray(components.masks_pi.data)
    return [np.clip(means[k] * pi[k][..., None], 0.0, 1.0) for k in range(means.shape[0])]


def export_image(obj, path) -> None:
    """Write an RGB image, a label map, or a mask / component set as its segmentation."""
    is_masks = hasattr(obj, "mask_logits") or hasattr(obj, "masks")
    if hasattr(obj, "mask_logits"):
        obj = obj.masks_pi
    arr = np.asarray(getattr(getattr(obj, "masks", obj), "data", getattr(obj, "masks", obj)))
    if arr.ndim == 2:
        write_ppm(render_labels(arr), path)
    elif is_masks or arr.shape[-1] != 3:
        write_ppm(render_segmentation(arr), path)
    else:
        write_ppm(arr, path)
