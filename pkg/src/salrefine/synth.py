"""Deterministic synthetic data: counted-blob images and object scenes."""

from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter

from .imagery import atomic_write_bytes


def blob_image(count, size=64, radius=None, rng=None):
    """``count`` non-overlapping bright discs on a black background.

    Disc radii default to 3/32..1/8 of ``size``.  Returns ``(image, mask)``.
    """
    rng = np.random.default_rng(rng)
    if radius is None:
        radius = (size * 3 / 32, size / 8)
    image = np.zeros((size, size, 3))
    mask = np.zeros((size, size), dtype=bool)
    yy, xx = np.mgrid[0:size, 0:size]
    placed = []
    attempts = 0
    while len(placed) < count:
        attempts += 1
        if attempts > 10_000:
            raise RuntimeError(f"cannot place {count} blobs in a {size}x{size} image")
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
        if any(np.hypot(cy - py, cx - px) < r + pr + 4 for py, px, pr in placed):
            continue
        placed.append((cy, cx, r))
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        image[disc] = rng.uniform(0.6, 1.0, size=3)
        mask |= disc
    return image, mask


def blob_dataset(n, counts=(0, 1, 2), size=64, seed=0):
    """``n`` blob images cycling through ``counts``; returns images, labels, masks."""
    rng = np.random.default_rng(seed)
    images, labels, masks = [], [], []
    for i in range(n):
        k = counts[i % len(counts)]
        image, mask = blob_image(k, size, rng=rng)
        images.append(image)
        labels.append(k)
        masks.append(mask)
    return images, np.array(labels), masks


def write_blob_dataset(directory, n, counts=(0, 1, 2), size=64, seed=0):
    """Write ``NNNN_count{k}.png`` images plus ``gt/NNNN_count{k}.png`` masks."""
    from PIL import Image
    import io

    directory = Path(directory)
    (directory / "gt").mkdir(parents=True, exist_ok=True)
    images, labels, masks = blob_dataset(n, counts, size, seed)
    for i, (image, label, mask) in enumerate(zip(images, labels, masks)):
        name = f"{i:04d}_count{label}.png"
        for arr, target in ((np.floor(image * 255 + 0.5).astype(np.uint8), directory / name),
                            (mask.astype(np.uint8) * 255, directory / "gt" / name)):
            buf = io.BytesIO()
            Image.fromarray(arr).save(buf, format="PNG")
            atomic_write_bytes(target, buf.getvalue())
    return sorted(directory.glob("*_count*.png"))


def object_scene(size=128, rng=None):
    """A yellow square or disc on a blue background.

    The two colors are roughly complementary, so their CIELAB features sit
    far apart under the unit-bandwidth kernel used for refinement.  Returns ``(image, gt, coarse)`` where ``coarse`` is the ground truth
    box-blurred with a window half the object's side length, a stand-in for
    a low-resolution activation map.
    """
    rng = np.random.default_rng(rng)
    side = int(rng.integers(size // 4, size // 2))
    y0, x0 = rng.integers(4, size - side - 4, size=2)
    gt = np.zeros((size, size), dtype=bool)
    if rng.random() < 0.5:
        gt[y0:y0 + side, x0:x0 + side] = True
    else:
        yy, xx = np.mgrid[0:size, 0:size]
        r = side / 2
        gt = (yy - (y0 + r)) ** 2 + (xx - (x0 + r)) ** 2 <= r * r
    fg = np.array([rng.uniform(0.85, 1.0), rng.uniform(0.8, 1.0), rng.uniform(0.0, 0.2)])
    bg = np.array([rng.uniform(0.0, 0.2), rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)])
    image = np.where(gt[:, :, None], fg, bg)
    blur = max(3, side // 2)
    coarse = np.clip(uniform_filter(gt.astype(np.float64), blur, mode="constant"), 0.0, 1.0)
    return image, gt, coarse
