#!/usr/bin/env python3
"""Regenerates the bundled two-region fixture (deterministic).

A 48x48 RGB image with a sharp-edged red foreground (disk + bar) on a blue
background plus mild seeded pixel noise, and the matching uint8 label map.
"""

import numpy as np
from PIL import Image

H = W = 48
BG = np.array([38, 51, 179], dtype=np.float64)
FG = np.array([217, 77, 51], dtype=np.float64)
NOISE = 8.0
SEED = 1234


def make_labels():
    yy, xx = np.mgrid[0:H, 0:W]
    disk = (yy - 19) ** 2 + (xx - 15) ** 2 <= 9 ** 2
    bar = (yy >= 28) & (yy <= 38) & (xx >= 8) & (xx <= 40)
    return (disk | bar).astype(np.uint8)


def main():
    labels = make_labels()
    rng = np.random.default_rng(SEED)
    img = np.where(labels[..., None] == 1, FG, BG)
    img = img + rng.uniform(-NOISE, NOISE, size=img.shape)
    img = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    Image.fromarray(img, mode="RGB").save("two_region.png")
    np.save("two_region_labels.npy", labels)
    print(f"two_region.png {img.shape}, labels fg fraction {labels.mean():.4f}")


if __name__ == "__main__":
    main()
