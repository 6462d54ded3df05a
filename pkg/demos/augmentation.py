"""
Random affine augmentation
==========================

Rotation, translation and scale about the image centre, bilinear sampling,
pixels outside the source filled with -1.
"""

import numpy as np

from oodbatch.augment import AffineParams, AugmentConfig, apply_affine, augment_image, sample_affine

# a bright square on a grey background; blank output pixels are fill
img = np.full((24, 24), 100, dtype=np.uint8)
img[6:12, 6:12] = 255


def show(a):
    for row in a:
        print("".join("#" if v > 0.5 else ("." if v > -0.5 else " ") for v in row))
    print()


# fixed transforms: 45 degree rotation, then a shift right by 20% of the side
show(apply_affine(img, AffineParams(rotation=45), 24))
show(apply_affine(img, AffineParams(translate_x=0.2), 24))

# random draws from the default recipe, resized to 16 px
cfg = AugmentConfig(target_size=16)
rng = np.random.default_rng(0)
for _ in range(3):
    p = sample_affine(cfg, rng)
    print(f"rotation {p.rotation:+6.1f} deg  shift ({p.translate_x:+.2f}, {p.translate_y:+.2f})  scale {p.scale:.2f}")
print(augment_image(img, cfg, np.random.default_rng(1)).shape)
