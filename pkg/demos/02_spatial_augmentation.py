"""
Spatial-invariant augmentation
==============================

Image-level augmentation (ISA) jitters a ground-truth box within a range
proportional to its size. Feature-level augmentation (FSA) applies the same
jitter to the RoIAlign window on the student's feature map, and the teacher
sees the matching crop of the raw image.
"""

import numpy as np

from kdsearch.augment import fsa_shift, isa_crop_range, isa_expand_and_crop, roi_align
from kdsearch.types import FULL_SIZE_AUG, AugConfig, BoundingBox, Rng, iou

# full-size constants: 10 px of a 256 x 128 patch, capped at 40 px
box = BoundingBox(300, 200, 64, 128)
print("full-size range", isa_crop_range(box, FULL_SIZE_AUG))
print("tall box range ", isa_crop_range(BoundingBox(0, 0, 64, 2000), FULL_SIZE_AUG))

# desk scale keeps the same proportion for 32 x 16 patches
cfg = AugConfig()
rng = Rng(0)
small = BoundingBox(40, 30, 16, 40)
crops = [isa_expand_and_crop(small, cfg, rng, (128, 192)) for _ in range(5)]
print("ISA crops", [(round(c.x, 2), round(c.y, 2)) for c in crops])

# the feature-map shift times the stride is the image shift, so both sides agree
p = fsa_shift(small, isa_crop_range(small, cfg), cfg, rng, (128, 192))
print("feature window * stride", p.feature_window() * cfg.stride)
print("teacher image box      ", p.image_box().as_array())
print("IoU with ground truth   %.3f" % iou(small, p.image_box()))

# RoIAlign samples bilinearly at each output cell centre
ys, xs = np.mgrid[0:8, 0:8] + 0.5
ramp = xs[None]  # value = x coordinate
print(roi_align(ramp, np.array([1.0, 1.0, 4.0, 4.0]), 2, 2).data[0])
