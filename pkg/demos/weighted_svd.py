"""Closed-form rigid alignment from weighted correspondences.

Down-weighting the outliers is what separates a usable pose from a bad one.
"""
import numpy as np

from mireg.geom import RigidTransform, random_rotation
from mireg.matching import CorrespondenceSet
from mireg.metrics import rotation_error, translation_error
from mireg.pose import solve_weighted_svd

rng = np.random.default_rng(0)
src = rng.uniform(-1, 1, (200, 3))
truth = RigidTransform(random_rotation(rng), np.array([0.5, -0.2, 1.0]))
tgt = truth.apply(src) + rng.normal(scale=0.002, size=src.shape)
tgt[:40] = rng.uniform(-2, 2, (40, 3))  # 20% garbage matches

pairs = CorrespondenceSet(np.stack([np.arange(200)] * 2, 1), np.ones(200))
for label, w in [("uniform weights", np.ones(200)), ("outliers weighted 1e-3", np.r_[np.full(40, 1e-3), np.ones(160)])]:
    T = solve_weighted_svd(pairs, src, tgt, w)
    print(f"{label:>24}: RE {rotation_error(truth.rotation, T.rotation):7.3f} deg, "
          f"TE {translation_error(truth.translation, T.translation):.4f} m")
