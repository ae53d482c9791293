"""Build a cluttered scene with several copies of the robot model and save it as a bundle.

    python3 demos/synthesize_scene.py /tmp/bundle
"""
import sys

import numpy as np

from mireg.cli import make_scene
from mireg.scenegen import save_bundle

out = sys.argv[1] if len(sys.argv) > 1 else "demo_bundle"

# four instances, 0.5% noise relative to the model diagonal, 20% background clutter
model, scene, ann = make_scene(4, seed=3, noise_fraction=0.005, outlier_fraction=0.2)
print(f"model: {len(model)} points, scene: {len(scene)} points")

labels, counts = np.unique(ann.per_point_label, return_counts=True)
for lab, n in zip(labels, counts):
    name = "clutter" if lab < 0 else f"instance {lab}"
    print(f"  {name:>10}: {n} points")

for j, T in enumerate(ann.instance_transforms):
    print(f"instance {j} placed at {np.round(T.translation, 3)}")

save_bundle(out, model, scene, ann)
print(f"bundle written to {out}/")
