"""Synthetic scenes, the anchor grid, and how ground truth gets matched.

Run with ``python3 demos/02_scenes_and_anchors.py``.
"""
# %%
import numpy as np

from mdnal.detector import NetworkConfig, anchors_for, encode_offsets, match_anchors
from mdnal.scenes import DatasetSpec, render_scene

spec = DatasetSpec(n_scenes=10, box_jitter_sd=1.0, seed=3)
scene = render_scene(spec, 0)

# %% [markdown]
# A scene is a 64x64 grayscale image with a handful of shapes. The labels
# carry annotation jitter, and the clean boxes are kept in ``meta``.

# %%
shades = " .:-=+*#%@"
img = scene.image[::2, ::2, 0]
for row in img:
    print("".join(shades[min(int(v * len(shades)), len(shades) - 1)] for v in row))
for (c, box), m in zip(scene.objects, scene.meta):
    print(f"class {c}  label {np.round(box.as_array(), 1)}  clean {np.round(m.true_box.as_array(), 1)}")

# %% [markdown]
# The default network has an 8x8 feature map with three square anchors per cell.

# %%
net = NetworkConfig()
anchors = anchors_for(net)
print(f"F={net.F}  D={net.D}  anchors={len(anchors.boxes)}")

# %% [markdown]
# Anchors with IoU above 0.5 become positives. Each ground-truth box also
# claims its single best anchor, so no object goes unmatched.

# %%
m = match_anchors(anchors, scene.classes, scene.boxes)
print("positives per object:", np.bincount(m.assigned[m.positive], minlength=len(scene.objects)))
a = np.flatnonzero(m.positive)[0]
print("offsets for one positive anchor:", np.round(encode_offsets(scene.boxes[m.assigned[a]], anchors.boxes[a]), 3))
