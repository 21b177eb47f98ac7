r"""
Synthetic visuo-tactile images
==============================

Render one scene under the three modality toggles and save a contact sheet.
The fused image is the visual layer with the marker layer composited on top.
"""
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from sarl import synthdata as sd

out = Path(__file__).with_name("out")
out.mkdir(exist_ok=True)

rng = np.random.default_rng(3)
rows = []
for task in ("shape", "texture", "edge_pose"):
    spec = sd.sample_spec(task, rng)
    views = [np.round(sd.modality_toggle(spec, m).pixels * 255).astype(np.uint8) for m in sd.MODES]
    rows.append(np.concatenate(views, axis=1))
    print(task, sd.labels_of(spec))

sheet = np.concatenate(rows, axis=0)
Image.fromarray(sheet).save(out / "modalities.png")
print("columns:", ", ".join(sd.MODES), "->", out / "modalities.png")

# %%
# Depth pushes markers away from the contact centre. Their mean displacement
# grows with press depth:
for depth in (0.0, 1.0, 2.0, 3.0):
    spec = sd.sample_spec("edge_pose", np.random.default_rng(0))
    spec = replace(spec, press_depth=depth)
    shift = np.linalg.norm(sd.marker_positions(spec) - sd.reference_markers(spec.marker_grid), axis=1)
    print(f"depth {depth:.1f} mm  mean marker shift {shift.mean():.2f} px")
