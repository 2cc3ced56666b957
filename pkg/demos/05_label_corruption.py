"""Boundary-like label noise and how much of the segmentation it destroys.

Run: python3 demos/05_label_corruption.py
"""
import numpy as np

from partfit.body_model import generate_desk_model
from partfit.camera import default_camera
from partfit.synth import corrupt, rasterize, relabel, sample_pose_shape

model = generate_desk_model(0)
cam = default_camera()
grids = [relabel(rasterize(model, cam, *sample_pose_shape(s, 0.7), 32, 24), 12) for s in range(20)]

print(f'{"rate":>6} {"mean F1":>9} {"min F1":>8}')
for rate in (0.0, 0.05, 0.1, 0.2, 0.4, 0.8):
    f1 = np.array([corrupt(g, rate, seed=100 + i)[1] for i, g in enumerate(grids)])
    print(f'{rate:6.2f} {f1.mean():9.3f} {f1.min():8.3f}')

noisy, f1 = corrupt(grids[0], 0.2, seed=7)
changed = np.count_nonzero(noisy.labels != grids[0].labels)
print(f'\none grid at rate 0.2: {changed} of {np.count_nonzero(grids[0].labels)} '
      f'foreground cells changed, F1 {f1:.3f}, provenance {noisy.provenance!r}')
