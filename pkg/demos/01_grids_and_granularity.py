"""Pose the desk body model, rasterize it to part grids, and coarsen the labels.

Run: python3 demos/01_grids_and_granularity.py
"""
import numpy as np

from partfit.body_model import generate_desk_model, skin
from partfit.camera import default_camera, project
from partfit.synth import (GRANULARITIES, mirror_grid, rasterize, relabel, sample_pose_shape,
                           segmentation_f1)

GLYPHS = ' 123456789abcdefghijklmno'


def show(grid):
    for row in grid.labels:
        print('  ' + ''.join(GLYPHS[v] for v in row))


model = generate_desk_model(0)
cam = default_camera()
print(f'model: {model.n_vertices} vertices, hash {model.hash[:12]}')

pose, betas = sample_pose_shape(seed=3, difficulty=0.6)
verts, joints = skin(model, pose, betas)
uv = project(cam, joints)
print(f'height of posed joints on image: {np.ptp(uv[:, 1]):.1f} px')

full = rasterize(model, cam, pose, betas, grid_size=32, parts=24)
print('\n24-part grid (label k printed as the k-th glyph):')
show(full)

# coarser labellings merge neighbouring parts
for p in GRANULARITIES[:-1]:
    g = relabel(full, p)
    print(f'{p:>2} parts: {len(np.unique(g.labels)) - 1} labels present, '
          f'{np.count_nonzero(g.labels)} foreground cells')

print('\n6-part grid:')
show(relabel(full, 6))

# flipping the image and swapping left/right labels matches the mirrored pose
m = mirror_grid(full)
print(f'\nmirror of mirror is identity: {np.array_equal(mirror_grid(m).labels, full.labels)}')
print(f'F1(grid, mirrored grid) = {segmentation_f1(full, m):.3f} (pose is not symmetric)')
