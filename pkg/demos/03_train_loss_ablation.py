"""Train the grid regressor under two supervision choices and compare.

A small run (400 training grids, 10 epochs) so it finishes in a couple of
minutes. Latent supervision gives much lower rotation error than 2D joint
supervision alone, while 2D keypoint accuracy stays similar.

Run: python3 demos/03_train_loss_ablation.py
"""
import time

from partfit.body_model import generate_desk_model
from partfit.camera import default_camera
from partfit.regressor import RegressorNet, TrainConfig, train
from partfit.synth import build_dataset

model = generate_desk_model(0)
cam = default_camera()
tr = build_dataset(model, cam, 400, seed=1, parts=12, difficulty=(0.0, 1.0))
va = build_dataset(model, cam, 150, seed=2, parts=12, difficulty=(0.0, 1.0))
print(f'train {len(tr)} / val {len(va)} grids of {tr.grid_size}x{tr.grid_size}, {tr.parts} parts')

net0 = RegressorNet.create(len(tr.examples[0].grid.one_hot()), seed=0)
for losses in (('latent',), ('joints2d',), ('latent', 'joints3d', 'joints2d')):
    cfg = TrainConfig(epochs=10, losses=losses, seed=0)
    t0 = time.time()
    _, log = train(net0, model, cam, tr.examples, cfg, val=va.examples)
    v = log[-1]   # last row is the validation split
    print(f'{"+".join(losses):<26} e_joints {v["e_joints_mm"]:6.1f} mm  '
          f'e_quat {v["e_quat_rad"]:.3f} rad  PCKh {v["pckh_pct"]:5.1f} %  ({time.time() - t0:.0f} s)')
