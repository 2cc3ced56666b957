"""Compare the hand-written gradients with central differences.

The combined loss is differentiated through Rodrigues, forward kinematics,
skinning and the pinhole projection. Losses are in mm^2 and px^2, so the
step size is chosen with float64 rounding in mind.

Run: python3 demos/06_gradient_check.py
"""
import numpy as np

from partfit.body_model import as_rotations, generate_desk_model
from partfit.camera import default_camera
from partfit.losses import AnnotationMask, LossWeights, Targets, grad_check, pose_loss
from partfit.synth import annotate, sample_pose_shape

model = generate_desk_model(0, 256)
cam = default_camera()
rng = np.random.default_rng(0)

for k, (mask, h) in enumerate(((AnnotationMask(True, False, False), 1e-6),
                               (AnnotationMask(False, True, False), 1e-4),
                               (AnnotationMask(False, False, True), 1e-5),
                               (AnnotationMask(True, True, True), 1e-5))):
    pose, betas = sample_pose_shape(k, 0.8)
    _, j, uv = annotate(model, cam, pose, betas)
    t = Targets(as_rotations(pose.reshape(24, 3))[None], betas[None], j[None], uv[None])
    m = AnnotationMask(*(np.atleast_1d(f) for f in (mask.has_latent, mask.has_3d, mask.has_2d)))
    x0 = np.r_[pose + rng.normal(scale=0.05, size=72), betas + rng.normal(scale=0.05, size=10)]

    def fn(x):
        lv = pose_loss(model, cam, x[None, :72], x[None, 72:], t, m, LossWeights(1.0, 1e-4, 1e-3))
        return lv.total, np.r_[lv.grads['pose'].ravel(), lv.grads['betas'].ravel()]

    terms = [n for n, on in zip(('latent', '3D', '2D'), (mask.has_latent, mask.has_3d, mask.has_2d)) if on]
    print(f'{"+".join(terms):<14} h={h:g}  max rel err {grad_check(fn, x0, h):.2e}')
