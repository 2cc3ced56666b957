import numpy as np
import pytest

from conftest import random_rotations
from partfit.body_model import posed_joints
from partfit.camera import project
from partfit.kinematics import project_to_so3, project_to_so3_vjp, rodrigues
from partfit.losses import (AnnotationMask, EmptyMaskError, LossWeights, Targets, grad_check,
                            loss_2d, loss_3d, loss_combined, loss_latent, model_loss, pose_loss)


def _config(model, cam, rng, scale=0.4):
    pose = rng.normal(size=72) * scale
    beta = rng.normal(size=10)
    R = rodrigues(pose.reshape(24, 3))
    J = posed_joints(model, R, beta)
    return pose, beta, R, J, project(cam, J)


def test_latent_examples():
    R = np.tile(np.eye(3), (24, 1, 1))
    b = np.zeros(10)
    assert loss_latent(R, b, R, b).value == 0
    assert loss_latent(R, b + np.eye(10)[0], R, b).value == 1.0
    R2 = R.copy()
    R2[7] = rodrigues([0, 0, np.pi / 2])
    assert np.isclose(loss_latent(R2, b, R, b).value, 4.0)


def test_3d_and_2d_examples(rng):
    J = rng.normal(size=(24, 3))
    assert loss_3d(J, J).value == 0
    J2 = J.copy()
    J2[3] += [3, 4, 0]
    assert np.isclose(loss_3d(J2, J).value, 25)
    P, Q = rng.normal(size=(24, 3)), rng.normal(size=(24, 3))
    naive = sum((P[k, c] - Q[k, c]) ** 2 for k in range(24) for c in range(3))
    assert abs(loss_3d(P, Q).value - naive) < 1e-10
    u = rng.normal(size=(24, 2))
    assert loss_2d(u, u).value == 0
    u2 = u.copy()
    u2[0] += [3, 4]
    assert np.isclose(loss_2d(u2, u).value, 25)
    v = rng.normal(size=(24, 2))
    naive = sum((u[k, c] - v[k, c]) ** 2 for k in range(24) for c in range(2))
    assert abs(loss_2d(u, v).value - naive) < 1e-10


def test_losses_nonnegative(rng):
    for _ in range(20):
        assert loss_3d(rng.normal(size=(24, 3)), rng.normal(size=(24, 3))).value >= 0
        assert loss_latent(random_rotations(rng, 24), rng.normal(size=10),
                           random_rotations(rng, 24), rng.normal(size=10)).value > 0


def _random_targets(model, cam, rng):
    _, beta, R, J, uv = _config(model, cam, rng)
    return Targets(R, beta, J, uv)


def test_combined_linearity_and_masking(small_model, cam, rng):
    t = _random_targets(small_model, cam, rng)
    _, b, R, J, uv = _config(small_model, cam, rng)
    all_on = loss_combined(R, b, J, uv, t, AnnotationMask(), LossWeights())
    parts = (loss_latent(R, b, t.rotations, t.betas).value + loss_3d(J, t.joints3d).value
             + loss_2d(uv, t.joints2d).value)
    assert np.isclose(all_on.value, parts, rtol=1e-14)
    w = LossWeights(0.5, 2e-3, 7.0)
    recomputed = (0.5 * np.abs(R - t.rotations).sum() + 0.5 * np.abs(b - t.betas).sum()
                  + 2e-3 * ((J - t.joints3d) ** 2).sum() + 7.0 * ((uv - t.joints2d) ** 2).sum())
    assert np.isclose(loss_combined(R, b, J, uv, t, AnnotationMask(), w).value, recomputed,
                      rtol=1e-13)
    only2d = loss_combined(R, b, J, uv, t, AnnotationMask(False, False, True))
    assert np.all(only2d.grads['rotations'] == 0) and np.all(only2d.grads['betas'] == 0)
    assert np.all(only2d.grads['joints3d'] == 0)
    assert np.isclose(only2d.value, loss_2d(uv, t.joints2d).value)


def test_combined_batch_masks(small_model, cam, rng):
    ts = [_random_targets(small_model, cam, rng) for _ in range(3)]
    T = Targets(*(np.stack([getattr(t, f) for t in ts]) for f in
                  ('rotations', 'betas', 'joints3d', 'joints2d')))
    _, b, R, J, uv = _config(small_model, cam, rng)
    B = lambda a: np.broadcast_to(a, (3,) + a.shape)
    mask = AnnotationMask(np.array([True, False, False]), np.array([True, True, False]), True)
    lv = loss_combined(B(R), B(b), B(J), B(uv), T, mask)
    assert np.all(lv.grads['rotations'][1:] == 0)
    assert np.all(lv.grads['joints3d'][2] == 0)
    assert np.isclose(lv.value[2], loss_2d(uv, T.joints2d[2]).value)
    with pytest.raises(EmptyMaskError):
        loss_combined(B(R), B(b), B(J), B(uv), T, AnnotationMask(False, False, np.array([1, 0, 1], bool)))


def test_missing_targets_rejected(small_model, cam, rng):
    _, b, R, J, uv = _config(small_model, cam, rng)
    with pytest.raises(ValueError):
        loss_combined(R, b, J, uv, Targets(joints3d=J), AnnotationMask(True, True, False))


def test_model_loss_gradient_is_weighted_sum(small_model, cam, rng):
    t = _random_targets(small_model, cam, rng)
    _, b, R, _, _ = _config(small_model, cam, rng)
    w = LossWeights(1.0, 1e-4, 1e-3)
    total = model_loss(small_model, cam, R, b, t, AnnotationMask(), w)
    acc_R, acc_b = 0, 0
    for m, s in ((AnnotationMask(True, False, False), 1.0), (AnnotationMask(False, True, False), 1e-4),
                 (AnnotationMask(False, False, True), 1e-3)):
        lv = model_loss(small_model, cam, R, b, t, m, LossWeights(s, s, s))
        acc_R, acc_b = acc_R + lv.grads['rotations'], acc_b + lv.grads['betas']
    assert np.allclose(total.grads['rotations'], acc_R, rtol=1e-12, atol=1e-12)
    assert np.allclose(total.grads['betas'], acc_b, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize('which,h', [('3d', 1e-4), ('2d', 1e-5)])
def test_grad_check_through_skinning(small_model, cam, which, h):
    rng = np.random.default_rng(5)
    mask = AnnotationMask(False, which == '3d', which == '2d')
    worst = 0.0
    for _ in range(20):
        # losses are in mm^2 / px^2 with values up to 1e5, so small h is
        # rounding-limited (error ~ 1/h); h is picked per chain, projection
        # curvature makes the 2D chain prefer the smaller step
        x0 = np.r_[rng.normal(size=72) * 0.4, rng.normal(size=10)]
        R = rodrigues((x0[:72] + 0.05 * rng.normal(size=72)).reshape(24, 3))
        J = posed_joints(small_model, R, x0[72:] + 0.1 * rng.normal(size=10))
        t = Targets(joints3d=J, joints2d=project(cam, J))

        def fn(x):
            lv = pose_loss(small_model, cam, x[:72], x[72:], t, mask)
            return float(lv.value), np.r_[lv.grads['pose'], lv.grads['betas']]
        worst = max(worst, grad_check(fn, x0, h))
    assert worst < 1e-5


def test_grad_check_latent_away_from_ties(small_model, cam):
    rng = np.random.default_rng(6)
    mask = AnnotationMask(True, False, False)
    for _ in range(20):
        t = _random_targets(small_model, cam, rng)
        x0 = np.r_[rng.normal(size=72) * 0.4, rng.normal(size=10)]
        lv = pose_loss(small_model, cam, x0[:72], x0[72:], t, mask)
        R = rodrigues(x0[:72].reshape(24, 3))
        # skip configurations within 1e-3 of a tie
        if min(np.abs(R - t.rotations).min(), np.abs(x0[72:] - t.betas).min()) < 1e-3:
            continue

        def fn(x):
            lv = pose_loss(small_model, cam, x[:72], x[72:], t, mask)
            return float(lv.value), np.r_[lv.grads['pose'], lv.grads['betas']]
        assert grad_check(fn, x0, 1e-7) < 1e-6


def test_svd_layer_into_latent_loss(rng):
    worst = 0.0
    for _ in range(20):
        M = random_rotations(rng, 24) + 0.3 * rng.normal(size=(24, 3, 3))
        s = np.linalg.svd(M, compute_uv=False)
        if np.min(np.abs(np.diff(s, axis=-1))) < 1e-3:
            continue
        gt = random_rotations(rng, 24)

        def fn(x):
            Mx = x.reshape(24, 3, 3)
            R = project_to_so3(Mx)
            lv = loss_latent(R, np.zeros(10), gt, np.zeros(10))
            return float(lv.value), project_to_so3_vjp(Mx, lv.grads['rotations']).ravel()
        worst = max(worst, grad_check(fn, M.ravel(), 1e-7))
    assert worst < 1e-4


def test_2d_loss_blind_to_depth_along_ray(small_model, cam, rng):
    # moving a joint along its camera ray does not change L_2D to first order
    _, b, R, J, uv = _config(small_model, cam, rng)
    t = Targets(joints2d=uv + rng.normal(size=uv.shape))
    lv = loss_2d(project(cam, J), t.joints2d)
    from partfit.camera import project_vjp
    gJ = project_vjp(cam, J, lv.grads['joints2d'])
    ray = J + [0, 0, cam.distance]
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    directional = np.sum(gJ * ray, axis=1)
    assert np.abs(directional).max() < 1e-10 * np.abs(gJ).max()


def test_grad_check_validates_step():
    with pytest.raises(ValueError):
        grad_check(lambda x: (0.0, np.zeros(1)), np.zeros(1), h=1e-2)
