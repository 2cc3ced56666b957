"""Supervision losses with exact gradients.

Every loss works on a batch (leading dimensions) and returns per-example
values together with the gradient of each example's value w.r.t. that
example's inputs. Units are model units: mm for 3D, pixels for 2D.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .body_model import as_rotations, posed_joints, posed_joints_vjp
from .camera import project, project_vjp
from .kinematics import rodrigues_vjp


class EmptyMaskError(ValueError):
    pass


@dataclass
class LossValue:
    value: np.ndarray               # per-example loss, shape = batch shape
    grads: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)

    @property
    def total(self):
        return float(np.sum(self.value))


@dataclass(frozen=True)
class AnnotationMask:
    """Which supervision an example carries. Fields may be bools or bool arrays."""

    has_latent: object = True
    has_3d: object = True
    has_2d: object = True

    def as_arrays(self, batch_shape=()):
        return tuple(np.broadcast_to(np.asarray(f, dtype=bool), batch_shape)
                     for f in (self.has_latent, self.has_3d, self.has_2d))


@dataclass(frozen=True)
class LossWeights:
    latent: float = 1.0
    joints3d: float = 1.0
    joints2d: float = 1.0


@dataclass
class Targets:
    rotations: np.ndarray = None    # (..., 24, 3, 3)
    betas: np.ndarray = None        # (..., 10)
    joints3d: np.ndarray = None     # (..., 24, 3) mm
    joints2d: np.ndarray = None     # (..., 24, 2) px


def loss_latent(pred_rotations, pred_betas, gt_rotations, gt_betas):
    """L1 on all rotation-matrix entries plus L1 on shape coefficients."""
    dR = np.asarray(pred_rotations) - gt_rotations
    db = np.asarray(pred_betas) - gt_betas
    value = np.abs(dR).sum(axis=(-3, -2, -1)) + np.abs(db).sum(axis=-1)
    return LossValue(value, {'rotations': np.sign(dR), 'betas': np.sign(db)})


def loss_3d(pred_joints, gt_joints):
    """Sum over joints of squared Euclidean distance (mm^2)."""
    d = np.asarray(pred_joints) - gt_joints
    return LossValue(np.sum(d * d, axis=(-2, -1)), {'joints3d': 2 * d})


def loss_2d(pred_2d, gt_2d):
    """Sum over joints of squared pixel distance."""
    d = np.asarray(pred_2d) - gt_2d
    return LossValue(np.sum(d * d, axis=(-2, -1)), {'joints2d': 2 * d})


def loss_combined(pred_rotations, pred_betas, pred_joints, pred_2d, targets,
                  mask, weights=LossWeights()):
    """Weighted sum of the enabled terms; disabled terms give zero value and gradient."""
    batch = np.shape(pred_betas)[:-1]
    lat, j3, j2 = mask.as_arrays(batch)
    if np.any(~(lat | j3 | j2)):
        raise EmptyMaskError('an example has no enabled loss term')
    value = np.zeros(batch)
    grads = {
        'rotations': np.zeros(np.shape(pred_rotations)),
        'betas': np.zeros(np.shape(pred_betas)),
        'joints3d': np.zeros(np.shape(pred_joints)),
        'joints2d': np.zeros(np.shape(pred_2d)) if pred_2d is not None else None,
    }
    terms = {}

    def add(name, on, weight, lv):
        w = weight * on
        terms[name] = w * lv.value
        value[...] += terms[name]
        for key, g in lv.grads.items():
            grads[key] += w.reshape(w.shape + (1,) * (g.ndim - w.ndim)) * g

    if np.any(lat):
        _require(targets.rotations, targets.betas, what='latent')
        add('latent', lat, weights.latent,
            loss_latent(pred_rotations, pred_betas, targets.rotations, targets.betas))
    if np.any(j3):
        _require(targets.joints3d, what='3D joint')
        add('joints3d', j3, weights.joints3d, loss_3d(pred_joints, targets.joints3d))
    if np.any(j2):
        _require(targets.joints2d, pred_2d, what='2D joint')
        add('joints2d', j2, weights.joints2d, loss_2d(pred_2d, targets.joints2d))
    return LossValue(value, grads, terms)


def _require(*arrays, what):
    if any(a is None for a in arrays):
        raise ValueError(f'{what} supervision enabled but targets are missing')


def model_loss(model, cam, rotations, betas, targets, mask, weights=LossWeights()):
    """Combined loss evaluated through the body model and projection.

    Gradients are returned w.r.t. ``rotations`` (..., 24, 3, 3) and ``betas``.
    """
    joints = posed_joints(model, rotations, betas)
    batch = np.shape(betas)[:-1]
    need_2d = np.any(mask.as_arrays(batch)[2])
    joints2d = project(cam, joints) if need_2d else None
    lv = loss_combined(rotations, betas, joints, joints2d, targets, mask, weights)
    g_joints = lv.grads['joints3d']
    if need_2d:
        g_joints = g_joints + project_vjp(cam, joints, lv.grads['joints2d'])
    gR, gb = posed_joints_vjp(model, rotations, betas, g_joints)
    grads = {'rotations': gR + lv.grads['rotations'], 'betas': gb + lv.grads['betas']}
    out = LossValue(lv.value, grads, lv.terms)
    out.joints, out.joints2d = joints, joints2d
    return out


def pose_loss(model, cam, pose, betas, targets, mask, weights=LossWeights()):
    """Combined loss as a function of axis-angle pose (..., 72) and shape."""
    pose = np.asarray(pose, dtype=float)
    aa = pose.reshape(*pose.shape[:-1], 24, 3)
    lv = model_loss(model, cam, as_rotations(aa), betas, targets, mask, weights)
    g_pose = rodrigues_vjp(aa, lv.grads['rotations']).reshape(pose.shape)
    lv.grads = {'pose': g_pose, 'betas': lv.grads['betas']}
    return lv


def grad_check(fn, x, h=1e-6):
    """Max relative error between fn's analytic gradient and central differences.

    ``fn(x)`` returns ``(value, gradient)`` for a flat parameter vector.
    The error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError('step h must lie in [1e-7, 1e-3]')
    x = np.array(x, dtype=float)
    _, analytic = fn(x)
    analytic = np.asarray(analytic, dtype=float).ravel()
    worst = 0.0
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        numeric = (fn(xp)[0] - fn(xm)[0]) / (2 * h)
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
