"""SMPL-structured body model: blendshapes, joint regression and skinning.

The model maps 24 per-part rotations and 10 shape coefficients to a posed
vertex set and posed joints:

    shaped = template + shape_basis @ betas + pose_basis @ pose_feature(R)
    rest_joints = joint_regressor @ (template + shape_basis @ betas)
    verts = sum_k W[:, k] * G_k(shaped)

where G_k are the world transforms of the kinematic chain. Every forward
function has a matching ``*_vjp`` that returns exact gradients.

The body frame is camera aligned: +x is image right (the subject's left
when facing the camera), +y is down, +z points away from the camera.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .kinematics import KinematicTree, compose_global_transforms, rodrigues

N_JOINTS = 24
N_BETAS = 10
N_POSE_FEATURES = 9 * (N_JOINTS - 1)
MODEL_VERSION = 1

JOINT_NAMES = (
    'pelvis', 'left_hip', 'right_hip', 'spine1', 'left_knee', 'right_knee',
    'spine2', 'left_ankle', 'right_ankle', 'spine3', 'left_foot', 'right_foot',
    'neck', 'left_collar', 'right_collar', 'head', 'left_shoulder',
    'right_shoulder', 'left_elbow', 'right_elbow', 'left_wrist', 'right_wrist',
    'left_hand', 'right_hand',
)
SMPL_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14,
                16, 17, 18, 19, 20, 21)
MIRROR_JOINTS = np.array([0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13,
                          15, 17, 16, 19, 18, 21, 20, 23, 22])
# x-reflection that maps the body onto its mirror image
REFLECTION = np.diag([-1.0, 1.0, 1.0])

SHAPE_DIRECTIONS = (
    'global_scale', 'leg_length', 'arm_length', 'torso_length', 'girth',
    'torso_girth', 'shoulder_width', 'hip_width', 'head_size', 'limb_girth',
)


class ModelValidationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BodyModel:
    template: np.ndarray          # (V, 3) mm
    shape_basis: np.ndarray       # (V, 3, 10)
    pose_basis: np.ndarray        # (V, 3, 207)
    skinning_weights: np.ndarray  # (V, 24)
    joint_regressor: np.ndarray   # (24, V)
    parents: tuple
    part_labels: np.ndarray       # (V,) in 0..23

    def __post_init__(self):
        self.validate()

    @property
    def n_vertices(self):
        return self.template.shape[0]

    @cached_property
    def tree(self):
        return KinematicTree(tuple(self.parents))

    @cached_property
    def joint_template(self):
        return self.joint_regressor @ self.template

    @cached_property
    def joint_shape_basis(self):
        return np.einsum('kv,vcs->kcs', self.joint_regressor, self.shape_basis)

    @cached_property
    def mirror_vertices(self):
        """Index of the mirror partner of each vertex (nearest reflected vertex)."""
        reflected = self.template @ REFLECTION
        d = np.linalg.norm(self.template[None, :, :] - reflected[:, None, :], axis=-1)
        return np.argmin(d, axis=1)

    def validate(self):
        V = self.template.shape[0]
        K = N_JOINTS
        checks = [
            (self.template.shape == (V, 3), 'template must be (V, 3)'),
            (V >= K, 'need at least 24 vertices'),
            (self.shape_basis.shape == (V, 3, N_BETAS), 'shape_basis must be (V, 3, 10)'),
            (self.pose_basis.shape == (V, 3, N_POSE_FEATURES), 'pose_basis must be (V, 3, 207)'),
            (self.skinning_weights.shape == (V, K), 'skinning_weights must be (V, 24)'),
            (self.joint_regressor.shape == (K, V), 'joint_regressor must be (24, V)'),
            (len(self.parents) == K, 'parents must have 24 entries'),
            (self.part_labels.shape == (V,), 'part_labels must be (V,)'),
        ]
        for ok, msg in checks:
            if not ok:
                raise ModelValidationError(msg)
        for name in ('template', 'shape_basis', 'pose_basis', 'skinning_weights',
                     'joint_regressor'):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ModelValidationError(f'{name} has non-finite entries')
        W = self.skinning_weights
        if np.any(W < 0) or np.max(np.abs(W.sum(1) - 1)) > 1e-9:
            raise ModelValidationError('skinning weight rows must be non-negative and sum to 1')
        if np.max(np.abs(self.joint_regressor.sum(1) - 1)) > 1e-9:
            raise ModelValidationError('joint regressor rows must sum to 1')
        labels = self.part_labels
        if labels.min() < 0 or labels.max() >= K or len(np.unique(labels)) != K:
            raise ModelValidationError('part labels must cover all 24 parts')
        try:
            KinematicTree(tuple(int(p) for p in self.parents))
        except ValueError as e:
            raise ModelValidationError(str(e)) from e

    # serialization -------------------------------------------------------

    def to_dict(self):
        return {
            'version': MODEL_VERSION,
            'units': 'mm',
            'template': self.template.tolist(),
            'shape_basis': self.shape_basis.tolist(),
            'pose_basis': self.pose_basis.tolist(),
            'skinning_weights': self.skinning_weights.tolist(),
            'joint_regressor': self.joint_regressor.tolist(),
            'parents': [int(p) for p in self.parents],
            'part_labels': self.part_labels.tolist(),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), separators=(',', ':'))

    @classmethod
    def from_dict(cls, d):
        if d.get('units') != 'mm':
            raise ModelValidationError("model units must be 'mm'")
        if d.get('version') != MODEL_VERSION:
            raise ModelValidationError(f"unsupported model version {d.get('version')}")
        try:
            return cls(
                template=np.asarray(d['template'], dtype=float),
                shape_basis=np.asarray(d['shape_basis'], dtype=float),
                pose_basis=np.asarray(d['pose_basis'], dtype=float),
                skinning_weights=np.asarray(d['skinning_weights'], dtype=float),
                joint_regressor=np.asarray(d['joint_regressor'], dtype=float),
                parents=tuple(int(p) for p in d['parents']),
                part_labels=np.asarray(d['part_labels'], dtype=int),
            )
        except (KeyError, TypeError) as e:
            raise ModelValidationError(f'malformed model document: {e}') from e

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, 'w') as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(f.read())

    @cached_property
    def hash(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()


# forward model -----------------------------------------------------------

def pose_feature(rotations):
    """(R_k - I) flattened for the 23 non-root parts: (..., 24, 3, 3) -> (..., 207)."""
    rotations = np.asarray(rotations, dtype=float)
    return (rotations[..., 1:, :, :] - np.eye(3)).reshape(*rotations.shape[:-3], N_POSE_FEATURES)


def shaped_tpose(model, betas, feature):
    """Template plus shape and pose blendshape offsets (the unposed mesh)."""
    return (model.template
            + np.einsum('vcs,...s->...vc', model.shape_basis, betas)
            + np.einsum('vcf,...f->...vc', model.pose_basis, feature))


def regress_joints(model, betas):
    """Rest-pose joints; they depend on shape only."""
    return model.joint_template + np.einsum('kcs,...s->...kc', model.joint_shape_basis,
                                            np.asarray(betas, dtype=float))


def as_rotations(pose):
    """Axis-angle pose, (..., 72) or (..., 24, 3), to (..., 24, 3, 3)."""
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-1] == 3 * N_JOINTS:
        pose = pose.reshape(*pose.shape[:-1], N_JOINTS, 3)
    return rodrigues(pose)


def _forward(model, rotations, betas, with_vertices):
    rotations = np.asarray(rotations, dtype=float)
    betas = np.asarray(betas, dtype=float)
    rest = regress_joints(model, betas)
    GR, Gt = compose_global_transforms(model.parents, rotations, rest)
    joints = np.einsum('...kab,...kb->...ka', GR, rest) + Gt
    cache = {'rotations': rotations, 'betas': betas, 'rest': rest, 'GR': GR, 'Gt': Gt}
    verts = None
    if with_vertices:
        shaped = shaped_tpose(model, betas, pose_feature(rotations))
        A = np.einsum('vk,...kab->...vab', model.skinning_weights, GR)
        b = np.einsum('vk,...ka->...va', model.skinning_weights, Gt)
        verts = np.einsum('...vab,...vb->...va', A, shaped) + b
        cache.update(shaped=shaped, A=A)
    return verts, joints, cache


def skin_rotations(model, rotations, betas):
    """Posed vertices and joints from per-part rotation matrices."""
    verts, joints, _ = _forward(model, rotations, betas, True)
    return verts, joints


def skin(model, pose, betas):
    """The full model: axis-angle pose (72) and shape (10) to (vertices, joints)."""
    return skin_rotations(model, as_rotations(pose), betas)


def posed_joints(model, rotations, betas):
    """Posed joints only; skips all per-vertex work."""
    return _forward(model, rotations, betas, False)[1]


def _backward(model, cache, grad_verts, grad_joints):
    R, rest, GR = cache['rotations'], cache['rest'], cache['GR']
    batch = R.shape[:-3]
    gR = np.zeros(batch + (N_JOINTS, 3, 3))
    gbeta = np.zeros(batch + (N_BETAS,))
    gGR = np.zeros_like(GR)
    gGt = np.zeros(batch + (N_JOINTS, 3))
    grest = np.zeros_like(rest)
    W = model.skinning_weights
    if grad_verts is not None:
        shaped = cache['shaped']
        gA = grad_verts[..., :, :, None] * shaped[..., :, None, :]
        gGR += np.einsum('vk,...vab->...kab', W, gA)
        gGt += np.einsum('vk,...va->...ka', W, grad_verts)
        gshaped = np.einsum('...vab,...va->...vb', cache['A'], grad_verts)
        gbeta += np.einsum('vcs,...vc->...s', model.shape_basis, gshaped)
        gfeat = np.einsum('vcf,...vc->...f', model.pose_basis, gshaped)
        gR[..., 1:, :, :] += gfeat.reshape(batch + (N_JOINTS - 1, 3, 3))
    if grad_joints is not None:
        gGR += grad_joints[..., :, :, None] * rest[..., :, None, :]
        gGt += grad_joints
        grest += np.einsum('...kab,...ka->...kb', GR, grad_joints)
    eye = np.eye(3)
    for i in range(N_JOINTS - 1, -1, -1):
        p = model.parents[i]
        Ri, ji = R[..., i, :, :], rest[..., i, :]
        dGt, dGR = gGt[..., i, :], gGR[..., i, :, :]
        if p < 0:
            # G_R = R, G_t = j - R j
            gR[..., i, :, :] += dGR - dGt[..., :, None] * ji[..., None, :]
            grest[..., i, :] += np.einsum('...ba,...b->...a', eye - Ri, dGt)
            continue
        GRp = GR[..., p, :, :]
        local_t = ji - np.einsum('...ab,...b->...a', Ri, ji)
        # G_t = GRp (j - R j) + Gt_p
        gGR[..., p, :, :] += dGt[..., :, None] * local_t[..., None, :]
        gGt[..., p, :] += dGt
        g_local = np.einsum('...ba,...b->...a', GRp, dGt)
        grest[..., i, :] += g_local - np.einsum('...ba,...b->...a', Ri, g_local)
        gR[..., i, :, :] -= g_local[..., :, None] * ji[..., None, :]
        # G_R = GRp R
        gGR[..., p, :, :] += dGR @ np.swapaxes(Ri, -1, -2)
        gR[..., i, :, :] += np.swapaxes(GRp, -1, -2) @ dGR
    gbeta += np.einsum('kcs,...kc->...s', model.joint_shape_basis, grest)
    return gR, gbeta


def skin_rotations_vjp(model, rotations, betas, grad_verts=None, grad_joints=None):
    """Gradients w.r.t. (rotations, betas) of a loss with the given output gradients."""
    _, _, cache = _forward(model, rotations, betas, grad_verts is not None)
    return _backward(model, cache, grad_verts, grad_joints)


def posed_joints_vjp(model, rotations, betas, grad_joints):
    _, _, cache = _forward(model, rotations, betas, False)
    return _backward(model, cache, None, grad_joints)


# mirroring ---------------------------------------------------------------

def mirror_rotations(rotations):
    """Rotations of the reflected body: conjugate by the reflection and swap sides."""
    R = np.asarray(rotations, dtype=float)[..., MIRROR_JOINTS, :, :]
    return REFLECTION @ R @ REFLECTION


def mirror_pose(pose):
    """Axis-angle version of mirror_rotations; (..., 72) or (..., 24, 3)."""
    pose = np.asarray(pose, dtype=float)
    flat = pose.shape[-1] == 3 * N_JOINTS
    aa = pose.reshape(*pose.shape[:-1], N_JOINTS, 3) if flat else pose
    out = aa[..., MIRROR_JOINTS, :] * np.array([1.0, -1.0, -1.0])
    return out.reshape(pose.shape) if flat else out


def mirror_points(points):
    """Reflect (..., K, 3) joint sets across the sagittal plane and swap sides."""
    return np.asarray(points)[..., MIRROR_JOINTS, :] @ REFLECTION


# procedural desk-scale model -----------------------------------------------

# Rest joints in a y-up design frame (converted to y-down below).
_DESIGN_JOINTS = np.array([
    [0, 0, 0], [85, -80, 0], [-85, -80, 0], [0, 110, 10], [100, -480, 0],
    [-100, -480, 0], [0, 240, 15], [105, -880, 15], [-105, -880, 15],
    [0, 300, 10], [110, -940, -90], [-110, -940, -90], [0, 500, 20],
    [75, 420, 15], [-75, 420, 15], [0, 580, 0], [190, 440, 20], [-190, 440, 20],
    [450, 440, 20], [-450, 440, 20], [700, 440, 20], [-700, 440, 20],
    [790, 440, 20], [-790, 440, 20],
], dtype=float)

# Per part: (start, end, radius across, radius depth). 'j<i>' names a joint;
# a 3-vector is a point given as an offset from the part's own joint.
_DESIGN_PARTS = {
    0: ((0, -90, 0), 'j3', 130, 95),
    1: ('j1', 'j4', 75, 70),
    3: ('j3', 'j6', 125, 90),
    4: ('j4', 'j7', 55, 50),
    6: ('j6', 'j9', 135, 95),
    7: ('j7', 'j10', 45, 35),
    9: ('j9', 'j12', 150, 100),
    10: ('j10', (0, -10, -80), 40, 20),
    12: ('j12', 'j15', 50, 50),
    13: ('j13', 'j16', 60, 55),
    15: ('j15', (0, 220, 0), 85, 95),
    16: ('j16', 'j18', 48, 45),
    18: ('j18', 'j20', 38, 35),
    20: ('j20', 'j22', 40, 18),
    22: ('j22', (90, 0, 0), 35, 12),
}
_CENTRAL = (0, 3, 6, 9, 12, 15)
_LEFT = (1, 4, 7, 10, 13, 16, 18, 20, 22)

_LEG_PARTS = (1, 2, 4, 5, 7, 8, 10, 11)
_ARM_PARTS = (16, 17, 18, 19, 20, 21, 22, 23)


def _shape_perturbations():
    """Per direction: (bone scale delta (24), extension delta (24), radius delta (24))."""
    out = []
    z = np.zeros(N_JOINTS)

    def vec(idx, val):
        v = z.copy()
        v[list(idx)] = val
        return v

    allj = range(N_JOINTS)
    out.append((vec(allj, 0.05), vec(allj, 0.05), vec(allj, 0.05)))          # global scale
    out.append((vec((4, 5, 7, 8), 0.06), z, z))                              # leg length
    out.append((vec((18, 19, 20, 21, 22, 23), 0.06), vec((22, 23), 0.06), z))  # arm length
    out.append((vec((3, 6, 9, 12), 0.06), z, z))                             # torso length
    out.append((z, z, vec(allj, 0.08)))                                      # girth
    out.append((z, z, vec((0, 3, 6, 9), 0.1)))                               # torso girth
    out.append((vec((16, 17), 0.1), z, z))                                   # shoulder width
    out.append((vec((1, 2), 0.1), z, z))                                     # hip width
    out.append((vec((15,), 0.1), vec((15,), 0.1), vec((12, 15), 0.1)))      # head size
    out.append((z, z, vec(_LEG_PARTS + _ARM_PARTS, 0.08)))                   # limb girth
    return out


class _Geometry:
    """Capsule-sampled humanoid whose vertices are linear in the size factors."""

    def __init__(self, n_vertices, rng):
        flip = np.array([1.0, -1.0, 1.0])
        self.joints0 = _DESIGN_JOINTS * flip
        parts = dict(_DESIGN_PARTS)
        for k in _LEFT:
            s, e, ra, rb = parts[k]
            parts[MIRROR_JOINTS[k]] = (self._mirror_spec(s), self._mirror_spec(e), ra, rb)
        self.parts = {}
        for k, (s, e, ra, rb) in parts.items():
            self.parts[k] = (self._resolve(k, s, flip), self._resolve(k, e, flip), ra, rb)
        self._init_frames()
        self._sample(n_vertices, rng)

    @staticmethod
    def _mirror_spec(p):
        if isinstance(p, str):
            return f'j{MIRROR_JOINTS[int(p[1:])]}'
        return (-p[0], p[1], p[2])

    @staticmethod
    def _resolve(k, p, flip):
        if isinstance(p, str):
            return ('joint', int(p[1:]))
        return ('offset', np.asarray(p, dtype=float) * flip)

    def joints(self, bone):
        j = np.empty((N_JOINTS, 3))
        for i, p in enumerate(SMPL_PARENTS):
            j[i] = self.joints0[i] if p < 0 else j[p] + bone[i] * (self.joints0[i] - self.joints0[p])
        return j

    def _point(self, k, spec, joints, ext):
        kind, val = spec
        return joints[val] if kind == 'joint' else joints[k] + ext[k] * val

    def _init_frames(self):
        j = self.joints(np.ones(N_JOINTS))
        ones = np.ones(N_JOINTS)
        self.frames = {}
        for k in _CENTRAL + _LEFT:
            s = self._point(k, self.parts[k][0], j, ones)
            e = self._point(k, self.parts[k][1], j, ones)
            d = (e - s) / np.linalg.norm(e - s)
            ref = np.array([1.0, 0, 0]) if abs(d[0]) < 0.7 else np.array([0, 1.0, 0])
            e1 = ref - ref.dot(d) * d
            e1 /= np.linalg.norm(e1)
            self.frames[k] = (e1, np.cross(d, e1))
        for k in _LEFT:
            # right-side frames are reflections, so mirrored rows flip the e1 sign
            e1, e2 = self.frames[k]
            self.frames[MIRROR_JOINTS[k]] = (-(REFLECTION @ e1), REFLECTION @ e2)

    def segment(self, k, joints, ext):
        return (self._point(k, self.parts[k][0], joints, ext),
                self._point(k, self.parts[k][1], joints, ext))

    def _sample(self, n_vertices, rng):
        n_ring = 4 * N_JOINTS
        budget = n_vertices - n_ring
        odd = budget % 2
        budget -= odd
        area = {}
        ones = np.ones(N_JOINTS)
        j = self.joints(ones)
        for k in _CENTRAL + _LEFT:
            s, e = self.segment(k, j, ones)
            _, _, ra, rb = self.parts[k]
            area[k] = np.linalg.norm(e - s) * (ra + rb) * (1 if k in _CENTRAL else 2)
        total = sum(area.values())
        counts = {k: int(budget * a / total) // 2 * 2 for k, a in area.items()}
        order = sorted(area, key=lambda k: -area[k])
        i = 0
        while sum(counts.values()) < budget:
            counts[order[i % len(order)]] += 2
            i += 1
        # rows: (part, t, cos-coefficient, sin-coefficient); vertex =
        # (1-t) start + t end + ca * ra * e1 + cb * rb * e2
        rows = []
        for k in range(N_JOINTS):
            rows.extend([(k, None, 1.0, 0.0), (k, None, -1.0, 0.0),
                         (k, None, 0.0, 1.0), (k, None, 0.0, -1.0)])
        for k in _CENTRAL:
            n = counts[k] // 2
            t = rng.uniform(0, 1, n)
            phi = rng.uniform(-np.pi / 2, np.pi / 2, n)
            for ti, ph in zip(t, phi):
                rows.append((k, ti, np.cos(ph), np.sin(ph)))
                rows.append((k, ti, -np.cos(ph), np.sin(ph)))
        for k in _LEFT:
            t = rng.uniform(0, 1, counts[k] // 2)
            phi = rng.uniform(0, 2 * np.pi, counts[k] // 2)
            for ti, ph in zip(t, phi):
                rows.append((k, ti, np.cos(ph), np.sin(ph)))
                rows.append((MIRROR_JOINTS[k], ti, -np.cos(ph), np.sin(ph)))
        if odd:
            rows.append((9, 0.5, 0.0, -1.0))  # chest front centre
        self.rows = rows

    def vertices(self, bone, ext, radius):
        """Vertex positions; ring rows (t None) sit on the cross-section at the joint."""
        j = self.joints(bone)
        segs = [self.segment(k, j, ext) for k in range(N_JOINTS)]
        out = np.empty((len(self.rows), 3))
        for n, (k, t, ca, cb) in enumerate(self.rows):
            s, e = segs[k]
            e1, e2 = self.frames[k]
            _, _, ra, rb = self.parts[k]
            centre = j[k] if t is None else (1 - t) * s + t * e
            out[n] = centre + radius[k] * (ca * ra * e1 + cb * rb * e2)
        return out


def generate_desk_model(seed=0, n_vertices=400):
    """Deterministic procedural humanoid with the SMPL skeleton and model structure."""
    if n_vertices < 200:
        raise ValueError(f'n_vertices must be >= 200, got {n_vertices}')
    rng = np.random.default_rng(seed)
    geom = _Geometry(n_vertices, rng)
    ones = np.ones(N_JOINTS)
    base = geom.vertices(ones, ones, ones)
    shape_basis = np.stack([
        geom.vertices(ones + db, ones + de, ones + dr) - base
        for db, de, dr in _shape_perturbations()
    ], axis=-1)
    labels = np.array([r[0] for r in geom.rows])
    V = len(labels)

    regressor = np.zeros((N_JOINTS, V))
    for n, (k, t, _, _) in enumerate(geom.rows):
        if t is None:
            regressor[k, n] = 0.25

    mirror = _mirror_index(base)
    weights = _skinning_weights(geom, base, labels, mirror)
    pose_basis = _pose_basis(rng, base, geom.joints(ones), mirror)

    centre = base.mean(axis=0)
    return BodyModel(
        template=base - centre,
        shape_basis=shape_basis,
        pose_basis=pose_basis,
        skinning_weights=weights,
        joint_regressor=regressor,
        parents=SMPL_PARENTS,
        part_labels=labels,
    )


def _mirror_index(verts):
    reflected = verts @ REFLECTION
    d = np.linalg.norm(verts[None, :, :] - reflected[:, None, :], axis=-1)
    idx = np.argmin(d, axis=1)
    if np.max(d[np.arange(len(idx)), idx]) > 1e-6:
        raise RuntimeError('generated template is not mirror symmetric')
    return idx


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / ab.dot(ab), 0, 1)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=-1)


def _skinning_weights(geom, verts, labels, mirror, falloff=25.0):
    """Own part plus the nearest other part, blended by a smooth distance falloff."""
    V = len(verts)
    ones = np.ones(N_JOINTS)
    j = geom.joints(ones)
    dist = np.stack([_segment_distance(verts, *geom.segment(k, j, ones))
                     for k in range(N_JOINTS)], axis=1)
    W = np.zeros((V, N_JOINTS))
    rows = np.arange(V)
    own = dist[rows, labels]
    other_d = dist.copy()
    other_d[rows, labels] = np.inf
    other = np.argmin(other_d, axis=1)
    w_other = 0.5 * np.exp(-np.maximum(0.0, other_d[rows, other] - own) / falloff)
    W[rows, labels] = 1 - w_other
    W[rows, other] += w_other
    # exact left/right symmetry (ties in the nearest-part choice break it)
    W = 0.5 * (W + W[mirror][:, MIRROR_JOINTS])
    return W / W.sum(axis=1, keepdims=True)


def _pose_basis(rng, verts, joints, mirror, max_offset=4.5, reach=80.0):
    """Smooth, local, mirror-symmetric pose correctives.

    Bounded so that any feature with entries in [-1, 1] (every rotation up
    to pi/2) moves a vertex by less than ``max_offset`` mm per axis.
    """
    V = len(verts)
    coef = rng.normal(size=(N_JOINTS - 1, 3, 9))
    d2 = np.sum((verts[:, None, :] - joints[None, 1:, :]) ** 2, axis=-1)
    local = np.exp(-d2 / (2 * reach**2))                      # (V, 23)
    C = local[:, :, None, None] * coef[None]                  # (V, 23, 3, 9)
    s = np.diag(REFLECTION)
    sigma = np.outer(s, s).reshape(9)
    mirrored = np.empty_like(C)
    part_perm = MIRROR_JOINTS[1:] - 1
    # (M C)[mv, mk, c, m] = s_c sigma_m C[v, k, c, m]
    mirrored[mirror[:, None], part_perm[None, :]] = C * s[None, None, :, None] * sigma
    C = 0.5 * (C + mirrored)
    bound = np.abs(C).sum(axis=(1, 3)).max()
    C *= max_offset / bound
    return C.transpose(0, 2, 1, 3).reshape(V, 3, N_POSE_FEATURES)
