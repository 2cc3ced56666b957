"""Synthetic part-segmentation datasets rendered from the desk model.

Grids are row-major with the origin at the top-left cell, so grid
coordinates follow the image convention of the camera.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .body_model import (MIRROR_JOINTS, N_BETAS, N_JOINTS, SMPL_PARENTS,
                         mirror_points, mirror_pose, skin)
from .camera import Camera, project
from .losses import AnnotationMask

DATASET_FORMAT = 'partfit-dataset'
GENERATOR_VERSION = 1
GRANULARITIES = (1, 3, 6, 12, 24)

# 24 -> P part maps; values are 1-based group labels (0 is background).
_HEAD, _TORSO, _SPINE, _PELVIS = (12, 15), (9, 13, 14), (3, 6), (0,)
_L_UPPER_ARM, _L_LOWER_ARM = (16,), (18, 20, 22)
_L_UPPER_LEG, _L_LOWER_LEG = (1,), (4, 7, 10)


def _mirror_parts(parts):
    return tuple(int(MIRROR_JOINTS[k]) for k in parts)


def _map_from_groups(groups):
    m = np.zeros(N_JOINTS, dtype=int)
    for g, parts in enumerate(groups, start=1):
        m[list(parts)] = g
    assert np.all(m > 0)
    return m


_L_ARM = _L_UPPER_ARM + _L_LOWER_ARM
_L_LEG = _L_UPPER_LEG + _L_LOWER_LEG
GRANULARITY_MAPS = {
    24: np.arange(1, N_JOINTS + 1),
    12: _map_from_groups([
        _HEAD, _TORSO, _L_UPPER_ARM, _mirror_parts(_L_UPPER_ARM), _L_LOWER_ARM,
        _mirror_parts(_L_LOWER_ARM), _L_UPPER_LEG, _mirror_parts(_L_UPPER_LEG),
        _L_LOWER_LEG, _mirror_parts(_L_LOWER_LEG), _PELVIS, _SPINE]),
    6: _map_from_groups([
        _HEAD, _TORSO + _SPINE + _PELVIS, _L_ARM, _mirror_parts(_L_ARM),
        _L_LEG, _mirror_parts(_L_LEG)]),
    3: _map_from_groups([
        _HEAD, _TORSO + _SPINE + _PELVIS,
        _L_ARM + _mirror_parts(_L_ARM) + _L_LEG + _mirror_parts(_L_LEG)]),
    1: np.ones(N_JOINTS, dtype=int),
}


def _label_mirror(parts):
    """Label permutation (incl. background 0) induced by swapping body sides."""
    gmap = GRANULARITY_MAPS[parts]
    perm = np.arange(parts + 1)
    perm[gmap] = gmap[MIRROR_JOINTS]
    return perm


LABEL_MIRROR = {p: _label_mirror(p) for p in GRANULARITIES}


def _group_adjacency(parts):
    gmap = GRANULARITY_MAPS[parts]
    adj = [set() for _ in range(parts + 1)]
    for i, p in enumerate(SMPL_PARENTS[1:], start=1):
        a, b = gmap[i], gmap[p]
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    return [sorted(s) for s in adj]


# Fixed colours for optional colour-coded export (one per SMPL part).
PALETTE = (
    (128, 128, 128), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 190), (0, 128, 128), (230, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
    (255, 99, 71), (46, 139, 87), (186, 85, 211), (100, 149, 237),
)

# Per-joint axis-angle boxes (radians) at difficulty 1, axes x, y, z.
# Rotations are expressed in the rest frame: +x subject's left, +y down,
# +z away from the camera. Wide ranges go to DOFs a 32x32 part grid can
# show: global orientation, hip and shoulder swing, knee and elbow flexion.
# Spine, neck, head, collars, wrists, ankles and limb twist barely change
# the grid but move every joint below them, so their boxes stay narrow.
# Hip and shoulder flexion swing mostly forward (-z), so depth direction is
# not a coin flip for a frontal view.
_LIMIT_ROWS = {
    0: ((-0.2, 0.2), (-0.3, 0.3), (-0.2, 0.2)),
    1: ((-0.9, 0.1), (-0.15, 0.15), (-0.5, 0.5)),
    3: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    4: ((0.0, 1.5), (-0.05, 0.05), (-0.05, 0.05)),
    6: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    7: ((-0.1, 0.1), (-0.05, 0.05), (-0.05, 0.05)),
    9: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    10: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    12: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    13: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
    15: ((-0.15, 0.15), (-0.15, 0.15), (-0.1, 0.1)),
    16: ((-0.15, 0.15), (-0.1, 0.8), (-1.0, 1.0)),
    18: ((-0.1, 0.1), (0.0, 2.0), (-0.1, 0.1)),
    20: ((-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)),
    22: ((-0.05, 0.05), (-0.05, 0.05), (-0.05, 0.05)),
}


def _pose_limits():
    lo, hi = np.zeros((N_JOINTS, 3)), np.zeros((N_JOINTS, 3))
    for k, rows in _LIMIT_ROWS.items():
        lo[k], hi[k] = np.array(rows).T
        m = MIRROR_JOINTS[k]
        if m != k:
            # mirrored joint: axis-angle (x, y, z) -> (x, -y, -z)
            flip = np.array([1.0, -1.0, -1.0])
            a, b = lo[k] * flip, hi[k] * flip
            lo[m], hi[m] = np.minimum(a, b), np.maximum(a, b)
    return lo, hi


POSE_LOW, POSE_HIGH = _pose_limits()


def example_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def sample_pose_shape(seed, difficulty=1.0):
    """Axis-angle pose (72,) and shape (10,) drawn from boxes scaled by difficulty."""
    if not 0 <= difficulty <= 1:
        raise ValueError('difficulty must lie in [0, 1]')
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=(N_JOINTS, 3))
    pose = difficulty * (POSE_LOW + u * (POSE_HIGH - POSE_LOW))
    betas = difficulty * rng.uniform(-2.0, 2.0, size=N_BETAS)
    return pose.reshape(-1), betas


@dataclass(frozen=True, eq=False)
class PartSegGrid:
    labels: np.ndarray        # (G, G) ints, 0 = background, 1..parts
    parts: int
    provenance: str = 'ground-truth'

    def __post_init__(self):
        if self.parts not in GRANULARITIES:
            raise ValueError(f'granularity must be one of {GRANULARITIES}')
        if self.labels.min() < 0 or self.labels.max() > self.parts:
            raise ValueError('grid labels out of range')

    @property
    def size(self):
        return self.labels.shape[0]

    def one_hot(self):
        """Flattened (G * G * (parts + 1)) one-hot encoding."""
        return np.eye(self.parts + 1)[self.labels].reshape(-1)

    def to_rgb(self):
        colours = np.array(((0, 0, 0),) + PALETTE[:self.parts], dtype=np.uint8)
        return colours[self.labels]

    def to_hex(self):
        return self.labels.astype(np.uint8).tobytes().hex()

    @classmethod
    def from_hex(cls, text, size, parts, provenance='ground-truth'):
        labels = np.frombuffer(bytes.fromhex(text), dtype=np.uint8).astype(int)
        return cls(labels.reshape(size, size), parts, provenance)


def one_hot_batch(grids):
    labels = np.stack([g.labels for g in grids])
    parts = grids[0].parts
    return (labels[..., None] == np.arange(parts + 1)).reshape(len(grids), -1).astype(float)


def relabel(grid, parts):
    """Coarsen a 24-part grid to a lower granularity."""
    if grid.parts != 24:
        raise ValueError('relabel expects a 24-part grid')
    lut = np.concatenate([[0], GRANULARITY_MAPS[parts]])
    return PartSegGrid(lut[grid.labels], parts, grid.provenance)


def _splat_offsets(radius):
    r = int(np.floor(radius))
    d = np.arange(-r, r + 1)
    di, dj = np.meshgrid(d, d, indexing='ij')
    keep = di**2 + dj**2 <= radius**2
    return np.stack([di[keep], dj[keep]], -1)


def splat_winners(uv, depth, cam, grid_size):
    """Index of the vertex owning each cell (-1 for background).

    Each vertex covers a disc of radius max(1, G/24) cells; the nearest
    vertex wins a cell, ties going to the lower vertex index.
    """
    G = grid_size
    radius = max(1.0, G / 24)
    offs = _splat_offsets(radius)
    col = np.floor(uv[:, 0] * G / cam.width).astype(int)
    row = np.floor(uv[:, 1] * G / cam.height).astype(int)
    rows = row[:, None] + offs[None, :, 0]
    cols = col[:, None] + offs[None, :, 1]
    idx = np.broadcast_to(np.arange(len(uv))[:, None], rows.shape)
    inside = (rows >= 0) & (rows < G) & (cols >= 0) & (cols < G)
    cell = (rows * G + cols)[inside]
    idx = idx[inside]
    z = np.broadcast_to(depth[:, None], rows.shape)[inside]
    order = np.lexsort((idx, z, cell))
    cell, idx = cell[order], idx[order]
    first = np.unique(cell, return_index=True)[1]
    winners = np.full(G * G, -1)
    winners[cell[first]] = idx[first]
    return winners.reshape(G, G)


def rasterize(model, cam, pose, betas, grid_size=32, parts=24):
    """Point-splat part segmentation of the posed model."""
    if grid_size < 16:
        raise ValueError('grid_size must be >= 16')
    verts, _ = skin(model, pose, betas)
    return rasterize_vertices(model, cam, verts, grid_size, parts)


def rasterize_vertices(model, cam, verts, grid_size=32, parts=24):
    uv = project(cam, verts)
    winners = splat_winners(uv, verts[:, 2], cam, grid_size)
    lut = np.concatenate([[0], GRANULARITY_MAPS[parts]])
    labels = np.where(winners >= 0, lut[model.part_labels[np.maximum(winners, 0)] + 1], 0)
    return PartSegGrid(labels, parts)


def mirror_grid(grid):
    """Horizontally flipped grid with left/right labels swapped."""
    return PartSegGrid(LABEL_MIRROR[grid.parts][grid.labels[:, ::-1]], grid.parts,
                       grid.provenance)


def segmentation_f1(reference, other):
    """Macro F1 over foreground labels present in either grid."""
    a, b = reference.labels, other.labels
    scores = []
    for c in range(1, reference.parts + 1):
        ra, rb = a == c, b == c
        if not (ra.any() or rb.any()):
            continue
        tp = np.sum(ra & rb)
        scores.append(2 * tp / (ra.sum() + rb.sum()))
    return float(np.mean(scores)) if scores else 1.0


def corrupt(grid, rate, seed):
    """Boundary-like label noise.

    Each foreground cell is hit with probability ``rate``; a hit cell takes
    the label of an adjacent part (70%) or becomes background (30%).
    Returns ``(corrupted_grid, f1_vs_original)``.
    """
    if not 0 <= rate <= 1:
        raise ValueError('rate must lie in [0, 1]')
    rng = np.random.default_rng(seed)
    src = grid.labels
    G = src.shape[0]
    hit = rng.uniform(size=src.shape) < rate
    to_part = rng.uniform(size=src.shape) < 0.7
    pick = rng.uniform(size=src.shape)
    out = src.copy()
    adjacency = _group_adjacency(grid.parts)
    padded = np.pad(src, 1)
    for i, j in zip(*np.nonzero(hit & (src > 0))):
        own = src[i, j]
        cand = []
        if to_part[i, j]:
            window = padded[i:i + 3, j:j + 3]
            cand = sorted(set(window[(window > 0) & (window != own)].tolist()))
            if not cand:
                cand = adjacency[own]
        out[i, j] = cand[int(pick[i, j] * len(cand))] if cand else 0
    new = PartSegGrid(out, grid.parts, f'corrupted({rate:g})')
    return new, segmentation_f1(grid, new)


# datasets ------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationPolicy:
    """Fraction of examples carrying each kind of annotation."""

    latent: float = 1.0
    joints3d: float = 1.0
    joints2d: float = 1.0

    @classmethod
    def parse(cls, text):
        presets = {'all': cls(), '2d-only': cls(0.0, 0.0, 1.0), '3d-only': cls(1.0, 1.0, 0.0)}
        if text in presets:
            return presets[text]
        vals = {}
        for item in text.split(','):
            key, _, val = item.partition('=')
            key = {'lat': 'latent', 'latent': 'latent', '3d': 'joints3d',
                   '2d': 'joints2d'}.get(key.strip())
            if key is None:
                raise ValueError(f'bad annotation policy item {item!r}')
            vals[key] = float(val)
        return cls(**{k: vals.get(k, 0.0) for k in ('latent', 'joints3d', 'joints2d')})

    def masks(self, n, seed):
        """Per-example masks; the same shuffled order ranks every annotation kind."""
        order = np.random.default_rng(seed).permutation(n)
        rank = np.empty(n, dtype=int)
        rank[order] = np.arange(n)
        flags = [rank < int(round(f * n)) for f in (self.latent, self.joints3d, self.joints2d)]
        if np.any(~(flags[0] | flags[1] | flags[2])):
            raise ValueError('annotation policy leaves some examples without labels')
        return [AnnotationMask(bool(a), bool(b), bool(c)) for a, b, c in zip(*flags)]

    def to_dict(self):
        return {'latent': self.latent, 'joints3d': self.joints3d, 'joints2d': self.joints2d}


@dataclass(eq=False)
class AnnotatedExample:
    grid: PartSegGrid
    mask: AnnotationMask
    pose: np.ndarray = None        # (72,) axis-angle
    betas: np.ndarray = None       # (10,)
    joints3d: np.ndarray = None    # (24, 3) mm
    joints2d: np.ndarray = None    # (24, 2) px
    seed: int = 0
    difficulty: float = 0.0
    mirrored: bool = False
    f1: float = 1.0

    def __post_init__(self):
        m = self.mask
        if m.has_latent and (self.pose is None or self.betas is None):
            raise ValueError('latent flag set without pose/shape')
        if m.has_3d and self.joints3d is None:
            raise ValueError('3D flag set without 3D joints')
        if m.has_2d and self.joints2d is None:
            raise ValueError('2D flag set without 2D joints')

    def with_mask(self, mask):
        return replace(self, mask=mask)

    def to_dict(self):
        return {
            'grid': self.grid.to_hex(),
            'provenance': self.grid.provenance,
            'mask': [bool(self.mask.has_latent), bool(self.mask.has_3d), bool(self.mask.has_2d)],
            'pose': _list(self.pose), 'betas': _list(self.betas),
            'joints3d': _list(self.joints3d), 'joints2d': _list(self.joints2d),
            'seed': self.seed, 'difficulty': self.difficulty,
            'mirrored': self.mirrored, 'f1': self.f1,
        }

    @classmethod
    def from_dict(cls, d, grid_size, parts):
        arr = lambda v: None if v is None else np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            grid=PartSegGrid.from_hex(d['grid'], grid_size, parts, d.get('provenance', 'ground-truth')),
            mask=AnnotationMask(*d['mask']),
            pose=arr(d['pose']), betas=arr(d['betas']),
            joints3d=arr(d['joints3d']), joints2d=arr(d['joints2d']),
            seed=d['seed'], difficulty=d['difficulty'], mirrored=d['mirrored'], f1=d['f1'],
        )


def _list(a):
    return None if a is None else np.asarray(a).tolist()


@dataclass(eq=False)
class Dataset:
    header: dict
    examples: list = field(default_factory=list)

    def __len__(self):
        return len(self.examples)

    @property
    def grid_size(self):
        return self.header['grid_size']

    @property
    def parts(self):
        return self.header['parts']

    @property
    def camera(self):
        return Camera.from_dict(self.header['camera'])

    def subset(self, indices):
        return Dataset(dict(self.header), [self.examples[i] for i in indices])

    def to_jsonl(self):
        lines = [json.dumps(self.header, sort_keys=True)]
        lines += [json.dumps(e.to_dict(), sort_keys=True) for e in self.examples]
        return '\n'.join(lines) + '\n'

    def write(self, path):
        with open(path, 'w') as f:
            f.write(self.to_jsonl())

    @property
    def hash(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    @classmethod
    def from_jsonl(cls, text):
        lines = text.splitlines()
        header = json.loads(lines[0])
        if header.get('format') != DATASET_FORMAT:
            raise ValueError('not a dataset file')
        G, P = header['grid_size'], header['parts']
        return cls(header, [AnnotatedExample.from_dict(json.loads(line), G, P)
                            for line in lines[1:] if line.strip()])

    @classmethod
    def read(cls, path):
        with open(path) as f:
            return cls.from_jsonl(f.read())

    # batched views; rows lacking the field are NaN-free zero placeholders
    def stack(self, name):
        vals = [getattr(e, name) for e in self.examples]
        if any(v is None for v in vals):
            raise ValueError(f'some examples lack {name}')
        return np.stack(vals)

    def mask_arrays(self):
        m = np.array([[e.mask.has_latent, e.mask.has_3d, e.mask.has_2d] for e in self.examples],
                     dtype=bool).reshape(-1, 3)
        return m[:, 0], m[:, 1], m[:, 2]


def annotate(model, cam, pose, betas):
    """3D and 2D joint annotations of a parameter pair."""
    verts, joints = skin(model, pose, betas)
    return verts, joints, project(cam, joints)


def build_dataset(model, cam, n, seed=0, grid_size=32, parts=12, corruption=0.0,
                  policy='all', difficulty=1.0, mirror=False, model_info=None):
    """Generate ``n`` annotated examples (``2n`` when mirrored copies are added).

    ``difficulty`` is a float or a (low, high) range sampled per example.
    """
    if n <= 0:
        raise ValueError('n must be positive')
    if isinstance(policy, str):
        policy = AnnotationPolicy.parse(policy)
    lo, hi = (difficulty, difficulty) if np.isscalar(difficulty) else difficulty
    raw = []
    for i in range(n):
        s = example_seed(seed, i)
        d = float(lo + (hi - lo) * np.random.default_rng([s, 1]).uniform()) if hi > lo else float(lo)
        pose, betas = sample_pose_shape(s, d)
        verts, joints, j2d = annotate(model, cam, pose, betas)
        grid = rasterize_vertices(model, cam, verts, grid_size, parts)
        f1 = 1.0
        if corruption > 0:
            grid, f1 = corrupt(grid, corruption, s)
        raw.append((grid, pose, betas, joints, j2d, s, d, False, f1))
        if mirror:
            mj = mirror_points(joints)
            raw.append((mirror_grid(grid), mirror_pose(pose), betas, mj, project(cam, mj),
                        s, d, True, f1))
    masks = policy.masks(len(raw), seed)
    examples = []
    for (grid, pose, betas, joints, j2d, s, d, mir, f1), m in zip(raw, masks):
        examples.append(AnnotatedExample(
            grid=grid, mask=m,
            pose=pose if m.has_latent else None, betas=betas if m.has_latent else None,
            joints3d=joints if m.has_3d else None, joints2d=j2d if m.has_2d else None,
            seed=s, difficulty=d, mirrored=mir, f1=f1))
    header = {
        'format': DATASET_FORMAT,
        'generator_version': GENERATOR_VERSION,
        'model': dict(model_info or {}, hash=model.hash),
        'camera': cam.to_dict(),
        'grid_size': grid_size,
        'parts': parts,
        'corruption': corruption,
        'policy': policy.to_dict(),
        'difficulty': [lo, hi],
        'mirror': mirror,
        'seed': seed,
        'palette': [list(c) for c in PALETTE],
    }
    return Dataset(header, examples)
