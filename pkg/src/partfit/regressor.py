"""Feed-forward regressor from part-segmentation grids to model parameters.

The network outputs 226 numbers: 24 raw 3x3 blocks (projected onto SO(3)
with an SVD layer) and 10 shape coefficients. The body model and camera
sit on top, so every loss backpropagates to the network weights.
"""
from __future__ import annotations

import base64
import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .body_model import N_BETAS, N_JOINTS, as_rotations, posed_joints
from .camera import project
from .kinematics import DegenerateMatrixError, project_to_so3, project_to_so3_vjp
from .losses import AnnotationMask, LossWeights, Targets, model_loss
from .metrics import e_joints, e_quat, pckh
from .optim import Adam, scheduled_lr
from .synth import one_hot_batch

N_OUTPUTS = 9 * N_JOINTS + N_BETAS
CHECKPOINT_FORMAT = 'partfit-regressor'
LOSS_TERMS = ('latent', 'joints3d', 'joints2d')


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(eq=False)
class RegressorNet:
    weights: list      # (fan_in, fan_out) arrays
    biases: list
    activation: str = 'tanh'
    input_scale: float = 1.0   # one-hot input is multiplied by this before layer one

    @property
    def sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @classmethod
    def create(cls, input_size, hidden=(256, 256), seed=0, out_scale=0.01, input_scale=0.1):
        """Glorot-initialised net whose initial output is the rest pose.

        The output bias holds identity 3x3 blocks and zero shape, so the
        SVD layer is well conditioned from the first step. ``input_scale``
        damps layer one: a grid has ~G^2 active one-hot units and Adam moves
        each of their weights by ~lr per step.
        """
        rng = np.random.default_rng(seed)
        sizes = [input_size, *hidden, N_OUTPUTS]
        weights, biases = [], []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / (a + b)) * (out_scale if i == len(sizes) - 2 else 1.0)
            weights.append(rng.normal(scale=scale, size=(a, b)))
            biases.append(np.zeros(b))
        biases[-1][:9 * N_JOINTS] = np.tile(np.eye(3).ravel(), N_JOINTS)
        return cls(weights, biases, input_scale=input_scale)

    @property
    def params(self):
        return self.weights + self.biases

    def copy(self):
        return RegressorNet([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                            self.activation, self.input_scale)

    def to_dict(self, config=None, seed=None, manifest=None):
        return {
            'format': CHECKPOINT_FORMAT,
            'sizes': self.sizes,
            'activation': self.activation,
            'input_scale': self.input_scale,
            'weights': [_encode(w) for w in self.weights],
            'biases': [_encode(b) for b in self.biases],
            'config': config,
            'seed': seed,
            'manifest': manifest,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get('format') != CHECKPOINT_FORMAT:
            raise ValueError('not a regressor checkpoint')
        net = cls([_decode(w) for w in d['weights']], [_decode(b) for b in d['biases']],
                  d.get('activation', 'tanh'), d.get('input_scale', 1.0))
        if net.sizes != d['sizes'] or net.sizes[-1] != N_OUTPUTS:
            raise ValueError('checkpoint layer sizes are inconsistent')
        return net


def _encode(a):
    a = np.ascontiguousarray(a, dtype='<f8')
    return {'shape': list(a.shape), 'dtype': '<f8', 'data': base64.b64encode(a.tobytes()).decode()}


def _decode(d):
    return np.frombuffer(base64.b64decode(d['data']), dtype=d['dtype']).reshape(d['shape']).copy()


def _act(z):
    return np.tanh(z)


def mlp_forward(net, x):
    """Raw outputs (B, 226) and the hidden activations needed for backprop."""
    h = x * net.input_scale if net.input_scale != 1.0 else x
    acts = [h]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == len(net.weights) - 1 else _act(z)
        acts.append(h)
    return h, acts


def mlp_backward(net, acts, grad_out, input_rows=None):
    """Gradients w.r.t. weights and biases (same order as ``net.params``).

    With ``input_rows`` the first-layer gradient is returned only for those
    input units (the rest are zero for sparse one-hot input).
    """
    gw, gb = [None] * len(net.weights), [None] * len(net.biases)
    g = grad_out
    for i in range(len(net.weights) - 1, -1, -1):
        if i == 0 and input_rows is not None:
            gw[i] = acts[0][:, input_rows].T @ g
        else:
            gw[i] = acts[i].T @ g
        gb[i] = g.sum(axis=0)
        if i:
            g = (g @ net.weights[i].T) * (1 - acts[i] ** 2)
    return gw + gb


def split_outputs(raw):
    raw = np.asarray(raw)
    return raw[..., :9 * N_JOINTS].reshape(*raw.shape[:-1], N_JOINTS, 3, 3), raw[..., 9 * N_JOINTS:]


def forward(net, grids):
    """Predicted (rotations (B, 24, 3, 3), betas (B, 10)) for a list of grids.

    Raises DegenerateMatrixError naming the example and part whose raw
    block cannot be projected.
    """
    x = grids if isinstance(grids, np.ndarray) else one_hot_batch(grids)
    raw, _ = mlp_forward(net, x)
    blocks, betas = split_outputs(raw)
    try:
        rots = project_to_so3(blocks)
    except DegenerateMatrixError as e:
        ex, part = e.index
        raise DegenerateMatrixError(f'example {ex}: output block of part {part} has rank < 2',
                                    index=e.index) from None
    return rots, betas


def network_loss(net, model, cam, x, targets, mask, weights, with_grads=True, input_rows=None):
    """Batch-mean combined loss and its gradient w.r.t. every network parameter."""
    raw, acts = mlp_forward(net, x)
    blocks, betas = split_outputs(raw)
    rots = project_to_so3(blocks)
    lv = model_loss(model, cam, rots, betas, targets, mask, weights)
    n = len(x)
    value = float(np.sum(lv.value)) / n
    if not with_grads:
        return value, None, lv
    g_blocks = project_to_so3_vjp(blocks, lv.grads['rotations'] / n)
    g_raw = np.concatenate([g_blocks.reshape(n, -1), lv.grads['betas'] / n], axis=1)
    return value, mlp_backward(net, acts, g_raw, input_rows), lv


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    lr_schedule: str = 'linear'
    final_lr_fraction: float = 0.0
    seed: int = 0
    hidden: tuple = (256, 256)
    losses: tuple = LOSS_TERMS
    weights: LossWeights = field(default_factory=lambda: LossWeights(1.0, 1e-4, 1e-3))
    supervision_fraction: float = None   # share keeping latent+3D labels; rest 2D only
    eval_train: bool = True

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError('epochs and batch_size must be positive')
        if self.supervision_fraction is not None and not 0 <= self.supervision_fraction <= 1:
            raise ValueError('supervision_fraction must lie in [0, 1]')
        if not self.losses or not set(self.losses) <= set(LOSS_TERMS):
            raise ValueError(f'losses must be a non-empty subset of {LOSS_TERMS}')

    def to_dict(self):
        d = asdict(self)
        d['hidden'] = list(self.hidden)
        d['losses'] = list(self.losses)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if 'weights' in d:
            d['weights'] = LossWeights(**d['weights'])
        for k in ('hidden', 'losses'):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def supervision_masks(examples, fraction, seed):
    """Masks keeping latent+3D labels on a seeded ``fraction`` of examples, 2D on all."""
    n = len(examples)
    order = np.random.default_rng(seed).permutation(n)
    keep = np.zeros(n, dtype=bool)
    keep[order[:int(round(fraction * n))]] = True
    return [AnnotationMask(bool(k), bool(k), True) for k in keep]


def _gt(examples):
    """Ground truth arrays; rows without a field are zero and flagged absent."""
    n = len(examples)
    have = {name: np.array([getattr(e, name) is not None for e in examples])
            for name in ('pose', 'betas', 'joints3d', 'joints2d')}

    def stack(name, shape):
        out = np.zeros((n,) + shape)
        for i, e in enumerate(examples):
            if have[name][i]:
                out[i] = getattr(e, name)
        return out

    targets = Targets(as_rotations(stack('pose', (3 * N_JOINTS,))), stack('betas', (N_BETAS,)),
                      stack('joints3d', (N_JOINTS, 3)), stack('joints2d', (N_JOINTS, 2)))
    return targets, have


def _masks(examples, config):
    if config.supervision_fraction is not None:
        masks = supervision_masks(examples, config.supervision_fraction, config.seed)
    else:
        masks = [e.mask for e in examples]
    use = [t in config.losses for t in LOSS_TERMS]
    arr = np.array([[m.has_latent, m.has_3d, m.has_2d] for m in masks], dtype=bool) & use
    return arr


def evaluate(net, model, cam, examples, batch=256):
    """Metric arrays of the net's predictions on examples with full ground truth."""
    out = {'e_joints_mm': [], 'e_quat_rad': [], 'pckh_pct': []}
    for s in range(0, len(examples), batch):
        part = examples[s:s + batch]
        rots, betas = forward(net, [e.grid for e in part])
        joints = posed_joints(model, rots, betas)
        targets, have = _gt(part)
        j3 = have['joints3d']
        if j3.any():
            out['e_joints_mm'] += list(e_joints(joints[j3], targets.joints3d[j3]))
        lat = have['pose']
        if lat.any():
            out['e_quat_rad'] += list(e_quat(rots[lat], targets.rotations[lat]))
        j2 = have['joints2d']
        if j2.any():
            out['pckh_pct'] += list(pckh(project(cam, joints[j2]), targets.joints2d[j2]))
    return {k: np.array(v) for k, v in out.items()}


def _mean(a):
    return float(np.mean(a)) if len(a) else float('nan')


def train(net, model, cam, examples, config=TrainConfig(), val=None):
    """Mini-batch Adam training; returns (trained copy of net, log rows)."""
    examples = list(examples)
    if not examples:
        raise ValueError('training set is empty')
    net = net.copy()
    flags = _masks(examples, config)
    if np.any(~flags.any(axis=1)):
        raise ValueError('every training example needs at least one enabled annotation')
    x_all = one_hot_batch([e.grid for e in examples])
    targets_all, _ = _gt(examples)
    n = len(examples)
    steps_per_epoch = -(-n // config.batch_size)
    total = steps_per_epoch * config.epochs
    opt = Adam([p.shape for p in net.params])
    rng = np.random.default_rng(config.seed)
    log = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        sums = np.zeros(4)
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            t = Targets(*(getattr(targets_all, f)[idx] for f in
                          ('rotations', 'betas', 'joints3d', 'joints2d')))
            m = AnnotationMask(flags[idx, 0], flags[idx, 1], flags[idx, 2])
            x = x_all[idx]
            rows = np.flatnonzero(x.any(axis=0))
            value, grads, lv = network_loss(net, model, cam, x, t, m, config.weights, input_rows=rows)
            if not np.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(f'non-finite loss at epoch {epoch}, step {step}')
            sums += [value * len(idx)] + [float(np.sum(lv.terms.get(k, 0.0))) for k in
                                          ('latent', 'joints3d', 'joints2d')]
            lr = scheduled_lr(config.lr, config.lr_schedule, step, total, config.final_lr_fraction)
            params = net.params
            opt.step(params, grads, lr, [rows] + [None] * (len(params) - 1))
            step += 1
        row = {'epoch': epoch, 'split': 'train', 'loss': sums[0] / n,
               'loss_latent': sums[1] / n, 'loss_3d': sums[2] / n, 'loss_2d': sums[3] / n}
        if config.eval_train:
            row.update({k: _mean(v) for k, v in evaluate(net, model, cam, examples).items()})
        log.append(row)
        if val:
            vrow = {'epoch': epoch, 'split': 'val'}
            vrow.update({k: _mean(v) for k, v in evaluate(net, model, cam, val).items()})
            log.append(vrow)
    return net, log


LOG_COLUMNS = ('epoch', 'split', 'e_joints_mm', 'e_quat_rad', 'pckh_pct', 'loss',
               'loss_latent', 'loss_3d', 'loss_2d')


def log_to_csv(log):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(LOG_COLUMNS)
    for row in log:
        w.writerow(['' if row.get(c) is None else (repr(row[c]) if isinstance(row[c], float) else row[c])
                    for c in LOG_COLUMNS])
    return buf.getvalue()


SWEEP_COLUMNS = ('fraction', 'e_joints_mm', 'e_quat_rad', 'pckh_pct')


def supervision_sweep(model, cam, examples, val, fractions, config=TrainConfig(), net=None):
    """One training run per 3D-label fraction; rows of validation metrics."""
    fractions = [float(f) for f in fractions]
    if fractions != sorted(fractions, reverse=True) or 1.0 not in fractions or 0.0 not in fractions:
        raise ValueError('fractions must be sorted descending and include 1.0 and 0.0')
    examples = list(examples)
    if net is None:
        net = RegressorNet.create(one_hot_batch([examples[0].grid]).shape[1], config.hidden, config.seed)
    rows = []
    for f in fractions:
        trained, _ = train(net, model, cam, examples, replace(config, supervision_fraction=f))
        m = evaluate(trained, model, cam, val)
        rows.append({'fraction': f, 'e_joints_mm': _mean(m['e_joints_mm']),
                     'e_quat_rad': _mean(m['e_quat_rad']), 'pckh_pct': _mean(m['pckh_pct'])})
    return rows


def sweep_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator='\n')
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([repr(float(r[c])) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def save_checkpoint(path, net, config=None, seed=None, manifest=None):
    with open(path, 'w') as f:
        json.dump(net.to_dict(config, seed, manifest), f, sort_keys=True)


def load_checkpoint(path):
    with open(path) as f:
        d = json.load(f)
    return RegressorNet.from_dict(d), d
