"""Direct gradient-based fitting of pose and shape to observations."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .body_model import N_BETAS, N_JOINTS, as_rotations, posed_joints
from .camera import project
from .losses import AnnotationMask, LossWeights, Targets, pose_loss
from .metrics import MetricsReport, report
from .optim import Adam, scheduled_lr

INIT_MODES = ('zero-pose', 'perturbed-gt', 'provided')
LOSS_TERMS = ('latent', 'joints3d', 'joints2d')


class FitDivergedError(RuntimeError):
    def __init__(self, iteration):
        super().__init__(f'loss became non-finite at iteration {iteration}')
        self.iteration = iteration


@dataclass(frozen=True)
class FitConfig:
    max_iter: int = 500
    lr: float = 0.01
    schedule: str = 'cosine'
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tol: float = 1e-9           # stop when |delta loss| < tol * max(1, loss)
    init: str = 'perturbed-gt'
    init_sigma: float = 0.1
    seed: int = 0
    losses: tuple = LOSS_TERMS  # terms used, intersected with each example's mask
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.max_iter <= 0:
            raise ValueError('max_iter must be positive')
        if self.tol <= 0:
            raise ValueError('tol must be positive')
        if self.init not in INIT_MODES:
            raise ValueError(f'init must be one of {INIT_MODES}')
        if not set(self.losses) <= set(LOSS_TERMS) or not self.losses:
            raise ValueError(f'losses must be a non-empty subset of {LOSS_TERMS}')

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if 'weights' in d:
            d['weights'] = LossWeights(**d['weights'])
        if 'losses' in d:
            d['losses'] = tuple(d['losses'])
        return cls(**d)


@dataclass
class FitResult:
    pose: np.ndarray
    betas: np.ndarray
    loss_trace: np.ndarray
    converged: bool
    iterations: int
    error: str = None

    @property
    def final_loss(self):
        return float(self.loss_trace[-1]) if len(self.loss_trace) else float('nan')


def _initial_params(config, n, init_pose, init_betas):
    pose = np.zeros((n, 3 * N_JOINTS))
    betas = np.zeros((n, N_BETAS))
    if config.init == 'zero-pose':
        return pose, betas
    if init_pose is None or init_betas is None:
        raise ValueError(f"init mode {config.init!r} needs init_pose and init_betas")
    pose[:] = init_pose
    betas[:] = init_betas
    if config.init == 'perturbed-gt':
        rng = np.random.default_rng(config.seed)
        pose += rng.normal(scale=config.init_sigma, size=pose.shape)
        betas += rng.normal(scale=config.init_sigma, size=betas.shape)
    return pose, betas


def _select(mask, losses):
    return AnnotationMask(
        np.asarray(mask.has_latent) & ('latent' in losses),
        np.asarray(mask.has_3d) & ('joints3d' in losses),
        np.asarray(mask.has_2d) & ('joints2d' in losses),
    )


def fit_arrays(model, cam, targets, mask, config, init_pose=None, init_betas=None):
    """Fit a batch of independent examples; one FitResult per example.

    Examples stop individually once converged or diverged; failures are
    reported in ``FitResult.error`` instead of raised.
    """
    n = len(np.atleast_2d(init_betas)) if init_betas is not None else _batch_len(targets)
    pose, betas = _initial_params(config, n, init_pose, init_betas)
    mask = _select(mask, config.losses)
    opt = Adam([pose.shape, betas.shape], config.beta1, config.beta2, config.eps)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    errors = [None] * n
    traces = [[] for _ in range(n)]
    prev = np.full(n, np.inf)
    for it in range(config.max_iter):
        lv = pose_loss(model, cam, pose, betas, targets, mask, config.weights)
        val = lv.value
        for i in np.flatnonzero(active & ~np.isfinite(val)):
            errors[i] = str(FitDivergedError(it + 1))
            active[i] = False
        for i in np.flatnonzero(active):
            traces[i].append(float(val[i]))
        done = active & (np.abs(prev - val) < config.tol * np.maximum(1.0, np.abs(val)))
        converged |= done
        active &= ~done
        prev = val
        if not active.any() or it == config.max_iter - 1:
            break
        lr = scheduled_lr(config.lr, config.schedule, it, config.max_iter)
        grads = [np.nan_to_num(lv.grads['pose']), np.nan_to_num(lv.grads['betas'])]
        step_pose, step_betas = opt.updates(grads, lr)
        pose -= step_pose * active[:, None]
        betas -= step_betas * active[:, None]
    return [FitResult(pose[i].copy(), betas[i].copy(), np.array(traces[i]), bool(converged[i]),
                      len(traces[i]), errors[i]) for i in range(n)]


def _batch_len(targets):
    for a in (targets.joints3d, targets.joints2d, targets.betas):
        if a is not None:
            return len(a)
    raise ValueError('targets are empty')


def _batch1(a):
    return None if a is None else np.asarray(a)[None]


def fit(model, cam, targets, mask, config=FitConfig(), init_pose=None, init_betas=None):
    """Fit one example. Raises FitDivergedError if the loss becomes non-finite."""
    t = Targets(*(_batch1(getattr(targets, f)) for f in ('rotations', 'betas', 'joints3d', 'joints2d')))
    m = AnnotationMask(*(np.atleast_1d(f) for f in (mask.has_latent, mask.has_3d, mask.has_2d)))
    res = fit_arrays(model, cam, t, m, config, _batch1(init_pose), _batch1(init_betas))[0]
    if res.error:
        raise FitDivergedError(res.iterations + 1)
    return res


def example_targets(examples):
    """Batched Targets and mask from annotated examples (missing fields zero-filled)."""
    n = len(examples)

    def stack(name, shape):
        out = np.zeros((n,) + shape)
        for i, e in enumerate(examples):
            v = getattr(e, name)
            if v is not None:
                out[i] = v
        return out

    pose = stack('pose', (3 * N_JOINTS,))
    targets = Targets(as_rotations(pose), stack('betas', (N_BETAS,)),
                      stack('joints3d', (N_JOINTS, 3)), stack('joints2d', (N_JOINTS, 2)))
    mask = AnnotationMask(*(np.array([getattr(e.mask, f) for e in examples], dtype=bool)
                            for f in ('has_latent', 'has_3d', 'has_2d')))
    return targets, mask


def fit_batch(model, cam, examples, config=FitConfig(), chunk=256):
    """Fit every example; returns (results in input order, MetricsReport)."""
    examples = list(examples)
    if not examples:
        return [], MetricsReport([])
    results = []
    for start in range(0, len(examples), chunk):
        part = examples[start:start + chunk]
        targets, mask = example_targets(part)
        init_pose = init_betas = None
        if config.init != 'zero-pose':
            missing = [i for i, e in enumerate(part) if e.pose is None]
            if missing:
                raise ValueError(f'init {config.init!r} needs pose/shape on every example')
            init_pose = np.stack([e.pose for e in part])
            init_betas = np.stack([e.betas for e in part])
        cfg = replace(config, seed=config.seed + start)
        results += fit_arrays(model, cam, targets, mask, cfg, init_pose, init_betas)
    return results, evaluate_fits(model, cam, examples, results)


def evaluate_fits(model, cam, examples, results):
    ok = [i for i, r in enumerate(results) if r.error is None]
    if not ok:
        return MetricsReport([])
    pose = np.stack([results[i].pose for i in ok])
    betas = np.stack([results[i].betas for i in ok])
    rots = as_rotations(pose)
    joints = posed_joints(model, rots, betas)
    pred = {'rotations': rots, 'joints3d': joints, 'joints2d': project(cam, joints)}
    gt = {}
    sub = [examples[i] for i in ok]
    for key, attr in (('joints3d', 'joints3d'), ('joints2d', 'joints2d')):
        if all(getattr(e, attr) is not None for e in sub):
            gt[key] = np.stack([getattr(e, attr) for e in sub])
    if all(e.pose is not None for e in sub):
        gt['rotations'] = as_rotations(np.stack([e.pose for e in sub]))
    return report(pred, gt, indices=ok)
