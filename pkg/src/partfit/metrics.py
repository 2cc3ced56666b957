"""Evaluation measures: joint error, PCKh, rotation error and Procrustes alignment."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .kinematics import quat_distance, rotation_to_quat

NECK, HEAD = 12, 15
METRIC_COLUMNS = ('e_joints_mm', 'pckh_pct', 'e_quat_rad', 'procrustes_mm')


class DegenerateConfigurationError(ValueError):
    pass


def e_joints(pred, gt):
    """Mean per-joint Euclidean distance (same units as the inputs)."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f'joint sets differ in shape: {pred.shape} vs {gt.shape}')
    return np.linalg.norm(pred - gt, axis=-1).mean(axis=-1)


def head_size(gt_2d):
    return np.linalg.norm(np.asarray(gt_2d)[..., HEAD, :] - np.asarray(gt_2d)[..., NECK, :], axis=-1)


def pckh(pred_2d, gt_2d, head=None):
    """Percentage of joints closer than half the head segment (strict)."""
    pred_2d, gt_2d = np.asarray(pred_2d, dtype=float), np.asarray(gt_2d, dtype=float)
    if pred_2d.shape != gt_2d.shape:
        raise ValueError('2D joint sets differ in shape')
    head = head_size(gt_2d) if head is None else np.asarray(head, dtype=float)
    if np.any(head <= 0):
        raise ValueError('head size must be positive')
    err = np.linalg.norm(pred_2d - gt_2d, axis=-1)
    return 100.0 * np.mean(err < 0.5 * head[..., None], axis=-1)


def e_quat(pred_rotations, gt_rotations):
    """Mean over parts of the geodesic angle between predicted and true rotations."""
    return quat_distance(rotation_to_quat(pred_rotations),
                         rotation_to_quat(gt_rotations)).mean(axis=-1)


def procrustes_align(pred, gt, with_scale=False):
    """Least-squares rigid (or similarity) alignment of ``pred`` onto ``gt``.

    Returns ``(aligned, residual)`` where residual is the mean per-joint
    distance after alignment.
    """
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError('procrustes_align expects two (K, 3) point sets')
    if len(gt) < 3:
        raise DegenerateConfigurationError('need at least 3 points')
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    P, G = pred - mu_p, gt - mu_g
    sg = np.linalg.svd(G, compute_uv=False)
    if sg[1] <= 1e-9 * max(sg[0], 1e-300):
        raise DegenerateConfigurationError('ground-truth points are collinear')
    U, s, Vt = np.linalg.svd(G.T @ P)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    scale = 1.0
    if with_scale:
        scale = np.trace(np.diag(s) @ D) / np.sum(P * P)
    aligned = scale * P @ R.T + mu_g
    return aligned, float(e_joints(aligned, gt))


@dataclass
class MetricsReport:
    rows: list = field(default_factory=list)   # dicts: example + METRIC_COLUMNS

    @property
    def count(self):
        return len(self.rows)

    @property
    def empty(self):
        return not self.rows

    def column(self, name):
        vals = [r.get(name) for r in self.rows]
        return np.array([v for v in vals if v is not None], dtype=float)

    @property
    def aggregates(self):
        out = {}
        for name in METRIC_COLUMNS:
            col = self.column(name)
            if len(col):
                out[name] = {'mean': float(col.mean()), 'median': float(np.median(col))}
        return out

    def mean(self, name):
        return self.aggregates[name]['mean']

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator='\n')
        w.writerow(('example',) + METRIC_COLUMNS)
        if self.empty:
            w.writerow(('empty',) + ('',) * len(METRIC_COLUMNS))
            return buf.getvalue()
        for r in self.rows:
            w.writerow([r['example']] + [_fmt(r.get(c)) for c in METRIC_COLUMNS])
        agg = self.aggregates
        for stat in ('mean', 'median'):
            w.writerow([stat] + [_fmt(agg[c][stat]) if c in agg else '' for c in METRIC_COLUMNS])
        return buf.getvalue()

    def table(self):
        """Human-readable summary."""
        if self.empty:
            return 'empty report (0 examples)'
        lines = [f'{"metric":<16}{"mean":>12}{"median":>12}']
        for name, agg in self.aggregates.items():
            lines.append(f'{name:<16}{agg["mean"]:>12.4f}{agg["median"]:>12.4f}')
        lines.append(f'examples: {self.count}')
        return '\n'.join(lines)


def _fmt(v):
    return '' if v is None else repr(float(v))


def report(pred=None, gt=None, indices=None):
    """Per-example metrics for whatever predictions and ground truth are given.

    ``pred`` and ``gt`` are dicts with optional keys 'rotations',
    'joints3d' and 'joints2d' holding batched arrays.
    """
    pred, gt = pred or {}, gt or {}
    n = None
    for d in (pred, gt):
        for v in d.values():
            if v is not None:
                n = len(v)
                break
    if not n:
        return MetricsReport([])
    indices = list(range(n)) if indices is None else list(indices)
    cols = {}
    if _both(pred, gt, 'joints3d'):
        cols['e_joints_mm'] = e_joints(pred['joints3d'], gt['joints3d'])
        cols['procrustes_mm'] = [_procrustes_or_none(p, g)
                                 for p, g in zip(pred['joints3d'], gt['joints3d'])]
    if _both(pred, gt, 'joints2d'):
        cols['pckh_pct'] = pckh(pred['joints2d'], gt['joints2d'])
    if _both(pred, gt, 'rotations'):
        cols['e_quat_rad'] = e_quat(pred['rotations'], gt['rotations'])
    rows = []
    for i in range(n):
        row = {'example': indices[i]}
        for c in METRIC_COLUMNS:
            v = cols[c][i] if c in cols else None
            row[c] = None if v is None else float(v)
        rows.append(row)
    return MetricsReport(rows)


def _procrustes_or_none(p, g):
    # a collinear ground truth leaves the alignment undefined; keep the row
    try:
        return procrustes_align(p, g)[1]
    except DegenerateConfigurationError:
        return None


def _both(pred, gt, key):
    return pred.get(key) is not None and gt.get(key) is not None
