"""partfit command line: gen | train | sweep | fit | predict | eval | gradcheck | replay.

Every artifact embeds a run manifest (command, resolved options, seed,
hashes, tool version). The wall-clock timestamp goes only into the
``<out>.manifest.json`` sidecar so artifacts stay byte-reproducible.
"""
from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .body_model import N_JOINTS, as_rotations, generate_desk_model, posed_joints
from .camera import project
from .fitter import FitConfig, fit_batch
from .losses import LossWeights, grad_check
from .metrics import report
from .regressor import (RegressorNet, TrainConfig, forward, load_checkpoint, log_to_csv,
                        save_checkpoint, supervision_sweep, sweep_to_csv, train)
from .synth import GRANULARITIES, Dataset, build_dataset, one_hot_batch

PREDICTIONS_FORMAT = 'partfit-predictions'
LOSS_KINDS = ('latent', 'joints3d', 'joints2d', 'joints2d+joints3d')


class ValidationError(Exception):
    """Bad input detected after argument parsing (exit status 1)."""


# ---------------------------------------------------------------- helpers

def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


def _floats(text, n=None):
    vals = [float(v) for v in str(text).split(',') if v.strip()]
    if n is not None and len(vals) != n:
        raise ValidationError(f'expected {n} comma-separated numbers, got {text!r}')
    return vals


def _names(text):
    return tuple(v.strip() for v in str(text).split(',') if v.strip())


def _jsonable(v):
    if isinstance(v, (tuple, list)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if dataclasses.is_dataclass(v):
        return _jsonable(dataclasses.asdict(v))
    if isinstance(v, np.generic):
        return v.item()
    return v


def make_manifest(args, model_hash=None, dataset_hash=None):
    options = {k: _jsonable(v) for k, v in sorted(vars(args).items())
               if k not in ('func', 'config_data', 'out')}
    return {
        'command': args.command,
        'options': options,
        'config_path': args.config,
        'config': args.config_data,
        'seed': args.seed,
        'model_hash': model_hash,
        'dataset_hash': dataset_hash,
        'tool_version': __version__,
    }


def _write_sidecar(path, manifest):
    side = dict(manifest, out=path, artifact=os.path.basename(path),
                artifact_sha256=_sha256_file(path),
                timestamp=datetime.datetime.now(datetime.timezone.utc).isoformat())
    with open(path + '.manifest.json', 'w') as f:
        json.dump(side, f, indent=1, sort_keys=True)
        f.write('\n')


def _write_text(path, text, manifest):
    with open(path, 'w') as f:
        f.write(text)
    _write_sidecar(path, manifest)


def _csv_with_manifest(csv_text, manifest):
    return '# manifest ' + json.dumps(manifest, sort_keys=True) + '\n' + csv_text


def _sibling(path, suffix):
    stem = path[:-len(os.path.splitext(path)[1])] if os.path.splitext(path)[1] else path
    return stem + suffix


def _need_out(args):
    if not args.out:
        raise ValidationError(f'{args.command} needs --out')
    return args.out


def _read_dataset(path):
    if not path:
        raise ValidationError('a dataset path is required (--data)')
    if not os.path.exists(path):
        raise ValidationError(f'no such file: {path}')
    try:
        return Dataset.read(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f'{path}: {e}') from None


def _model_for(ds):
    info = ds.header['model']
    if 'seed' not in info or 'n_vertices' not in info:
        raise ValidationError('dataset header lacks model seed / vertex count')
    model = generate_desk_model(info['seed'], info['n_vertices'])
    if model.hash != info['hash']:
        raise ValidationError('regenerated model hash differs from the dataset header '
                              '(generator version mismatch?)')
    return model


def _train_config(args):
    d = {
        'epochs': args.epochs, 'batch_size': args.batch_size, 'lr': args.lr,
        'lr_schedule': args.lr_schedule, 'seed': args.seed,
        'hidden': tuple(int(h) for h in _floats(args.hidden)),
        'losses': _names(args.losses),
        'weights': LossWeights(*_floats(args.weights, 3)),
        'supervision_fraction': args.supervision_fraction,
    }
    try:
        return TrainConfig(**d)
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from None


def _check_same_model(a, b):
    if a.header['model']['hash'] != b.header['model']['hash']:
        raise ValidationError('datasets were generated from different body models')


# --------------------------------------------------------------- commands

def cmd_gen(args):
    out = _need_out(args)
    if args.parts not in GRANULARITIES:
        raise ValidationError(f'--parts must be one of {GRANULARITIES}')
    diff = _floats(args.difficulty)
    if len(diff) not in (1, 2):
        raise ValidationError('--difficulty is a number or "low,high"')
    model_seed = args.seed if args.model_seed is None else args.model_seed
    model = generate_desk_model(model_seed, args.vertices)
    from .camera import default_camera
    cam = default_camera()
    ds = build_dataset(model, cam, args.n, seed=args.seed, grid_size=args.grid,
                       parts=args.parts, corruption=args.corruption, policy=args.policy,
                       difficulty=diff[0] if len(diff) == 1 else tuple(diff),
                       mirror=args.mirror,
                       model_info={'seed': model_seed, 'n_vertices': args.vertices})
    manifest = make_manifest(args, model_hash=model.hash)
    ds.header['manifest'] = manifest
    ds.write(out)
    _write_sidecar(out, manifest)
    print(f'wrote {len(ds)} examples (G={args.grid}, P={args.parts}) to {out}')
    print(f'dataset sha256 {ds.hash}')
    return 0


def cmd_train(args):
    out = _need_out(args)
    ds = _read_dataset(args.data)
    val = _read_dataset(args.val) if args.val else None
    if val is not None:
        _check_same_model(ds, val)
    model = _model_for(ds)
    cfg = _train_config(args)
    net = RegressorNet.create(one_hot_batch([ds.examples[0].grid]).shape[1], cfg.hidden, cfg.seed)
    net, log = train(net, model, ds.camera, ds.examples, cfg, val.examples if val else None)
    manifest = make_manifest(args, model.hash, ds.hash)
    save_checkpoint(out, net, cfg.to_dict(), cfg.seed, manifest)
    _write_sidecar(out, manifest)
    log_path = _sibling(out, '.log.csv')
    _write_text(log_path, _csv_with_manifest(log_to_csv(log), manifest), manifest)
    last = [r for r in log if r['split'] == ('val' if val else 'train')][-1]
    print(f'epochs {cfg.epochs}  ' + '  '.join(f'{k} {last[k]:.4f}' for k in
                                             ('e_joints_mm', 'e_quat_rad', 'pckh_pct') if k in last))
    print(f'checkpoint {out}\nlog {log_path}')
    return 0


def cmd_sweep(args):
    out = _need_out(args)
    ds = _read_dataset(args.data)
    if not args.val:
        raise ValidationError('sweep needs --val')
    val = _read_dataset(args.val)
    _check_same_model(ds, val)
    model = _model_for(ds)
    cfg = _train_config(args)
    try:
        rows = supervision_sweep(model, ds.camera, ds.examples, val.examples,
                                 _floats(args.fractions), cfg)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    manifest = make_manifest(args, model.hash, ds.hash)
    _write_text(out, _csv_with_manifest(sweep_to_csv(rows), manifest), manifest)
    print(f'{"fraction":>9}{"e_joints":>11}{"e_quat":>9}{"pckh":>8}')
    for r in rows:
        print(f'{r["fraction"]:>9.2f}{r["e_joints_mm"]:>11.2f}{r["e_quat_rad"]:>9.3f}'
              f'{r["pckh_pct"]:>8.1f}')
    return 0


def _predictions_text(header, rows):
    lines = [json.dumps(header, sort_keys=True)]
    lines += [json.dumps(r, sort_keys=True) for r in rows]
    return '\n'.join(lines) + '\n'


def _prediction_rows(model, cam, indices, pose, rots, betas, status=None):
    joints = posed_joints(model, rots, betas)
    j2d = project(cam, joints)
    rows = []
    for k, i in enumerate(indices):
        row = {'index': int(i), 'rotations': rots[k].tolist(), 'betas': betas[k].tolist(),
               'joints3d': joints[k].tolist(), 'joints2d': j2d[k].tolist()}
        if pose is not None:
            row['pose'] = pose[k].tolist()
        if status is not None:
            row.update(status[k])
        rows.append(row)
    return rows


def cmd_fit(args):
    out = _need_out(args)
    ds = _read_dataset(args.data)
    model = _model_for(ds)
    try:
        cfg = FitConfig(max_iter=args.max_iter, lr=args.fit_lr, schedule=args.schedule,
                        tol=args.tol, init=args.init, init_sigma=args.init_sigma,
                        seed=args.seed, losses=_names(args.losses))
    except ValueError as e:
        raise ValidationError(str(e)) from None
    try:
        results, rep = fit_batch(model, ds.camera, ds.examples, cfg)
    except ValueError as e:
        raise ValidationError(str(e)) from None
    manifest = make_manifest(args, model.hash, ds.hash)
    ok = [i for i, r in enumerate(results) if r.error is None]
    pose = np.stack([r.pose for r in results]) if results else np.zeros((0, 72))
    betas = np.stack([r.betas for r in results]) if results else np.zeros((0, 10))
    status = [{'converged': r.converged, 'iterations': r.iterations, 'final_loss': r.final_loss,
               'error': r.error} for r in results]
    rows = _prediction_rows(model, ds.camera, range(len(results)), pose, as_rotations(pose),
                            betas, status)
    header = {'format': PREDICTIONS_FORMAT, 'model': ds.header['model'],
              'dataset_hash': ds.hash, 'source': 'fit', 'manifest': manifest}
    _write_text(out, _predictions_text(header, rows), manifest)
    rep_path = _sibling(out, '.report.csv')
    _write_text(rep_path, _csv_with_manifest(rep.to_csv(), manifest), manifest)
    print(rep.table())
    print(f'fitted {len(ok)}/{len(results)}  predictions {out}  report {rep_path}')
    return 0


def cmd_predict(args):
    out = _need_out(args)
    ds = _read_dataset(args.data)
    model = _model_for(ds)
    if not args.checkpoint or not os.path.exists(args.checkpoint):
        raise ValidationError('predict needs an existing --checkpoint')
    net, ck = load_checkpoint(args.checkpoint)
    want = ds.grid_size ** 2 * (ds.parts + 1)
    if net.sizes[0] != want:
        raise ValidationError(f'checkpoint expects {net.sizes[0]} inputs, grids give {want}')
    ck_model = (ck.get('manifest') or {}).get('model_hash')
    if ck_model is not None and ck_model != model.hash:
        raise ValidationError('checkpoint was trained on a different body model')
    rots, betas = forward(net, [e.grid for e in ds.examples])
    rows = _prediction_rows(model, ds.camera, range(len(ds)), None, rots, betas)
    manifest = make_manifest(args, model.hash, ds.hash)
    header = {'format': PREDICTIONS_FORMAT, 'model': ds.header['model'],
              'dataset_hash': ds.hash, 'source': 'regressor', 'manifest': manifest}
    _write_text(out, _predictions_text(header, rows), manifest)
    print(f'wrote {len(rows)} predictions to {out}')
    return 0


def _read_predictions(path):
    if not path or not os.path.exists(path):
        raise ValidationError(f'no such predictions file: {path}')
    with open(path) as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    try:
        header = json.loads(lines[0])
        rows = [json.loads(line) for line in lines[1:]]
    except (IndexError, json.JSONDecodeError) as e:
        raise ValidationError(f'{path}: unreadable predictions ({e})') from None
    if header.get('format') != PREDICTIONS_FORMAT:
        raise ValidationError(f'{path}: not a predictions file')
    return header, rows


def _pred_array(rows, key, shape):
    vals = [r.get(key) for r in rows]
    if any(v is None for v in vals):
        return None
    try:
        arr = np.asarray(vals, dtype=float)
    except ValueError:
        raise ValidationError(f'predicted {key} are ragged (K must be {N_JOINTS} everywhere)') from None
    if arr.shape[1:] != shape:
        raise ValidationError(f'predicted {key} have shape {arr.shape[1:]}, expected {shape} '
                              f'(K={N_JOINTS} joints)')
    return arr


def cmd_eval(args):
    out = _need_out(args)
    header, rows = _read_predictions(args.pred)
    truth = _read_dataset(args.truth)
    if header['model'].get('hash') != truth.header['model'].get('hash'):
        raise ValidationError('model hash of predictions and ground truth disagree')
    rows = [r for r in rows if r.get('error') is None]
    idx = [r['index'] for r in rows]
    if any(not 0 <= i < len(truth) for i in idx):
        raise ValidationError('prediction index outside the ground-truth dataset')
    gts = [truth.examples[i] for i in idx]
    pred = {'rotations': _pred_array(rows, 'rotations', (N_JOINTS, 3, 3)),
            'joints3d': _pred_array(rows, 'joints3d', (N_JOINTS, 3)),
            'joints2d': _pred_array(rows, 'joints2d', (N_JOINTS, 2))}
    gt = {}
    for key, attr, shape in (('joints3d', 'joints3d', (N_JOINTS, 3)),
                             ('joints2d', 'joints2d', (N_JOINTS, 2))):
        vals = [getattr(e, attr) for e in gts]
        if vals and all(v is not None for v in vals):
            gt[key] = np.stack(vals)
            if gt[key].shape[1:] != shape:
                raise ValidationError(f'ground-truth {key} shape {gt[key].shape[1:]}')
    if gts and all(e.pose is not None for e in gts):
        gt['rotations'] = as_rotations(np.stack([e.pose for e in gts]))
    rep = report(pred, gt, indices=idx)
    manifest = make_manifest(args, truth.header['model']['hash'], truth.hash)
    _write_text(out, _csv_with_manifest(rep.to_csv(), manifest), manifest)
    print(rep.table())
    return 0


def gradcheck_configs(seed, n=20):
    """Seeded configurations cycling through the four loss kinds."""
    rng = np.random.default_rng(seed)
    return [{'loss': LOSS_KINDS[i % len(LOSS_KINDS)], 'data_seed': int(rng.integers(1 << 31)),
             'net_seed': int(rng.integers(1 << 31)), 'parts': int(rng.choice(GRANULARITIES)),
             'batch': int(rng.integers(1, 4))} for i in range(n)]


def run_gradcheck(cfg, model, cam, n_coords=48, h=1e-6):
    """Max relative error of d(loss)/d(net weights) for one configuration.

    The net is a 2-hidden-unit micro-net with a non-trivial output layer,
    so every block passes through a genuinely non-identity SVD projection.
    """
    from .regressor import network_loss
    from .fitter import example_targets
    from .losses import AnnotationMask
    ds = build_dataset(model, cam, cfg['batch'], seed=cfg['data_seed'], grid_size=16,
                       parts=cfg['parts'])
    x = one_hot_batch([e.grid for e in ds.examples])
    targets, _ = example_targets(ds.examples)
    kinds = cfg['loss'].split('+')
    n = len(ds)
    mask = AnnotationMask(np.full(n, 'latent' in kinds), np.full(n, 'joints3d' in kinds),
                          np.full(n, 'joints2d' in kinds))
    net = RegressorNet.create(x.shape[1], hidden=(2, 2), seed=cfg['net_seed'], out_scale=0.5)
    weights = LossWeights(1.0, 1e-4, 1e-3)
    params = net.params
    sizes = np.cumsum([0] + [p.size for p in params])
    theta0 = np.concatenate([p.ravel() for p in params])
    rng = np.random.default_rng(cfg['net_seed'])
    # every layer contributes coordinates; layer one only at its active inputs
    active = np.flatnonzero(x.any(axis=0))
    first = (active[:, None] * params[0].shape[1] + np.arange(params[0].shape[1])).ravel()
    pools = [first] + [np.arange(sizes[i], sizes[i + 1]) for i in range(1, len(params))]
    per = max(1, n_coords // len(pools))
    coords = np.concatenate([rng.choice(p, min(per, p.size), replace=False) for p in pools])

    def set_theta(theta):
        for i, p in enumerate(params):
            p[...] = theta[sizes[i]:sizes[i + 1]].reshape(p.shape)

    def fn(sub):
        theta = theta0.copy()
        theta[coords] = sub
        set_theta(theta)
        value, grads, _ = network_loss(net, model, cam, x, targets, mask, weights)
        return value, np.concatenate([g.ravel() for g in grads])[coords]

    err = grad_check(fn, theta0[coords], h)
    set_theta(theta0)
    return err


def cmd_gradcheck(args):
    from .camera import default_camera
    model = generate_desk_model(args.seed % (1 << 31), 256)
    cam = default_camera()
    worst = 0.0
    failed = 0
    for i, cfg in enumerate(gradcheck_configs(args.seed, args.configs)):
        err = run_gradcheck(cfg, model, cam)
        ok = err < args.tol
        failed += not ok
        worst = max(worst, err)
        print(f'{i:3d} {cfg["loss"]:<18} P={cfg["parts"]:<3} batch={cfg["batch"]}  '
              f'max rel err {err:.2e}  {"ok" if ok else "FAIL"}')
    verdict = 'PASS' if not failed else 'FAIL'
    print(f'{verdict}: max relative error {worst:.3e} (tol {args.tol:g}) over {args.configs} configs')
    if args.out:
        manifest = make_manifest(args, model.hash)
        _write_text(args.out, json.dumps({'pass': not failed, 'max_rel_err': worst,
                                          'tol': args.tol, 'configs': args.configs,
                                          'manifest': manifest}, sort_keys=True) + '\n', manifest)
    return 0 if not failed else 1


def cmd_replay(args):
    """Re-run a command from its sidecar manifest and compare artifact hashes."""
    if not args.manifest or not os.path.exists(args.manifest):
        raise ValidationError('replay needs an existing manifest file')
    with open(args.manifest) as f:
        side = json.load(f)
    opts = dict(side['options'])
    target = args.out or side['out']
    opts['out'] = target
    ns = argparse.Namespace(**opts)
    ns.config_data = side.get('config')
    ns.func = COMMANDS[side['command']]
    status = ns.func(ns)
    if status:
        return status
    got = _sha256_file(target)
    same = got == side['artifact_sha256']
    print(f'replay {"reproduced" if same else "DIFFERS from"} {side["artifact"]} (sha256 {got[:16]})')
    return 0 if same else 1


COMMANDS = {'gen': cmd_gen, 'train': cmd_train, 'sweep': cmd_sweep, 'fit': cmd_fit,
            'predict': cmd_predict, 'eval': cmd_eval, 'gradcheck': cmd_gradcheck,
            'replay': cmd_replay}


# ----------------------------------------------------------------- parser

def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument('--seed', type=int, default=d if suppress else 0, help='root random seed')
    p.add_argument('--config', default=d, help='JSON file with default option values')
    p.add_argument('--out', default=d, help='output path')
    p.add_argument('--threads', type=int, default=d, help='BLAS thread limit')


def _train_flags(p):
    p.add_argument('--data', help='training dataset (JSONL)')
    p.add_argument('--val', help='validation dataset (JSONL)')
    p.add_argument('--epochs', type=int, default=30)
    p.add_argument('--batch-size', type=int, default=16)
    p.add_argument('--lr', type=float, default=1e-3)
    p.add_argument('--lr-schedule', default='linear', choices=('constant', 'linear', 'cosine'))
    p.add_argument('--hidden', default='256,256')
    p.add_argument('--losses', default='latent,joints3d,joints2d')
    p.add_argument('--weights', default='1,1e-4,1e-3', help='latent,joints3d,joints2d weights')
    p.add_argument('--supervision-fraction', type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog='partfit', description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest='command', required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = sub.add_parser('gen', parents=[common], help='generate a synthetic dataset')
    p.add_argument('--model-seed', type=int, default=None, help='body model seed (default: --seed)')
    p.add_argument('--vertices', type=int, default=400)
    p.add_argument('--n', type=int, default=100)
    p.add_argument('--grid', type=int, default=32)
    p.add_argument('--parts', type=int, default=12)
    p.add_argument('--corruption', type=float, default=0.0)
    p.add_argument('--policy', default='all')
    p.add_argument('--difficulty', default='0,1', help='number or "low,high"')
    p.add_argument('--mirror', action='store_true')

    p = sub.add_parser('train', parents=[common], help='train the grid regressor')
    _train_flags(p)

    p = sub.add_parser('sweep', parents=[common], help='3D-supervision fraction sweep')
    _train_flags(p)
    p.add_argument('--fractions', default='1,0.5,0.2,0.1,0')

    p = sub.add_parser('fit', parents=[common], help='fit pose and shape per example')
    p.add_argument('--data')
    p.add_argument('--losses', default='latent,joints3d,joints2d')
    p.add_argument('--max-iter', type=int, default=500)
    p.add_argument('--fit-lr', type=float, default=0.01)
    p.add_argument('--schedule', default='cosine', choices=('constant', 'linear', 'cosine'))
    p.add_argument('--tol', type=float, default=1e-9)
    p.add_argument('--init', default='perturbed-gt', choices=('zero-pose', 'perturbed-gt'))
    p.add_argument('--init-sigma', type=float, default=0.1)

    p = sub.add_parser('predict', parents=[common], help='run a trained regressor')
    p.add_argument('--data')
    p.add_argument('--checkpoint')

    p = sub.add_parser('eval', parents=[common], help='score predictions against ground truth')
    p.add_argument('--pred')
    p.add_argument('--truth')

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference gradient check')
    p.add_argument('--tol', type=float, default=1e-4)
    p.add_argument('--configs', type=int, default=20)

    p = sub.add_parser('replay', parents=[common], help='re-run from a manifest sidecar')
    p.add_argument('manifest')
    return parser


def _load_config(path):
    if path is None:
        return None
    if not os.path.exists(path):
        raise ValidationError(f'no such config file: {path}')
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ValidationError(f'{path}: {e}') from None
    if not isinstance(data, dict):
        raise ValidationError('config file must hold a JSON object')
    return data


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.config_data = _load_config(args.config)
    if args.config_data:
        # config values become defaults; explicit flags still win
        known = set(vars(args))
        section = {k: v for k, v in args.config_data.items() if not isinstance(v, dict)}
        section.update(args.config_data.get(args.command, {}))
        unknown = sorted(k.replace('-', '_') for k in section if k.replace('-', '_') not in known)
        if unknown:
            raise ValidationError(f'unknown config keys: {", ".join(unknown)}')
        defaults = {k.replace('-', '_'): v for k, v in section.items()}
        top = ('seed', 'out', 'threads', 'config')
        parser.set_defaults(**{k: v for k, v in defaults.items() if k in top})
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.set_defaults(**{k: v for k, v in defaults.items() if k not in top})
        data = args.config_data
        args = parser.parse_args(argv)
        args.config_data = data
    args.func = COMMANDS[args.command]
    return args


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        if args.threads:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                return args.func(args)
        return args.func(args)
    except (ValidationError, OSError) as e:
        print(f'partfit: error: {e}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
