import json

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from partfit.body_model import N_JOINTS
from partfit.kinematics import DegenerateMatrixError
from partfit.losses import LossWeights
from partfit.regressor import (N_OUTPUTS, SWEEP_COLUMNS, RegressorNet, TrainConfig,
                               TrainingDivergedError, _gt, evaluate, forward, load_checkpoint,
                               log_to_csv, mlp_forward, network_loss, save_checkpoint,
                               supervision_masks, supervision_sweep, sweep_to_csv, train)
from partfit.losses import AnnotationMask
from partfit.synth import build_dataset, one_hot_batch


@pytest.fixture(scope='module')
def small_sets(model, cam):
    tr = build_dataset(model, cam, 120, seed=11, grid_size=16, parts=6, difficulty=(0.0, 1.0))
    va = build_dataset(model, cam, 40, seed=12, grid_size=16, parts=6, difficulty=(0.0, 1.0))
    return tr.examples, va.examples


def _net(examples, **kw):
    return RegressorNet.create(one_hot_batch([examples[0].grid]).shape[1], **kw)


def test_output_size_and_identity_init(small_sets):
    tr, _ = small_sets
    net = _net(tr)
    assert net.sizes[0] == 16 * 16 * 7 and net.sizes[-1] == N_OUTPUTS == 226
    rots, betas = forward(net, [e.grid for e in tr[:5]])
    assert np.abs(rots - np.eye(3)).max() < 0.05
    assert np.abs(betas).max() < 0.05


def test_zero_weight_net_is_degenerate(small_sets):
    tr, _ = small_sets
    net = _net(tr)
    net = RegressorNet([np.zeros_like(w) for w in net.weights],
                       [np.zeros_like(b) for b in net.biases])
    with pytest.raises(DegenerateMatrixError) as err:
        forward(net, [tr[0].grid])
    assert 'part 0' in str(err.value)


def test_micro_net_end_to_end_gradient(small_model, cam, small_sets):
    tr, _ = small_sets
    rng = np.random.default_rng(0)
    net = RegressorNet.create(16 * 16 * 7, hidden=(2, 2), seed=3, out_scale=0.5)
    batch = tr[:3]
    x = one_hot_batch([e.grid for e in batch])
    targets, _ = _gt(batch)
    mask = AnnotationMask(True, np.array([True, False, True]), True)
    w = LossWeights(1.0, 1e-4, 1e-3)
    _, grads, _ = network_loss(net, small_model, cam, x, targets, mask, w)
    active = np.flatnonzero(x.any(axis=0))
    worst = 0.0
    for li, p in enumerate(net.params):
        flat = p.reshape(-1)
        if li == 0:
            coords = [r * p.shape[1] + c for r in rng.choice(active, 4) for c in range(p.shape[1])]
        else:
            coords = rng.choice(flat.size, min(flat.size, 8), replace=False)
        for k in coords:
            old = flat[k]
            flat[k] = old + 1e-6
            fp = network_loss(net, small_model, cam, x, targets, mask, w, with_grads=False)[0]
            flat[k] = old - 1e-6
            fm = network_loss(net, small_model, cam, x, targets, mask, w, with_grads=False)[0]
            flat[k] = old
            num = (fp - fm) / 2e-6
            worst = max(worst, abs(grads[li].reshape(-1)[k] - num) / max(1.0, abs(num)))
    assert worst < 1e-4


def test_sparse_first_layer_gradient_matches_dense(model, cam, small_sets):
    tr, _ = small_sets
    net = _net(tr)
    x = one_hot_batch([e.grid for e in tr[:4]])
    targets, _ = _gt(tr[:4])
    rows = np.flatnonzero(x.any(axis=0))
    m = AnnotationMask()
    _, dense, _ = network_loss(net, model, cam, x, targets, m, LossWeights())
    _, sparse, _ = network_loss(net, model, cam, x, targets, m, LossWeights(), input_rows=rows)
    assert np.allclose(dense[0][rows], sparse[0])
    assert np.all(dense[0][np.setdiff1d(np.arange(x.shape[1]), rows)] == 0)


def test_overfit_single_example(model, cam, small_sets):
    tr, _ = small_sets
    one = tr[:1]
    cfg = TrainConfig(epochs=2000, batch_size=1, losses=('latent',), eval_train=False)
    net, log = train(_net(one), model, cam, one, cfg)
    assert log[-1]['loss'] < 0.01 * log[0]['loss']


def test_training_is_deterministic(model, cam, small_sets):
    tr, va = small_sets
    cfg = TrainConfig(epochs=2, eval_train=False)
    a, la = train(_net(tr), model, cam, tr, cfg, val=va)
    b, lb = train(_net(tr), model, cam, tr, cfg, val=va)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    assert log_to_csv(la) == log_to_csv(lb)
    assert [r['split'] for r in la] == ['train', 'val', 'train', 'val']


def test_training_improves_validation(model, cam, small_sets):
    tr, va = small_sets
    net = _net(tr)
    before = evaluate(net, model, cam, va)
    trained, _ = train(net, model, cam, tr, TrainConfig(epochs=5, eval_train=False))
    after = evaluate(trained, model, cam, va)
    assert after['e_joints_mm'].mean() < before['e_joints_mm'].mean()
    assert after['e_quat_rad'].mean() < before['e_quat_rad'].mean()


def test_divergence_raises(model, cam, small_sets):
    tr, _ = small_sets
    net = _net(tr)
    net.weights[-1][:] = np.nan
    with pytest.raises((TrainingDivergedError, ValueError)):
        train(net, model, cam, tr[:4], TrainConfig(epochs=1, eval_train=False))


def test_train_validation(model, cam, small_sets):
    tr, _ = small_sets
    with pytest.raises(ValueError):
        train(_net(tr), model, cam, [], TrainConfig(epochs=1))
    for bad in (dict(epochs=0), dict(batch_size=0), dict(supervision_fraction=1.5),
                dict(losses=()), dict(losses=('nope',))):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    cfg = TrainConfig(epochs=3, supervision_fraction=0.2)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_supervision_masks():
    ex = list(range(50))
    a = supervision_masks(ex, 0.2, seed=4)
    assert sum(m.has_latent for m in a) == 10
    assert all(m.has_latent == m.has_3d and m.has_2d for m in a)
    assert a == supervision_masks(ex, 0.2, seed=4)
    assert a != supervision_masks(ex, 0.2, seed=5)
    assert not any(m.has_3d for m in supervision_masks(ex, 0.0, 0))


def test_sweep_rows_and_consistency(model, cam, small_sets):
    tr, va = small_sets
    cfg = TrainConfig(epochs=1, eval_train=False)
    rows = supervision_sweep(model, cam, tr, va, [1.0, 0.0], cfg)
    assert [r['fraction'] for r in rows] == [1.0, 0.0]
    plain, _ = train(RegressorNet.create(one_hot_batch([tr[0].grid]).shape[1], cfg.hidden, cfg.seed),
                     model, cam, tr, TrainConfig(epochs=1, eval_train=False, supervision_fraction=1.0))
    m = evaluate(plain, model, cam, va)
    assert rows[0]['e_joints_mm'] == m['e_joints_mm'].mean()
    text = sweep_to_csv(rows)
    assert text.splitlines()[0] == ','.join(SWEEP_COLUMNS)
    for bad in ([0.0, 1.0], [1.0, 0.5], [0.5, 0.0]):
        with pytest.raises(ValueError):
            supervision_sweep(model, cam, tr, va, bad, cfg)


def test_checkpoint_round_trip(tmp_path, small_sets):
    tr, _ = small_sets
    net = _net(tr, seed=5)
    path = tmp_path / 'net.json'
    save_checkpoint(path, net, TrainConfig().to_dict(), 5)
    back, doc = load_checkpoint(path)
    assert all(np.array_equal(p, q) for p, q in zip(net.params, back.params))
    assert back.input_scale == net.input_scale and doc['seed'] == 5
    doc['sizes'][-1] = 100
    with pytest.raises(ValueError):
        RegressorNet.from_dict(doc)
    with pytest.raises(ValueError):
        RegressorNet.from_dict({'format': 'something-else'})


def test_mirrored_pairs_share_loss_distribution(model, cam):
    tr = build_dataset(model, cam, 300, seed=21, grid_size=16, parts=12, difficulty=(0.0, 1.0),
                       mirror=True).examples
    va = build_dataset(model, cam, 150, seed=22, grid_size=16, parts=12, difficulty=(0.0, 1.0),
                       mirror=True).examples
    net, _ = train(_net(tr), model, cam, tr, TrainConfig(epochs=6, eval_train=False))
    orig = [e for e in va if not e.mirrored]
    mirr = [e for e in va if e.mirrored]
    losses = []
    for part in (orig, mirr):
        x = one_hot_batch([e.grid for e in part])
        t, _ = _gt(part)
        _, _, lv = network_loss(net, model, cam, x, t, AnnotationMask(), LossWeights(1, 1e-4, 1e-3),
                                with_grads=False)
        losses.append(lv.value)
    assert mannwhitneyu(losses[0], losses[1]).pvalue > 0.01
    # the pairs are not trivially identical
    assert not np.allclose(losses[0], losses[1])
