import json
import os

import pytest

from partfit.cli import main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope='module')
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp('cli')
    tr, va = d / 'train.jsonl', d / 'val.jsonl'
    assert run('gen', '--seed', 1, '--model-seed', 0, '--vertices', 200, '--n', 12,
               '--grid', 16, '--parts', 6, '--out', tr) == 0
    assert run('gen', '--seed', 2, '--model-seed', 0, '--vertices', 200, '--n', 6,
               '--grid', 16, '--parts', 6, '--out', va) == 0
    return d, tr, va


def _sha(path):
    import hashlib
    return hashlib.sha256(open(path, 'rb').read()).hexdigest()


def test_gen_is_deterministic_and_embeds_manifest(data, tmp_path):
    d, tr, _ = data
    again = tmp_path / 'again.jsonl'
    run('gen', '--seed', 1, '--model-seed', 0, '--vertices', 200, '--n', 12, '--grid', 16,
        '--parts', 6, '--out', again)
    assert _sha(again) == _sha(tr)
    header = json.loads(open(tr).readline())
    assert header['manifest']['command'] == 'gen' and header['manifest']['model_hash']
    side = json.load(open(str(tr) + '.manifest.json'))
    assert side['artifact_sha256'] == _sha(tr) and 'timestamp' in side


def test_train_predict_eval_replay(data, tmp_path, capsys):
    d, tr, va = data
    ck = tmp_path / 'net.json'
    assert run('train', '--data', tr, '--val', va, '--epochs', 2, '--hidden', '32,32',
               '--out', ck) == 0
    log = open(tmp_path / 'net.log.csv').read().splitlines()
    assert log[0].startswith('# manifest ') and log[1].startswith('epoch,split')
    pred = tmp_path / 'pred.jsonl'
    assert run('predict', '--data', va, '--checkpoint', ck, '--out', pred) == 0
    rep = tmp_path / 'rep.csv'
    assert run('eval', '--pred', pred, '--truth', va, '--out', rep) == 0
    lines = open(rep).read().splitlines()
    assert lines[1].startswith('example,e_joints_mm') and lines[-2].startswith('mean,')
    # replay into a fresh path reproduces the checkpoint byte for byte
    again = tmp_path / 'net2.json'
    assert run('replay', str(ck) + '.manifest.json', '--out', again) == 0
    assert _sha(again) == _sha(ck)


def test_fit_and_sweep(data, tmp_path):
    d, tr, va = data
    out = tmp_path / 'fit.jsonl'
    assert run('fit', '--data', va, '--losses', 'joints3d', '--max-iter', 50, '--out', out) == 0
    assert os.path.exists(tmp_path / 'fit.report.csv')
    sw = tmp_path / 'sweep.csv'
    assert run('sweep', '--data', tr, '--val', va, '--epochs', 1, '--hidden', '16,16',
               '--fractions', '1,0', '--out', sw) == 0
    rows = open(sw).read().splitlines()
    assert rows[1] == 'fraction,e_joints_mm,e_quat_rad,pckh_pct' and len(rows) == 4
    assert run('sweep', '--data', tr, '--val', va, '--fractions', '0,1', '--out', sw) == 1


def test_gradcheck_small(tmp_path, capsys):
    out = tmp_path / 'gc.json'
    assert run('gradcheck', '--seed', 7, '--tol', 1e-4, '--configs', 4, '--out', out) == 0
    res = json.load(open(out))
    assert res['pass'] and res['max_rel_err'] < 1e-4
    assert 'PASS' in capsys.readouterr().out


def test_eval_rejects_mismatches(data, tmp_path):
    d, tr, va = data
    pred = tmp_path / 'pred.jsonl'
    run('fit', '--data', va, '--losses', 'joints3d', '--max-iter', 5, '--out', pred)
    lines = open(pred).read().splitlines()
    row = json.loads(lines[1])
    row['joints3d'] = row['joints3d'][:20]
    bad = tmp_path / 'bad.jsonl'
    bad.write_text('\n'.join([lines[0], json.dumps(row)] + lines[2:]) + '\n')
    assert run('eval', '--pred', bad, '--truth', va, '--out', tmp_path / 'r.csv') == 1
    other = tmp_path / 'other.jsonl'
    run('gen', '--seed', 2, '--model-seed', 5, '--vertices', 200, '--n', 6, '--grid', 16,
        '--parts', 6, '--out', other)
    assert run('eval', '--pred', pred, '--truth', other, '--out', tmp_path / 'r.csv') == 1


def test_usage_and_validation_exit_codes(data, tmp_path):
    with pytest.raises(SystemExit) as e:
        run('gen', '--bogus')
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        run('launch')
    assert e.value.code == 2
    assert run('gen', '--n', 3) == 1                              # no --out
    assert run('gen', '--parts', 5, '--out', tmp_path / 'x') == 1
    assert run('train', '--data', tmp_path / 'missing.jsonl', '--out', tmp_path / 'n') == 1
    assert run('gen', '--n', 2, '--out', tmp_path / 'no' / 'such' / 'dir.jsonl') == 1
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'gen': {'colour': 'red'}}))
    assert run('--config', cfg, 'gen', '--out', tmp_path / 'x') == 1


def test_config_defaults_and_flag_precedence(tmp_path):
    cfg = tmp_path / 'cfg.json'
    cfg.write_text(json.dumps({'seed': 3, 'gen': {'n': 4, 'grid': 16, 'vertices': 200,
                                                   'parts': 3}}))
    a, b = tmp_path / 'a.jsonl', tmp_path / 'b.jsonl'
    assert run('--config', cfg, 'gen', '--out', a) == 0
    assert run('--config', cfg, 'gen', '--n', 2, '--out', b) == 0
    ha, hb = json.loads(open(a).readline()), json.loads(open(b).readline())
    assert ha['seed'] == 3 and ha['parts'] == 3
    assert len(open(a).read().splitlines()) == 5 and len(open(b).read().splitlines()) == 3
    assert hb['manifest']['options']['n'] == 2
