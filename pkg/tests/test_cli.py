import json

import numpy as np
import pytest

from ezmsg.fedhe.cli import main, load_model, save_model

CONFIG = {
    'network': {
        'layers': [
            {'kind': 'fc', 'units': 4, 'activation': 'sigmoid', 'degree': 3},
            {'kind': 'fc', 'units': 2, 'activation': 'sigmoid', 'degree': 3},
        ],
        'learning_rate': 1.0,
        'local_batch': 2,
        'iterations': 2,
    },
    'crypto': {'backend': 'reference', 'toy': True},
    'federation': {'parties': 3, 'topology': 'tree'},
    'data': {'samples': 60, 'holdout': 0.2},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(CONFIG, indent = 2))
    return path


def test_model_files_round_trip(tmp_path) -> None:
    weights = [np.arange(6.0).reshape(3, 2), np.ones((2, 2))]
    save_model(tmp_path / 'model.npz', weights, 4)
    loaded, iteration = load_model(tmp_path / 'model.npz')
    assert iteration == 4
    for got, expected in zip(loaded, weights):
        np.testing.assert_array_equal(got, expected)


def test_train_then_predict(config, tmp_path, capsys) -> None:
    out = tmp_path / 'out'
    assert main(['train', '--config', str(config), '--output', str(out)]) == 0
    assert 'Trained 2 iterations' in capsys.readouterr().out

    records = [json.loads(line) for line in (out / 'metrics.jsonl').read_text().splitlines()]
    assert [r['iteration'] for r in records] == [1, 2]
    assert all(r['bytes'] > 0 for r in records)
    stats = json.loads((out / 'wirestats.json').read_text())
    assert stats['total']['bytes'] >= sum(r['bytes'] for r in records)
    weights, iteration = load_model(out / 'model.npz')
    assert iteration == 2
    assert [W.shape for W in weights] == [(16, 4), (4, 2)]
    # Toy runs have no plan
    assert not (out / 'plan.json').exists()

    assert main(['predict', '--config', str(config), '--output', str(out), '--rows', '3']) == 0
    assert 'oblivious predictions' in capsys.readouterr().out
    rows = (out / 'predictions.csv').read_text().splitlines()
    assert len(rows) == 3
    assert all(len(row.split(',')) == 2 for row in rows)


def test_plan_params(config, tmp_path, capsys) -> None:
    out = tmp_path / 'plan'
    assert main(['plan-params', '--config', str(config), '--output', str(out)]) == 0
    plan = json.loads((out / 'plan.json').read_text())
    assert plan['ring_dim'] >= 4096
    assert plan['tau'] == plan['bootstrap_level'] + 1
    assert 'ring_dim' in capsys.readouterr().out


def test_bench(config, tmp_path, capsys) -> None:
    assert main(['bench', '--config', str(config), '--output', str(tmp_path / 'bench'), '--rows', '2']) == 0
    printed = capsys.readouterr().out
    assert 'predicted rotations' in printed
    assert 'encrypted' in printed and 'cleartext' in printed


def test_errors_exit_with_two(tmp_path, capsys) -> None:
    bad = tmp_path / 'bad.json'
    bad.write_text('{"crypto": {}}')
    assert main(['train', '--config', str(bad)]) == 2
    assert capsys.readouterr().out.startswith('error:')
    assert main(['train', '--config', str(tmp_path / 'missing.json')]) == 2
    with pytest.raises(SystemExit):
        main(['gossip', '--config', str(bad)])


def test_zero_iterations_write_the_initial_model(tmp_path) -> None:
    data = json.loads(json.dumps(CONFIG))
    data['network']['iterations'] = 0
    path = tmp_path / 'run.json'
    path.write_text(json.dumps(data))
    out = tmp_path / 'out'
    assert main(['train', '--config', str(path), '--output', str(out)]) == 0
    assert (out / 'metrics.jsonl').read_text() == ''
    _, iteration = load_model(out / 'model.npz')
    assert iteration == 0
