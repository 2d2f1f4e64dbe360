import csv
import logging
import typing

from dataclasses import fields
from pathlib import Path

import numpy as np

import ezmsg.core as ez

from .config import RunSettings, load_config, with_overrides, BACKENDS
from .session import build_session, load_dataset, resolve_params
from .cost import check_plan, comm_estimate, profile_iteration, rotation_budget
from .federation import write_metrics
from .ledger import Counters
from .plaintext import PlaintextTrainer, accuracy
from .errors import FedHEError, PlanningError

METRICS_FILE = 'metrics.jsonl'
WIRESTATS_FILE = 'wirestats.json'
PLAN_FILE = 'plan.json'
MODEL_FILE = 'model.npz'
PREDICTIONS_FILE = 'predictions.csv'


def _prepare_output(settings: RunSettings) -> Path:
    out = settings.output
    out.mkdir(parents = True, exist_ok = True)
    return out


def save_model(path: Path, weights: typing.Sequence[np.ndarray], iteration: int) -> None:
    np.savez(path, iteration = iteration, **{f'layer{i}': W for i, W in enumerate(weights)})


def load_model(path: Path) -> typing.Tuple[typing.List[np.ndarray], int]:
    with np.load(path) as f:
        layers = sorted((k for k in f.files if k.startswith('layer')), key = lambda k: int(k[5:]))
        return [f[k] for k in layers], int(f['iteration'])


def train(settings: RunSettings, graph: bool = False) -> int:
    out = _prepare_output(settings)
    if graph:
        from .units import run_graph
        run_graph(settings, out / 'metrics-stream.txt')
        return 0

    session = build_session(settings)
    federation = session.federation
    metrics_path = out / METRICS_FILE
    metrics_path.write_text('')

    model = federation.prepare_phase()
    model, history = federation.train(
        model = model,
        on_iteration = lambda m: write_metrics(metrics_path, [m])
    )

    save_model(out / MODEL_FILE, federation.decrypt_model(model), model.iteration)
    session.net.stats.write(out / WIRESTATS_FILE)
    if session.plan is not None:
        session.plan.write(out / PLAN_FILE)

    total = session.net.stats.total
    summary = f'Trained {model.iteration} iterations: {total.bytes} bytes in {total.messages} messages'
    if history and history[-1].accuracy is not None:
        summary += f', holdout accuracy {history[-1].accuracy:.3f}'
    ez.logger.info(summary)
    print(summary)
    return 0


def predict(settings: RunSettings, model_path: typing.Optional[Path], rows: int, querier_seed: int) -> int:
    out = _prepare_output(settings)
    session = build_session(settings)
    federation = session.federation
    model_path = out / MODEL_FILE if model_path is None else model_path
    weights, iteration = load_model(model_path)

    # The stored weights are re-encrypted under a fresh collective key
    model = federation.prepare_phase(weights = weights)
    rows_X = session.test if len(session.test) else session.train
    X, Y = rows_X.X[:rows], rows_X.Y[:rows]
    predictions = federation.predict(model, X, querier_seed)

    with (out / PREDICTIONS_FILE).open('w', newline = '') as f:
        writer = csv.writer(f)
        for row in predictions:
            writer.writerow([f'{v:.6f}' for v in row])
    session.net.stats.write(out / WIRESTATS_FILE)
    print(f'{len(predictions)} oblivious predictions from iteration {iteration}, accuracy {accuracy(predictions, Y):.3f}')
    return 0


def plan_params(settings: RunSettings) -> int:
    out = _prepare_output(settings)
    network = settings.network
    input_dim = None
    if network.input_shape is None:
        input_dim = load_dataset(settings.data, settings.federation.shard_seed).features
    spec = network.spec(input_dim)
    parties = settings.federation.parties
    _, plan = resolve_params(with_overrides(settings, toy = False).crypto, spec, parties)
    violated = check_plan(plan)
    if violated:
        raise PlanningError(f'Planned parameters violate {violated}')
    plan.write(out / PLAN_FILE)
    print(plan.describe())
    return 0


def _table(rows: typing.Sequence[typing.Sequence[typing.Any]]) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    return '\n'.join('  '.join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows)


def bench(settings: RunSettings, rows: int) -> int:
    """ Counter table of one LGD and one update, then encrypted and cleartext predictions side by side """
    session = build_session(settings)
    federation = session.federation
    spec = session.spec
    parties = settings.federation.parties

    profile = profile_iteration(
        spec, session.params, parties,
        seed = settings.federation.seed,
        mask_bits = session.ev.mask_bits,
        message_bits = session.ev.message_bits,
        boot_level = settings.crypto.boot_level,
    )
    predicted = spec.local_batch * rotation_budget(spec)
    table = [('operation', 'lgd', 'update')]
    for f in fields(Counters):
        table.append((f.name, getattr(profile.lgd, f.name), getattr(profile.update, f.name)))
    table.append(('predicted rotations', predicted, 0))
    print(_table(table))

    estimate = comm_estimate(session.params, spec, parties, profile)
    print(_table([
        ('traffic', 'bytes'),
        ('map', estimate.map),
        ('combine', estimate.combine),
        ('lgd refresh', estimate.lgd_refresh),
        ('reduce refresh', estimate.reduce_refresh),
        ('total', estimate.total),
    ]))

    model = federation.prepare_phase()
    source = session.test if len(session.test) else session.train
    X = source.X[:rows]
    encrypted = federation.predict(model, X)
    clear = PlaintextTrainer(federation.plan, federation.decrypt_model(model))
    side = [('row', 'encrypted', 'cleartext')]
    for i, (x, y) in enumerate(zip(X, encrypted)):
        side.append((i, np.array2string(y, precision = 4), np.array2string(clear.predict(x), precision = 4)))
    print(_table(side))
    return 0


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:

    import argparse

    parser = argparse.ArgumentParser(
        description = 'Federated neural network training under multiparty CKKS'
    )

    parser.add_argument(
        'command',
        choices = ('train', 'predict', 'plan-params', 'bench'),
        help = 'What to run'
    )

    parser.add_argument(
        '--config',
        type = lambda x: Path(x).expanduser(),
        help = 'JSON run config',
        required = True
    )

    parser.add_argument(
        '--seed',
        type = int,
        help = 'Override federation.seed and the shard seed',
        default = None
    )

    parser.add_argument(
        '--backend',
        choices = BACKENDS,
        help = 'Override crypto.backend',
        default = None
    )

    parser.add_argument(
        '--toy',
        action = 'store_true',
        help = 'Insecure toy ring dimensions for quick runs',
        default = None
    )

    parser.add_argument(
        '--output',
        type = lambda x: Path(x).expanduser(),
        help = 'Override the output directory',
        default = None
    )

    parser.add_argument(
        '--model',
        type = lambda x: Path(x).expanduser(),
        help = f'Weights for predict (default: <output>/{MODEL_FILE})',
        default = None
    )

    parser.add_argument(
        '--rows',
        type = int,
        help = 'Rows to predict in predict and bench',
        default = 8
    )

    parser.add_argument(
        '--graph',
        action = 'store_true',
        help = 'Train inside an ezmsg graph with a MessageLogger'
    )

    parser.add_argument(
        '--verbose',
        action = 'store_true',
        help = 'Debug logging'
    )

    class Args:
        command: str
        config: Path
        seed: typing.Optional[int]
        backend: typing.Optional[str]
        toy: typing.Optional[bool]
        output: typing.Optional[Path]
        model: typing.Optional[Path]
        rows: int
        graph: bool
        verbose: bool

    args = parser.parse_args(argv, namespace = Args)

    if args.verbose:
        ez.logger.setLevel(logging.DEBUG)

    try:
        settings = with_overrides(
            load_config(args.config),
            seed = args.seed,
            backend = args.backend,
            toy = args.toy,
            output = args.output
        )
        if args.command == 'train':
            return train(settings, graph = args.graph)
        if args.command == 'predict':
            return predict(settings, args.model, args.rows, querier_seed = settings.federation.seed + 1)
        if args.command == 'plan-params':
            return plan_params(settings)
        return bench(settings, args.rows)

    except FedHEError as e:
        ez.logger.error(str(e))
        print(f'error: {e}')
        return 2


if __name__ == '__main__':
    raise SystemExit(main())
