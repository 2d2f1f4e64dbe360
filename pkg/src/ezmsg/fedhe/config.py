import json
import typing
import dataclasses

from dataclasses import field
from pathlib import Path

import ezmsg.core as ez

from .network import LayerSpec, NetworkSpec
from .federation import TOPOLOGIES
from .netsim import DEFAULT_DELAY_MS, DEFAULT_BANDWIDTH_GBPS
from .errors import ConfigError, FedHEError

BACKENDS = ('real', 'reference')

# Toy runs default to a shallow mask so a refresh fits a short chain
TOY_LEVELS = 7
TOY_MASK_BITS = 16


class NetworkSettings(ez.Settings):
    layers: typing.Tuple[LayerSpec, ...]
    input_shape: typing.Optional[typing.Tuple[int, ...]] = None
    learning_rate: float = 1.0
    local_batch: int = 1
    iterations: int = 1
    momentum: float = 0.0
    nesterov: bool = False

    def spec(self, input_dim: typing.Optional[int] = None) -> NetworkSpec:
        """ input_dim stands in for a missing input_shape, e.g. the padded feature count """
        shape = self.input_shape if self.input_shape is not None else (input_dim,)
        if shape == (None,):
            raise ConfigError('network.input_shape is unset and no dataset fixes it')
        return NetworkSpec(
            input_shape = shape,
            layers = self.layers,
            learning_rate = self.learning_rate,
            local_batch = self.local_batch,
            iterations = self.iterations,
            momentum = self.momentum,
            nesterov = self.nesterov,
        )


class CryptoSettings(ez.Settings):
    backend: str = 'reference'
    # ring_dim or levels left unset are chosen by the planner (or the toy defaults)
    ring_dim: typing.Optional[int] = None
    levels: typing.Optional[int] = None
    scale_bits: int = 32
    security: int = 128
    toy: bool = False
    lambda_mask: typing.Optional[int] = None
    msg_bits: typing.Optional[int] = None
    boot_level: typing.Optional[int] = None

    @property
    def mask_bits(self) -> typing.Optional[int]:
        if self.lambda_mask is None and self.toy:
            return TOY_MASK_BITS
        return self.lambda_mask


class FederationSettings(ez.Settings):
    parties: int = 3
    topology: str = 'tree'
    seed: int = 0
    shard_seed: int = 0
    normalize: bool = False


class DataSettings(ez.Settings):
    source: str = 'synthetic'
    samples: int = 699
    holdout: float = 0.2
    label_columns: int = 1


class NetsimSettings(ez.Settings):
    delay_ms: float = DEFAULT_DELAY_MS
    bandwidth_gbps: float = DEFAULT_BANDWIDTH_GBPS


class RunSettings(ez.Settings):
    network: NetworkSettings
    crypto: CryptoSettings = field(default_factory = CryptoSettings)
    federation: FederationSettings = field(default_factory = FederationSettings)
    data: DataSettings = field(default_factory = DataSettings)
    netsim: NetsimSettings = field(default_factory = NetsimSettings)
    output: Path = Path('fedhe-out')
    source: typing.Optional[Path] = None


SECTIONS: typing.Dict[str, type] = dict(
    crypto = CryptoSettings,
    federation = FederationSettings,
    data = DataSettings,
    netsim = NetsimSettings,
)

_LAYER_KEYS = frozenset(f.name for f in dataclasses.fields(LayerSpec))


def _line_of(text: str, keys: typing.Sequence[str]) -> typing.Optional[int]:
    """ Line of the last key in keys, searching each key after the previous one """
    pos = 0
    for key in keys:
        idx = text.find(f'"{key}"', pos)
        if idx < 0:
            break
        pos = idx
    return text.count('\n', 0, pos) + 1 if keys else None


class _Reader:
    """ Builds settings from the parsed document, pinning errors to source lines """

    def __init__(self, text: str, path: typing.Optional[Path]) -> None:
        self.text = text
        self.path = path

    def fail(self, message: str, *keys: str) -> typing.NoReturn:
        raise ConfigError(message, self.path or '<config>', _line_of(self.text, keys))

    def section(self, name: str, cls: type, raw: typing.Any) -> typing.Any:
        if not isinstance(raw, dict):
            self.fail(f'{name} must be an object', name)
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in raw.items():
            if key not in known:
                self.fail(f'Unknown key {name}.{key}', name, key)
            self.check_type(f'{name}.{key}', value, known[key].type, name, key)
        return cls(**raw)

    def check_type(self, where: str, value: typing.Any, annotation: typing.Any, *keys: str) -> None:
        allowed = typing.get_args(annotation) or (annotation,)
        if value is None:
            if type(None) not in allowed:
                self.fail(f'{where} may not be null', *keys)
            return
        if isinstance(value, bool):
            ok = bool in allowed
        elif isinstance(value, int):
            ok = int in allowed or float in allowed
        elif isinstance(value, float):
            ok = float in allowed
        else:
            ok = any(isinstance(value, t) for t in allowed if isinstance(t, type))
        if not ok:
            self.fail(f'{where} has the wrong type ({type(value).__name__})', *keys)

    def layers(self, raw: typing.Any) -> typing.Tuple[LayerSpec, ...]:
        if not isinstance(raw, list) or not raw:
            self.fail('network.layers must be a non-empty list', 'network', 'layers')
        out = []
        for i, layer in enumerate(raw):
            if not isinstance(layer, dict):
                self.fail(f'network.layers[{i}] must be an object', 'network', 'layers')
            unknown = set(layer) - _LAYER_KEYS
            if unknown:
                self.fail(f'Unknown keys {sorted(unknown)} in network.layers[{i}]', 'network', 'layers', sorted(unknown)[0])
            layer = dict(layer)
            if 'interval' in layer:
                layer['interval'] = tuple(layer['interval'])
            try:
                out.append(LayerSpec(**layer))
            except (FedHEError, TypeError, ValueError) as e:
                self.fail(f'network.layers[{i}]: {e}', 'network', 'layers')
        return tuple(out)

    def network(self, raw: typing.Any) -> NetworkSettings:
        if not isinstance(raw, dict):
            self.fail('network must be an object', 'network')
        if 'layers' not in raw:
            self.fail('network.layers is required', 'network')
        known = {f.name: f for f in dataclasses.fields(NetworkSettings)}
        values = {}
        for key, value in raw.items():
            if key not in known:
                self.fail(f'Unknown key network.{key}', 'network', key)
            if key == 'layers':
                values[key] = self.layers(value)
            elif key == 'input_shape':
                if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                    self.fail('network.input_shape must be a list of integers', 'network', key)
                values[key] = tuple(value)
            else:
                self.check_type(f'network.{key}', value, known[key].type, 'network', key)
                values[key] = value
        settings = NetworkSettings(**values)
        try:
            settings.spec(input_dim = 1)
        except FedHEError as e:
            self.fail(f'network: {e}', 'network')
        return settings

    def validate(self, settings: RunSettings) -> None:
        crypto, fed, data, sim = settings.crypto, settings.federation, settings.data, settings.netsim
        if crypto.backend not in BACKENDS:
            self.fail(f'crypto.backend must be one of {BACKENDS}', 'crypto', 'backend')
        if crypto.ring_dim is not None and (crypto.ring_dim < 4 or crypto.ring_dim & (crypto.ring_dim - 1)):
            self.fail(f'crypto.ring_dim={crypto.ring_dim} is not a power of two', 'crypto', 'ring_dim')
        if crypto.levels is not None and crypto.levels < 1:
            self.fail('crypto.levels must be positive', 'crypto', 'levels')
        if not 8 <= crypto.scale_bits <= 40:
            self.fail(f'crypto.scale_bits={crypto.scale_bits} outside [8, 40]', 'crypto', 'scale_bits')
        if crypto.security not in (128, 192, 256):
            self.fail(f'crypto.security={crypto.security} is not tabulated', 'crypto', 'security')
        if fed.parties < 1:
            self.fail('federation.parties must be positive', 'federation', 'parties')
        if fed.topology not in TOPOLOGIES:
            self.fail(f'federation.topology must be one of {TOPOLOGIES}', 'federation', 'topology')
        if not 0.0 <= data.holdout < 1.0:
            self.fail('data.holdout must lie in [0, 1)', 'data', 'holdout')
        if data.samples < 1 or data.label_columns < 1:
            self.fail('data.samples and data.label_columns must be positive', 'data')
        if sim.delay_ms < 0.0 or sim.bandwidth_gbps <= 0.0:
            self.fail('netsim needs delay_ms >= 0 and bandwidth_gbps > 0', 'netsim')

    def read(self) -> RunSettings:
        try:
            raw = json.loads(self.text)
        except json.JSONDecodeError as e:
            raise ConfigError(e.msg, self.path or '<config>', e.lineno)
        if not isinstance(raw, dict):
            self.fail('The run config must be a JSON object')
        if 'network' not in raw:
            self.fail('network is required')
        unknown = set(raw) - set(SECTIONS) - {'network', 'output'}
        if unknown:
            self.fail(f'Unknown top-level key {sorted(unknown)[0]!r}', sorted(unknown)[0])

        kwargs: typing.Dict[str, typing.Any] = dict(network = self.network(raw['network']))
        for name, cls in SECTIONS.items():
            if name in raw:
                kwargs[name] = self.section(name, cls, raw[name])
        if 'output' in raw:
            output = raw['output']
            if isinstance(output, dict):
                output = output.get('directory')
            if not isinstance(output, str):
                self.fail('output must be a directory name', 'output')
            kwargs['output'] = Path(output)
        settings = RunSettings(source = self.path, **kwargs)
        self.validate(settings)
        return settings


def parse_config(text: str, path: typing.Optional[typing.Union[str, Path]] = None) -> RunSettings:
    return _Reader(text, Path(path) if path is not None else None).read()


def load_config(path: typing.Union[str, Path]) -> RunSettings:
    path = Path(path).expanduser()
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f'Cannot read config: {e.strerror}', path)
    settings = parse_config(text, path)
    ez.logger.info(f'Loaded run config {path}')
    return settings


def with_overrides(
    settings: RunSettings,
    seed: typing.Optional[int] = None,
    backend: typing.Optional[str] = None,
    toy: typing.Optional[bool] = None,
    output: typing.Optional[Path] = None
) -> RunSettings:
    """ Command-line flags win over the file """
    crypto, fed = settings.crypto, settings.federation
    if backend is not None:
        if backend not in BACKENDS:
            raise ConfigError(f'Unknown backend {backend!r}')
        crypto = dataclasses.replace(crypto, backend = backend)
    if toy is not None:
        crypto = dataclasses.replace(crypto, toy = toy)
    if seed is not None:
        fed = dataclasses.replace(fed, seed = seed, shard_seed = seed)
    changes: typing.Dict[str, typing.Any] = dict(crypto = crypto, federation = fed)
    if output is not None:
        changes['output'] = output
    return dataclasses.replace(settings, **changes)
