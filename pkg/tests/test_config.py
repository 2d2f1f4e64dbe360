import json

from pathlib import Path

import pytest

from ezmsg.fedhe.config import load_config, parse_config, with_overrides
from ezmsg.fedhe.errors import ConfigError

BASE = '''{
  "network": {
    "layers": [
      {"kind": "fc", "units": 4},
      {"kind": "fc", "units": 2, "activation": "tanh", "degree": 7}
    ],
    "input_shape": [4],
    "learning_rate": 0.5,
    "local_batch": 2
  },
  "crypto": {
    "backend": "reference",
    "toy": true
  },
  "federation": {"parties": 4, "topology": "star"},
  "output": "runs/demo"
}
'''


def with_line(text: str, after: str, line: str) -> str:
    """ Insert line right after the first line containing after """
    lines = text.splitlines()
    idx = next(i for i, row in enumerate(lines) if after in row)
    return '\n'.join(lines[: idx + 1] + [line] + lines[idx + 1:])


def test_parse_full_config() -> None:
    settings = parse_config(BASE)
    spec = settings.network.spec()
    assert spec.dims == (4, 4, 2)
    assert spec.layers[1].activation == 'tanh'
    assert spec.learning_rate == 0.5
    assert settings.crypto.toy
    assert settings.crypto.mask_bits == 16
    assert settings.federation.parties == 4
    assert settings.federation.topology == 'star'
    assert settings.output == Path('runs/demo')
    # Defaults fill the rest
    assert settings.data.source == 'synthetic'
    assert settings.netsim.delay_ms == pytest.approx(0.17)


def test_only_layers_are_required() -> None:
    settings = parse_config('{"network": {"layers": [{"kind": "fc", "units": 2}]}}')
    assert settings.network.spec(input_dim = 16).input_shape == (16,)
    assert settings.crypto.backend == 'reference'
    assert settings.crypto.mask_bits is None
    with pytest.raises(ConfigError):
        settings.network.spec()
    with pytest.raises(ConfigError):
        parse_config('{"network": {"learning_rate": 1.0}}')
    with pytest.raises(ConfigError):
        parse_config('{"crypto": {}}')


def test_unknown_keys_name_their_line() -> None:
    text = with_line(BASE, '"backend"', '    "bogus": 1,')
    with pytest.raises(ConfigError) as info:
        parse_config(text, 'run.json')
    assert info.value.line == 13
    assert str(info.value).startswith('run.json:13: ')
    assert 'crypto.bogus' in str(info.value)

    text = with_line(BASE, '"units": 4', '      {"kind": "fc", "units": 2, "colour": "red"},')
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.line == 5

    with pytest.raises(ConfigError) as info:
        parse_config(BASE.replace('"output"', '"outptu"'))
    assert info.value.line == 16


@pytest.mark.parametrize('old, new, line', [
    ('"parties": 4', '"parties": "four"', 15),
    ('"topology": "star"', '"topology": "ring"', 15),
    ('"backend": "reference"', '"backend": "gpu"', 12),
    ('"degree": 7', '"degree": 7, "activation": "swish"', 3),
    ('"learning_rate": 0.5', '"learning_rate": null', 8),
])
def test_bad_values_name_their_line(old: str, new: str, line: int) -> None:
    with pytest.raises(ConfigError) as info:
        parse_config(BASE.replace(old, new))
    assert info.value.line == line


def test_json_syntax_errors() -> None:
    with pytest.raises(ConfigError) as info:
        parse_config(BASE.replace('"toy": true', '"toy": tru'))
    assert info.value.line == 13


def test_load_config(tmp_path) -> None:
    path = tmp_path / 'run.json'
    path.write_text(BASE)
    settings = load_config(path)
    assert settings.source == path
    with pytest.raises(ConfigError) as info:
        load_config(tmp_path / 'missing.json')
    assert info.value.path == tmp_path / 'missing.json'


def test_overrides_win() -> None:
    settings = with_overrides(parse_config(BASE), seed = 9, backend = 'real', toy = False, output = Path('elsewhere'))
    assert settings.crypto.backend == 'real'
    assert not settings.crypto.toy
    assert settings.federation.seed == settings.federation.shard_seed == 9
    assert settings.output == Path('elsewhere')
    # Untouched values survive
    assert settings.federation.parties == 4
    with pytest.raises(ConfigError):
        with_overrides(settings, backend = 'gpu')


def test_output_as_object() -> None:
    data = json.loads(BASE)
    data['output'] = {'directory': 'out'}
    assert parse_config(json.dumps(data)).output == Path('out')
