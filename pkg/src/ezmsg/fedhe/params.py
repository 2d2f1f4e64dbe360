import json
import math
import typing
import functools

from dataclasses import dataclass, field
from pathlib import Path

import sympy

import ezmsg.core as ez

from .errors import ParameterError, SecurityError, PlanningError

# Residues are held in int64 and multiplied in 21-bit halves
MAX_MODULUS_BITS = 42

SECURITY_TABLE = Path(__file__).parent / 'data' / 'security.json'
TOY_RING_DIMS = tuple(2 ** k for k in range(4, 11))


@functools.lru_cache(maxsize = None)
def security_table() -> typing.Dict[int, typing.Dict[int, int]]:
    """ Max log2 Q per (security level, ring dimension) """
    with open(SECURITY_TABLE, 'r') as f:
        raw = json.load(f)['max_log_q']
    return {
        int(lam): {int(n): int(bits) for n, bits in row.items()}
        for lam, row in raw.items()
    }


def max_log_q(ring_dim: int, security_level: int = 128) -> int:
    table = security_table()
    if security_level not in table:
        raise SecurityError(f'No security entries for {security_level=}')
    row = table[security_level]
    if ring_dim not in row:
        raise SecurityError(f'No security entry for {ring_dim=} at {security_level=}')
    return row[ring_dim]


def post_q_sec(log_q: float, security_level: int = 128) -> int:
    """ Smallest tabulated ring dimension whose modulus budget covers log_q bits """
    table = security_table()
    if security_level not in table:
        raise SecurityError(f'No security entries for {security_level=}')
    for ring_dim, bits in sorted(table[security_level].items()):
        if log_q <= bits:
            return ring_dim
    raise PlanningError(f'{log_q=:.1f} exceeds every tabulated ring at {security_level=}')


def _prime_below(bound: int, step: int, used: typing.Collection[int]) -> int:
    """ Largest prime p < bound with p = 1 mod step, skipping primes in used """
    candidate = ((bound - 2) // step) * step + 1
    while candidate > step:
        if candidate not in used and sympy.isprime(candidate):
            return candidate
        candidate -= step
    raise ParameterError(f'No NTT-friendly prime below {bound} for step {step}')


def build_chain(
    ring_dim: int,
    levels: int,
    scale_bits: int = 32,
    base_bits: typing.Optional[int] = None,
    special_bits: int = MAX_MODULUS_BITS
) -> typing.Tuple[typing.Tuple[int, ...], int]:
    """
    Modulus chain (q_0, ..., q_levels) plus one key-switching prime.
    Each rescaling prime sits just below the canonical scale of the level
    it is dropped from, which keeps the scale ledger close to 2^scale_bits.
    """
    if base_bits is None:
        base_bits = min(scale_bits + 9, MAX_MODULUS_BITS - 1)
    if max(scale_bits, base_bits, special_bits) > MAX_MODULUS_BITS:
        raise ParameterError(f'Primes are limited to {MAX_MODULUS_BITS} bits')
    if levels < 0:
        raise ParameterError(f'{levels=} must be non-negative')

    step = 2 * ring_dim
    used: typing.List[int] = []
    scale = float(2 ** scale_bits)
    top_down = []
    for _ in range(levels):
        q = _prime_below(int(scale), step, used)
        used.append(q)
        top_down.append(q)
        scale = scale * scale / q

    q0 = _prime_below(2 ** base_bits, step, used)
    used.append(q0)
    special = _prime_below(2 ** special_bits, step, used)
    return (q0, *reversed(top_down)), special


@dataclass(frozen = True)
class RingParams:
    ring_dim: int
    modulus_chain: typing.Tuple[int, ...]
    special_prime: int
    initial_scale: float
    security_level: int = 128
    toy_mode: bool = False
    sigma: float = 3.2
    scales: typing.Tuple[float, ...] = field(init = False, repr = False, compare = False)

    def __post_init__(self) -> None:
        N = self.ring_dim
        if N < 4 or N & (N - 1):
            raise ParameterError(f'{N=} must be a power of two')
        if len(self.modulus_chain) == 0:
            raise ParameterError('Empty modulus chain')
        moduli = tuple(self.modulus_chain) + (self.special_prime,)
        if len(set(moduli)) != len(moduli):
            raise ParameterError('Moduli must be distinct')
        for q in moduli:
            if q.bit_length() > MAX_MODULUS_BITS:
                raise ParameterError(f'{q=} exceeds {MAX_MODULUS_BITS} bits')
            if q % (2 * N) != 1 or not sympy.isprime(q):
                raise ParameterError(f'{q=} is not an NTT-friendly prime for {N=}')

        if not self.toy_mode:
            budget = max_log_q(N, self.security_level)
            if self.log_q > budget:
                raise SecurityError(
                    f'log2 Q = {self.log_q:.1f} exceeds {budget} bits for '
                    f'{N=} at security {self.security_level}'
                )
        elif N not in TOY_RING_DIMS:
            raise ParameterError(f'Toy mode rings are limited to {TOY_RING_DIMS}')

        # Canonical scale per level: S_top = S, S_(l-1) = S_l^2 / q_l
        scales = [float(self.initial_scale)]
        for level in range(self.initial_level, 0, -1):
            scales.append(scales[-1] * scales[-1] / self.modulus_chain[level])
        object.__setattr__(self, 'scales', tuple(reversed(scales)))

    @classmethod
    def create(
        cls,
        ring_dim: int,
        levels: int,
        scale_bits: int = 32,
        base_bits: typing.Optional[int] = None,
        security_level: int = 128,
        toy_mode: bool = False,
    ) -> 'RingParams':
        chain, special = build_chain(ring_dim, levels, scale_bits, base_bits)
        params = cls(
            ring_dim = ring_dim,
            modulus_chain = chain,
            special_prime = special,
            initial_scale = float(2 ** scale_bits),
            security_level = security_level,
            toy_mode = toy_mode
        )
        ez.logger.debug(f'Built chain {params.chain_bits=} {params.special_prime.bit_length()=}')
        return params

    @property
    def slots(self) -> int:
        return self.ring_dim // 2

    @property
    def initial_level(self) -> int:
        return len(self.modulus_chain) - 1

    @property
    def log_q(self) -> float:
        """ Bits of the ciphertext modulus; the key-switching prime is not counted """
        return sum(math.log2(q) for q in self.modulus_chain)

    @property
    def chain_bits(self) -> typing.Tuple[int, ...]:
        return tuple(q.bit_length() for q in self.modulus_chain)

    def modulus(self, level: int) -> int:
        """ Q_level = q_0 * ... * q_level """
        if not 0 <= level <= self.initial_level:
            raise ParameterError(f'{level=} outside chain')
        return math.prod(self.modulus_chain[: level + 1])

    def log_modulus(self, level: int) -> float:
        return sum(math.log2(q) for q in self.modulus_chain[: level + 1])
