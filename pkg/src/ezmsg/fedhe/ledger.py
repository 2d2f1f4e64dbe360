import abc
import math
import typing

from dataclasses import dataclass, fields, asdict

import numpy as np

import ezmsg.core as ez

from .params import RingParams
from .errors import LevelExhaustedError, MissingKeyError, ScaleOverflowError

# Scales closer than this (relative) are treated as equal when adding
SCALE_TOLERANCE = 2.0 ** -20


@dataclass
class Counters:
    rotations: int = 0
    embedded_rotations: int = 0
    mul_ct: int = 0
    mul_pt: int = 0
    rescales: int = 0
    key_switches: int = 0
    bootstraps: int = 0
    encryptions: int = 0
    decryptions: int = 0

    def snapshot(self) -> 'Counters':
        return Counters(**asdict(self))

    def since(self, earlier: 'Counters') -> 'Counters':
        return Counters(**{
            f.name: getattr(self, f.name) - getattr(earlier, f.name)
            for f in fields(self)
        })

    def reset(self) -> None:
        for f in fields(self):
            setattr(self, f.name, 0)


class CipherLike(typing.Protocol):
    level: int
    scale: float


CT = typing.TypeVar('CT', bound = CipherLike)


def _close(a: float, b: float) -> bool:
    return abs(a - b) <= SCALE_TOLERANCE * max(abs(a), abs(b))


class Evaluator(abc.ABC, typing.Generic[CT]):
    """
    Level and scale bookkeeping shared by the lattice backend and the
    reference backend. Subclasses supply raw primitives; everything that
    decides a result's level or scale lives here so both backends agree.
    """

    params: RingParams
    counters: Counters

    @property
    def slots(self) -> int:
        return self.params.slots

    @property
    def top_level(self) -> int:
        return self.params.initial_level

    def canonical_scale(self, level: int) -> float:
        return self.params.scales[level]

    def _pad(self, values: typing.Union[float, np.ndarray]) -> np.ndarray:
        values = np.ravel(np.asarray(values, dtype = float))
        if values.size == 1:
            return np.full(self.slots, values[0])
        if values.size > self.slots:
            raise ScaleOverflowError(f'{values.size} values do not fit {self.slots} slots')
        out = np.zeros(self.slots)
        out[: values.size] = values
        return out

    # Raw primitives

    @abc.abstractmethod
    def _encode(self, values: np.ndarray, level: int, scale: float) -> typing.Any: ...

    @abc.abstractmethod
    def _add(self, a: CT, b: CT, scale: float) -> CT: ...

    @abc.abstractmethod
    def _sub(self, a: CT, b: CT, scale: float) -> CT: ...

    @abc.abstractmethod
    def _neg(self, a: CT) -> CT: ...

    @abc.abstractmethod
    def _add_plain(self, ct: CT, pt: typing.Any) -> CT: ...

    @abc.abstractmethod
    def _mul_plain(self, ct: CT, pt: typing.Any) -> CT: ...

    @abc.abstractmethod
    def _mul_ct(self, a: CT, b: CT, relinearize: bool) -> CT: ...

    @abc.abstractmethod
    def _mul_int(self, ct: CT, k: int) -> CT:
        """ Multiply the message by an integer; scale unchanged """

    @abc.abstractmethod
    def _relabel(self, ct: CT, scale: float) -> CT:
        """ Same ciphertext read at another scale """

    @abc.abstractmethod
    def _rescale(self, ct: CT) -> CT: ...

    @abc.abstractmethod
    def _drop(self, ct: CT, level: int) -> CT:
        """ Discard moduli down to level; message and scale unchanged """

    @abc.abstractmethod
    def _bring_down(self, ct: CT, level: int, scale: float) -> CT:
        """ Move ct to a lower level at the given scale keeping the message """

    @abc.abstractmethod
    def _match_scale(self, ct: CT, scale: float) -> CT:
        """ Same level, raise the scale to a larger one keeping the message """

    @abc.abstractmethod
    def _mul_const(self, ct: CT, c: float, k: int, scale: float) -> CT:
        """ Message times c through integer k, rescaled, read at scale """

    @abc.abstractmethod
    def _rotate(self, ct: CT, offset: int) -> CT:
        """ Left slot rotation by offset with a single key switch """

    @abc.abstractmethod
    def has_rotation_key(self, offset: int) -> bool: ...

    # Encoding

    def encode(self, values, level: typing.Optional[int] = None, scale: typing.Optional[float] = None):
        level = self.top_level if level is None else level
        scale = self.canonical_scale(level) if scale is None else scale
        return self._encode(self._pad(values), level, scale)

    # Level and scale rules

    def align(self, a: CT, b: CT) -> typing.Tuple[CT, CT]:
        if a.level > b.level:
            a = self._bring_down(a, b.level, b.scale)
        elif b.level > a.level:
            b = self._bring_down(b, a.level, a.scale)
        if not _close(a.scale, b.scale):
            if a.scale < b.scale:
                a = self._match_scale(a, b.scale)
            else:
                b = self._match_scale(b, a.scale)
        return a, b

    def add(self, a: CT, b: CT) -> CT:
        a, b = self.align(a, b)
        return self._add(a, b, max(a.scale, b.scale))

    def sub(self, a: CT, b: CT) -> CT:
        a, b = self.align(a, b)
        return self._sub(a, b, max(a.scale, b.scale))

    def neg(self, a: CT) -> CT:
        return self._neg(a)

    def add_plain(self, ct: CT, values) -> CT:
        """ Add cleartext slot values (vector or scalar) """
        pt = self._encode(self._pad(values), ct.level, ct.scale)
        return self._add_plain(ct, pt)

    def add_const(self, ct: CT, c: float) -> CT:
        return self.add_plain(ct, c)

    def mul_pt(self, ct: CT, values, scale: typing.Optional[float] = None) -> CT:
        """ Slot-wise product with cleartext values encoded at the canonical scale of ct's level """
        scale = self.canonical_scale(ct.level) if scale is None else scale
        pt = self._encode(self._pad(values), ct.level, scale)
        self.counters.mul_pt += 1
        return self._mul_plain(ct, pt)

    def mul_ct(self, a: CT, b: CT, relinearize: bool = True) -> CT:
        """
        Slot-wise product, relinearized unless asked otherwise; call res
        afterwards. A higher-level operand is brought down to the other's
        level and scale so products of canonical operands stay canonical.
        """
        if a.level > b.level:
            a = self._bring_down(a, b.level, b.scale)
        elif b.level > a.level:
            b = self._bring_down(b, a.level, a.scale)
        self.counters.mul_ct += 1
        if relinearize:
            self.counters.key_switches += 1
        return self._mul_ct(a, b, relinearize)

    def res(self, ct: CT) -> CT:
        if ct.level < 1:
            raise LevelExhaustedError(f'Cannot rescale at level {ct.level}')
        self.counters.rescales += 1
        return self._rescale(ct)

    def mul_int(self, ct: CT, k: int) -> CT:
        """ Exact integer multiple; consumes no level """
        return self._mul_int(ct, int(k))

    def bring_down(self, ct: CT, level: int, scale: typing.Optional[float] = None) -> CT:
        """ Move ct to a lower level read at scale (canonical by default); the message is kept """
        if level >= ct.level or level < 0:
            raise LevelExhaustedError(f'Cannot bring level {ct.level} down to {level}')
        return self._bring_down(ct, level, self.canonical_scale(level) if scale is None else scale)

    def relabel(self, ct: CT, factor: float) -> CT:
        """ Multiply the message by 1 / factor without touching the ciphertext """
        return self._relabel(ct, ct.scale * factor)

    def mul_const(self, ct: CT, c: float, scale: typing.Optional[float] = None) -> CT:
        """
        Message times a real constant, consuming one level. The result scale
        defaults to the canonical scale below, carrying over any deviation of
        ct from the canonical scale of its own level.
        """
        level = ct.level
        if level < 1:
            raise LevelExhaustedError(f'Cannot multiply by a constant at level {level}')
        if scale is None:
            scale = ct.scale * self.canonical_scale(level - 1) / self.canonical_scale(level)
        q = self.params.modulus_chain[level]
        k = round(c * scale * q / ct.scale)
        if c != 0 and abs(k) < 2 ** 16:
            ez.logger.warning(f'Constant multiplier {c=} keeps only {abs(k).bit_length()} bits')
        self.counters.rescales += 1
        return self._mul_const(ct, c, k, scale)

    def set_scale(self, ct: CT, scale: float) -> CT:
        """ Reinterpret ct as if encrypted at scale: the message is multiplied by ct.scale / scale """
        return self.mul_const(ct, ct.scale / scale)

    # Rotations

    def rot_l(self, ct: CT, offset: int) -> CT:
        offset %= self.slots
        if offset == 0:
            return ct
        for step in self._rotation_steps(offset):
            self.counters.rotations += 1
            self.counters.key_switches += 1
            ct = self._rotate(ct, step)
        return ct

    def rot_r(self, ct: CT, offset: int) -> CT:
        return self.rot_l(ct, self.slots - offset % self.slots)

    def _rotation_steps(self, offset: int) -> typing.List[int]:
        if self.has_rotation_key(offset):
            return [offset]
        steps = []
        for bit in range(int(math.log2(self.slots))):
            if offset >> bit & 1:
                if not self.has_rotation_key(1 << bit):
                    raise MissingKeyError(f'No rotation key for {offset=} or its power-of-two parts')
                steps.append(1 << bit)
        return steps
