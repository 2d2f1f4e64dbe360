import math
import typing
import functools

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import mpmath

import ezmsg.core as ez

from .params import RingParams
from .ring import (
    RNSRing, DIGITS_PER_PRIME, DIGIT_BITS, mulmod,
    sample_ternary, sample_gaussian, sample_uniform, sample_big_uniform
)
from .ledger import Evaluator, Counters
from .linear import LinearTransform, identity
from .errors import (
    MissingKeyError, ShareError, BootstrapConstraintError, LevelExhaustedError
)

# CRS stream tags
_CRS_PUBLIC = 1
_CRS_RELIN = 2
_CRS_ROTATION = 3
_CRS_BOOTSTRAP = 4


@dataclass(frozen = True, eq = False)
class Plaintext:
    poly: np.ndarray
    level: int
    scale: float


@dataclass(frozen = True, eq = False)
class Ciphertext:
    parts: typing.Tuple[np.ndarray, ...]
    level: int
    scale: float

    def __post_init__(self) -> None:
        for p in self.parts:
            p.setflags(write = False)

    @property
    def degree(self) -> int:
        return len(self.parts) - 1


@dataclass(frozen = True, eq = False)
class SecretShare:
    """ A party's ternary secret. Never leaves its owner. """
    party: int
    poly: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class PublicKey:
    b: np.ndarray = field(repr = False)
    a: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class SwitchingKey:
    """ Digit-decomposed key over the chain plus the key-switching prime """
    b: np.ndarray = field(repr = False)
    a: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class CollectiveKeys:
    public: PublicKey
    relin: typing.Optional[SwitchingKey] = None
    rotations: typing.Dict[int, SwitchingKey] = field(default_factory = dict)


# Protocol messages; these are what parties put on the wire

@dataclass(frozen = True, eq = False)
class PublicKeyShare:
    party: int
    b: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class RelinShare:
    party: int
    round: int
    h0: np.ndarray = field(repr = False)
    h1: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class RelinEphemeral:
    """ Round-one secret a party keeps until round two """
    party: int
    u: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class RotationKeyShare:
    party: int
    offset: int
    b: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class DecryptionShare:
    party: int
    level: int
    h: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class KeySwitchShare:
    party: int
    level: int
    h0: np.ndarray = field(repr = False)
    h1: np.ndarray = field(repr = False)


@dataclass(frozen = True, eq = False)
class BootstrapRequest:
    c1: np.ndarray = field(repr = False)
    level: int
    scale: float
    nonce: int
    transform: LinearTransform = field(default_factory = identity)


@dataclass(frozen = True, eq = False)
class BootstrapShare:
    party: int
    nonce: int
    h0: np.ndarray = field(repr = False)
    h1: np.ndarray = field(repr = False)


class BootstrapMixin:
    """ Sizing rules of the mask-and-reencrypt refresh, shared by both backends """

    params: RingParams
    mask_bits: int
    message_bits: int

    def bootstrap_min_log_q(self, n_parties: int) -> float:
        """ Q_level must exceed (parties + 1) * 2^message_bits * 2^mask_bits """
        return math.log2(n_parties + 1) + self.message_bits + self.mask_bits

    def bootstrap_level(self, n_parties: int) -> int:
        need = self.bootstrap_min_log_q(n_parties)
        for level in range(self.params.initial_level + 1):
            if self.params.log_modulus(level) > need:
                return level
        raise BootstrapConstraintError(
            f'No level satisfies log2 Q > {need:.1f} for {n_parties} parties'
        )

    def check_bootstrap(self, level: int, n_parties: int) -> None:
        need = self.bootstrap_min_log_q(n_parties)
        have = self.params.log_modulus(level)
        if have <= need:
            raise BootstrapConstraintError(
                f'Refresh at {level=} has log2 Q = {have:.1f}, needs more than {need:.1f}'
            )


class CKKSContext(BootstrapMixin, Evaluator[Ciphertext]):
    """
    Multiparty CKKS over an RNS ring. Share functions are pure per-party
    computations; combine functions aggregate what arrives from the parties.
    """

    def __init__(
        self,
        params: RingParams,
        seed: int = 0,
        crs_seed: typing.Optional[int] = None,
        mask_bits: typing.Optional[int] = None,
        message_bits: typing.Optional[int] = None
    ) -> None:
        self.params = params
        self.ring = RNSRing(params)
        self.counters = Counters()
        self.rng = np.random.default_rng(seed)
        self.crs_seed = seed if crs_seed is None else crs_seed
        self.mask_bits = params.security_level if mask_bits is None else mask_bits
        scale_bits = int(round(math.log2(params.initial_scale)))
        self.message_bits = scale_bits + 8 if message_bits is None else message_bits
        self.keys: typing.Optional[CollectiveKeys] = None
        self._nonce = 0
        self._key_cache: typing.Dict[int, typing.Tuple[SwitchingKey, np.ndarray, np.ndarray]] = {}
        self._matrices: typing.Dict[str, np.ndarray] = {}

    @property
    def N(self) -> int:
        return self.params.ring_dim

    def _crs(self, *tag: int) -> np.random.Generator:
        return np.random.default_rng([self.crs_seed, *tag])

    def _error(self, rng: np.random.Generator, rows: np.ndarray) -> np.ndarray:
        return self.ring.from_small(sample_gaussian(rng, self.N, self.params.sigma), rows)

    # Keys

    def sec_key_gen(self, n_parties: int, seed: typing.Optional[int] = None) -> typing.List[SecretShare]:
        if n_parties < 1:
            raise ShareError(f'{n_parties=} must be positive')
        rng = self.rng if seed is None else np.random.default_rng(seed)
        return [SecretShare(party = i, poly = sample_ternary(rng, self.N)) for i in range(n_parties)]

    def key_gen(self, seed: typing.Optional[int] = None) -> typing.Tuple[SecretShare, PublicKey]:
        """ Single-owner key pair, e.g. for a querier """
        rng = self.rng if seed is None else np.random.default_rng(seed)
        secret = SecretShare(party = -1, poly = sample_ternary(rng, self.N))
        rows = self.ring.rows(self.top_level)
        a = sample_uniform(rng, self.ring, rows)
        s = self.ring.from_small(secret.poly, rows)
        b = self.ring.sub(self._error(rng, rows), self.ring.mul(a, s, rows), rows)
        return secret, PublicKey(b = b, a = a)

    def _public_a(self) -> np.ndarray:
        return sample_uniform(self._crs(_CRS_PUBLIC), self.ring, self.ring.rows(self.top_level))

    def public_key_share(self, share: SecretShare, rng: typing.Optional[np.random.Generator] = None) -> PublicKeyShare:
        rng = self.rng if rng is None else rng
        rows = self.ring.rows(self.top_level)
        s = self.ring.from_small(share.poly, rows)
        b = self.ring.sub(self._error(rng, rows), self.ring.mul(self._public_a(), s, rows), rows)
        return PublicKeyShare(party = share.party, b = b)

    def combine_public_key(self, shares: typing.Sequence[PublicKeyShare]) -> PublicKey:
        if not shares:
            raise ShareError('No public key shares')
        rows = self.ring.rows(self.top_level)
        b = functools.reduce(lambda x, y: self.ring.add(x, y, rows), (s.b for s in shares))
        return PublicKey(b = b, a = self._public_a())

    def _digit_count(self) -> int:
        return (self.top_level + 1) * DIGITS_PER_PRIME

    def _switch_a(self, *tag: int) -> np.ndarray:
        rng = self._crs(*tag)
        ext = self.ring.rows(self.top_level, special = True)
        return np.stack([sample_uniform(rng, self.ring, ext) for _ in range(self._digit_count())])

    def _gadget(self, s_from: np.ndarray) -> np.ndarray:
        """ P * 2^(21 t) * s_from placed in row i for digit (i, t) """
        ext = self.ring.rows(self.top_level, special = True)
        out = np.zeros((self._digit_count(), len(ext), self.N), dtype = np.int64)
        P = self.params.special_prime
        for i in range(self.top_level + 1):
            q = self.ring.moduli[i]
            for t in range(DIGITS_PER_PRIME):
                g = np.array([[P * (1 << (DIGIT_BITS * t)) % q]], dtype = np.int64)
                out[i * DIGITS_PER_PRIME + t, i] = mulmod(s_from[i], g[0], np.array([q], dtype = np.int64))
        return out

    def rotation_key_share(
        self, share: SecretShare, offset: int, rng: typing.Optional[np.random.Generator] = None
    ) -> RotationKeyShare:
        rng = self.rng if rng is None else rng
        ext = self.ring.rows(self.top_level, special = True)
        galois = self.ring.encoder.galois(offset)
        s = self.ring.from_small(share.poly, ext)
        s_rot = self.ring.automorphism(s, galois, ext)
        a = self._switch_a(_CRS_ROTATION, galois)
        noise = np.stack([self._error(rng, ext) for _ in range(len(a))])
        b = self.ring.sub(noise, self.ring.mul(a, s, ext), ext)
        b = self.ring.add(b, self._gadget(s_rot), ext)
        return RotationKeyShare(party = share.party, offset = offset, b = b)

    def combine_rotation_key(self, shares: typing.Sequence[RotationKeyShare]) -> SwitchingKey:
        offsets = {s.offset for s in shares}
        if len(offsets) != 1:
            raise ShareError(f'Mixed rotation offsets {offsets}')
        ext = self.ring.rows(self.top_level, special = True)
        b = functools.reduce(lambda x, y: self.ring.add(x, y, ext), (s.b for s in shares))
        galois = self.ring.encoder.galois(offsets.pop())
        return SwitchingKey(b = b, a = self._switch_a(_CRS_ROTATION, galois))

    def relin_round_one(
        self, share: SecretShare, rng: typing.Optional[np.random.Generator] = None
    ) -> typing.Tuple[RelinEphemeral, RelinShare]:
        rng = self.rng if rng is None else rng
        ext = self.ring.rows(self.top_level, special = True)
        u = sample_ternary(rng, self.N)
        a = self._switch_a(_CRS_RELIN)
        s = self.ring.from_small(share.poly, ext)
        u_rns = self.ring.from_small(u, ext)
        D = len(a)
        h0 = self.ring.sub(self._gadget(s), self.ring.mul(a, u_rns, ext), ext)
        h0 = self.ring.add(h0, np.stack([self._error(rng, ext) for _ in range(D)]), ext)
        h1 = self.ring.add(self.ring.mul(a, s, ext), np.stack([self._error(rng, ext) for _ in range(D)]), ext)
        return RelinEphemeral(party = share.party, u = u), RelinShare(share.party, 1, h0, h1)

    def _aggregate(self, shares: typing.Sequence[RelinShare]) -> typing.Tuple[np.ndarray, np.ndarray]:
        ext = self.ring.rows(self.top_level, special = True)
        h0 = functools.reduce(lambda x, y: self.ring.add(x, y, ext), (s.h0 for s in shares))
        h1 = functools.reduce(lambda x, y: self.ring.add(x, y, ext), (s.h1 for s in shares))
        return h0, h1

    def relin_round_two(
        self,
        share: SecretShare,
        ephemeral: RelinEphemeral,
        round_one: typing.Sequence[RelinShare],
        rng: typing.Optional[np.random.Generator] = None
    ) -> RelinShare:
        rng = self.rng if rng is None else rng
        if ephemeral.party != share.party:
            raise ShareError('Ephemeral secret belongs to another party')
        ext = self.ring.rows(self.top_level, special = True)
        h0, h1 = self._aggregate(round_one)
        s = self.ring.from_small(share.poly, ext)
        u_minus_s = self.ring.from_small(ephemeral.u - share.poly, ext)
        D = len(h0)
        out0 = self.ring.add(self.ring.mul(h0, s, ext), np.stack([self._error(rng, ext) for _ in range(D)]), ext)
        out1 = self.ring.add(self.ring.mul(h1, u_minus_s, ext), np.stack([self._error(rng, ext) for _ in range(D)]), ext)
        return RelinShare(share.party, 2, out0, out1)

    def combine_relin(
        self, round_one: typing.Sequence[RelinShare], round_two: typing.Sequence[RelinShare]
    ) -> SwitchingKey:
        ext = self.ring.rows(self.top_level, special = True)
        _, h1 = self._aggregate(round_one)
        h0p, h1p = self._aggregate(round_two)
        return SwitchingKey(b = self.ring.add(h0p, h1p, ext), a = h1)

    def d_key_gen(
        self,
        shares: typing.Sequence[SecretShare],
        rotations: typing.Iterable[int] = (),
        relin: bool = True
    ) -> CollectiveKeys:
        """ Run every key generation protocol in-process """
        if not shares:
            raise ShareError('No secret shares')
        public = self.combine_public_key([self.public_key_share(s) for s in shares])
        relin_key = None
        if relin:
            first = [self.relin_round_one(s) for s in shares]
            round_one = [r for _, r in first]
            round_two = [self.relin_round_two(s, e, round_one) for s, (e, _) in zip(shares, first)]
            relin_key = self.combine_relin(round_one, round_two)
        rotation_keys = {}
        for offset in sorted({r % self.slots for r in rotations} - {0}):
            rotation_keys[offset] = self.combine_rotation_key(
                [self.rotation_key_share(s, offset) for s in shares]
            )
        ez.logger.debug(f'Generated keys for {len(shares)} parties with {len(rotation_keys)} rotations')
        return CollectiveKeys(public = public, relin = relin_key, rotations = rotation_keys)

    def assemble_keys(
        self,
        public: PublicKey,
        relin: typing.Optional[SwitchingKey],
        rotations: typing.Mapping[int, SwitchingKey]
    ) -> CollectiveKeys:
        return CollectiveKeys(public = public, relin = relin, rotations = dict(rotations))

    def has_rotation_key(self, offset: int) -> bool:
        return self.keys is not None and offset in self.keys.rotations

    # Encryption and decryption

    def _encode(self, values: np.ndarray, level: int, scale: float) -> Plaintext:
        return Plaintext(self.ring.encode(values, scale, self.ring.rows(level)), level, scale)

    def decode(self, pt: Plaintext) -> np.ndarray:
        return self.ring.decode(pt.poly, pt.scale, self.ring.rows(pt.level))

    def encrypt(self, pk: PublicKey, pt: Plaintext) -> Ciphertext:
        rows = self.ring.rows(pt.level)
        v = self.ring.from_small(sample_ternary(self.rng, self.N), rows)
        b, a = pk.b[: pt.level + 1], pk.a[: pt.level + 1]
        c0 = self.ring.add(self.ring.mul(v, b, rows), self._error(self.rng, rows), rows)
        c0 = self.ring.add(c0, pt.poly, rows)
        c1 = self.ring.add(self.ring.mul(v, a, rows), self._error(self.rng, rows), rows)
        self.counters.encryptions += 1
        return Ciphertext((c0, c1), pt.level, pt.scale)

    def encrypt_values(self, pk: PublicKey, values, level: typing.Optional[int] = None) -> Ciphertext:
        return self.encrypt(pk, self.encode(values, level))

    def decrypt(self, ct: Ciphertext, secret: SecretShare) -> Plaintext:
        """ Decryption by the sole owner of a secret (e.g. a querier) """
        rows = self.ring.rows(ct.level)
        s = self.ring.from_small(secret.poly, rows)
        acc = ct.parts[0]
        power = s
        for part in ct.parts[1:]:
            acc = self.ring.add(acc, self.ring.mul(part, power, rows), rows)
            power = self.ring.mul(power, s, rows)
        self.counters.decryptions += 1
        return Plaintext(acc, ct.level, ct.scale)

    def decryption_share(
        self, ct: Ciphertext, share: SecretShare, rng: typing.Optional[np.random.Generator] = None
    ) -> DecryptionShare:
        rng = self.rng if rng is None else rng
        if ct.degree != 1:
            raise ShareError('Collective decryption needs a relinearized ciphertext')
        rows = self.ring.rows(ct.level)
        s = self.ring.from_small(share.poly, rows)
        h = self.ring.add(self.ring.mul(ct.parts[1], s, rows), self._error(rng, rows), rows)
        return DecryptionShare(party = share.party, level = ct.level, h = h)

    def combine_decryption(self, ct: Ciphertext, shares: typing.Sequence[DecryptionShare]) -> Plaintext:
        if not shares:
            raise ShareError('No decryption shares')
        if any(s.level != ct.level for s in shares):
            raise ShareError('Decryption share level mismatch')
        rows = self.ring.rows(ct.level)
        acc = ct.parts[0]
        for s in shares:
            acc = self.ring.add(acc, s.h, rows)
        self.counters.decryptions += 1
        return Plaintext(acc, ct.level, ct.scale)

    def d_decrypt(self, ct: Ciphertext, shares: typing.Sequence[SecretShare]) -> Plaintext:
        if not shares:
            raise ShareError('No secret shares')
        return self.combine_decryption(ct, [self.decryption_share(ct, s) for s in shares])

    def key_switch_share(
        self,
        ct: Ciphertext,
        target: PublicKey,
        share: SecretShare,
        rng: typing.Optional[np.random.Generator] = None
    ) -> KeySwitchShare:
        rng = self.rng if rng is None else rng
        rows = self.ring.rows(ct.level)
        s = self.ring.from_small(share.poly, rows)
        u = self.ring.from_small(sample_ternary(rng, self.N), rows)
        h0 = self.ring.add(self.ring.mul(ct.parts[1], s, rows), self.ring.mul(u, target.b[: ct.level + 1], rows), rows)
        h0 = self.ring.add(h0, self._error(rng, rows), rows)
        h1 = self.ring.add(self.ring.mul(u, target.a[: ct.level + 1], rows), self._error(rng, rows), rows)
        return KeySwitchShare(party = share.party, level = ct.level, h0 = h0, h1 = h1)

    def combine_key_switch(self, ct: Ciphertext, shares: typing.Sequence[KeySwitchShare]) -> Ciphertext:
        if not shares:
            raise ShareError('No key switch shares')
        rows = self.ring.rows(ct.level)
        c0 = ct.parts[0]
        c1 = np.zeros_like(c0)
        for s in shares:
            c0 = self.ring.add(c0, s.h0, rows)
            c1 = self.ring.add(c1, s.h1, rows)
        self.counters.key_switches += 1
        return Ciphertext((c0, c1), ct.level, ct.scale)

    def d_key_switch(self, ct: Ciphertext, target: PublicKey, shares: typing.Sequence[SecretShare]) -> Ciphertext:
        """ Re-encrypt under target without ever decrypting """
        if not shares:
            raise ShareError('No secret shares')
        return self.combine_key_switch(ct, [self.key_switch_share(ct, target, s) for s in shares])

    # Refresh

    def bootstrap_request(self, ct: Ciphertext, transform: typing.Optional[LinearTransform] = None) -> BootstrapRequest:
        if ct.degree != 1:
            raise ShareError('Refresh needs a relinearized ciphertext')
        self._nonce += 1
        return BootstrapRequest(
            c1 = ct.parts[1], level = ct.level, scale = ct.scale, nonce = self._nonce,
            transform = identity() if transform is None else transform
        )

    def _bootstrap_a(self, nonce: int) -> np.ndarray:
        return sample_uniform(self._crs(_CRS_BOOTSTRAP, nonce), self.ring, self.ring.rows(self.top_level))

    def bootstrap_share(
        self,
        request: BootstrapRequest,
        share: SecretShare,
        rng: typing.Optional[np.random.Generator] = None
    ) -> BootstrapShare:
        rng = self.rng if rng is None else rng
        rows_l = self.ring.rows(request.level)
        rows_top = self.ring.rows(self.top_level)
        mask = sample_big_uniform(rng, self.N, self.mask_bits + self.message_bits)
        s_l = self.ring.from_small(share.poly, rows_l)
        s_top = self.ring.from_small(share.poly, rows_top)

        h0 = self.ring.add(self.ring.mul(request.c1, s_l, rows_l), self.ring.from_big(mask, rows_l), rows_l)
        h0 = self.ring.add(h0, self._error(rng, rows_l), rows_l)

        moved = self.ring.from_big(self._transform_coeffs(request, mask), rows_top)
        h1 = self.ring.neg(self.ring.mul(self._bootstrap_a(request.nonce), s_top, rows_top), rows_top)
        h1 = self.ring.add(self.ring.sub(h1, moved, rows_top), self._error(rng, rows_top), rows_top)
        return BootstrapShare(party = share.party, nonce = request.nonce, h0 = h0, h1 = h1)

    def combine_bootstrap(
        self, ct: Ciphertext, request: BootstrapRequest, shares: typing.Sequence[BootstrapShare]
    ) -> Ciphertext:
        if not shares:
            raise ShareError('No refresh shares')
        if any(s.nonce != request.nonce for s in shares):
            raise ShareError('Refresh share does not answer this request')
        self.check_bootstrap(request.level, len(shares))
        rows_l = self.ring.rows(request.level)
        rows_top = self.ring.rows(self.top_level)

        x = ct.parts[0]
        for s in shares:
            x = self.ring.add(x, s.h0, rows_l)
        x, Q = self.ring.crt(x, rows_l)
        bound = 1 << (self.message_bits + 1)
        x = np.where(x >= Q - bound, x - Q, x)

        c0 = self.ring.from_big(self._transform_coeffs(request, x), rows_top)
        for s in shares:
            c0 = self.ring.add(c0, s.h1, rows_top)
        self.counters.bootstraps += 1
        return Ciphertext((c0, self._bootstrap_a(request.nonce)), self.top_level, self.canonical_scale(self.top_level))

    def d_bootstrap(self, ct: Ciphertext, shares: typing.Sequence[SecretShare]) -> Ciphertext:
        return self.d_bootstrap_alt(ct, identity(), shares)

    def d_bootstrap_alt(
        self, ct: Ciphertext, transform: LinearTransform, shares: typing.Sequence[SecretShare]
    ) -> Ciphertext:
        """ Refresh to the top level while applying a slot-linear map """
        if not shares:
            raise ShareError('No secret shares')
        self.check_bootstrap(ct.level, len(shares))
        request = self.bootstrap_request(ct, transform)
        return self.combine_bootstrap(ct, request, [self.bootstrap_share(request, s) for s in shares])

    def _transform_coeffs(self, request: BootstrapRequest, coeffs: np.ndarray) -> np.ndarray:
        """ Integer coefficients of the transformed message, moved to the top scale """
        ratio = Fraction(self.canonical_scale(self.top_level)) / Fraction(request.scale)
        t = request.transform
        if t.rotation is not None:
            coeffs = self._rotate_integers(coeffs, t.rotation)
            return np.array([round(int(c) * ratio) for c in coeffs], dtype = object)
        return self._apply_matrix(t, coeffs, ratio, request.level)

    def _rotate_integers(self, coeffs: np.ndarray, offset: int) -> np.ndarray:
        offset %= self.slots
        if offset == 0:
            return coeffs
        dest, negate = self.ring._automorphism_map(self.ring.encoder.galois(offset))
        out = np.empty(self.N, dtype = object)
        out[dest] = np.where(negate, -coeffs, coeffs)
        return out

    @functools.lru_cache(maxsize = 4)
    def _vandermonde(self, prec: int) -> np.ndarray:
        with mpmath.workprec(prec):
            exps = self.ring.encoder.rot_group
            two_n = 2 * self.N
            return np.array([
                [mpmath.expjpi(mpmath.mpf(int(e) * k % two_n) / self.N) for k in range(self.N)]
                for e in exps
            ], dtype = object)

    def _apply_matrix(self, t: LinearTransform, coeffs: np.ndarray, ratio: Fraction, level: int) -> np.ndarray:
        prec = int(self.params.log_modulus(self.top_level)) + 64
        A = self._matrices.get(t.key)
        if A is None:
            A = self._matrices[t.key] = t.matrix(self.slots)
        V = self._vandermonde(prec)
        with mpmath.workprec(prec):
            x = np.array([mpmath.mpf(int(c)) for c in coeffs], dtype = object)
            z = V.dot(x)
            z = np.array([mpmath.mpf(float(v)) for v in A.ravel()], dtype = object).reshape(A.shape).dot(z)
            back = np.array([mpmath.conj(v) for v in V.ravel()], dtype = object).reshape(V.shape).T.dot(z)
            factor = mpmath.mpf(2) / self.N * mpmath.mpf(ratio.numerator) / ratio.denominator
            return np.array([int(mpmath.nint(mpmath.re(v) * factor)) for v in back], dtype = object)

    # Raw primitives for the ledger

    def _rows(self, ct) -> np.ndarray:
        return self.ring.rows(ct.level)

    def _add(self, a: Ciphertext, b: Ciphertext, scale: float) -> Ciphertext:
        rows = self._rows(a)
        n = max(len(a.parts), len(b.parts))
        pa = a.parts + (np.zeros_like(a.parts[0]),) * (n - len(a.parts))
        pb = b.parts + (np.zeros_like(b.parts[0]),) * (n - len(b.parts))
        return Ciphertext(tuple(self.ring.add(x, y, rows) for x, y in zip(pa, pb)), a.level, scale)

    def _neg(self, a: Ciphertext) -> Ciphertext:
        rows = self._rows(a)
        return Ciphertext(tuple(self.ring.neg(p, rows) for p in a.parts), a.level, a.scale)

    def _sub(self, a: Ciphertext, b: Ciphertext, scale: float) -> Ciphertext:
        return self._add(a, self._neg(b), scale)

    def _add_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        rows = self._rows(ct)
        return Ciphertext((self.ring.add(ct.parts[0], pt.poly, rows),) + ct.parts[1:], ct.level, ct.scale)

    def _mul_plain(self, ct: Ciphertext, pt: Plaintext) -> Ciphertext:
        rows = self._rows(ct)
        q = self.ring.q(rows)
        p = self.ring.ntt(pt.poly, rows)
        parts = tuple(self.ring.intt(mulmod(self.ring.ntt(c, rows), p, q), rows) for c in ct.parts)
        return Ciphertext(parts, ct.level, ct.scale * pt.scale)

    def _mul_ct(self, a: Ciphertext, b: Ciphertext, relinearize: bool) -> Ciphertext:
        if a.degree != 1 or b.degree != 1:
            raise ShareError('Multiplication needs relinearized ciphertexts')
        if relinearize and (self.keys is None or self.keys.relin is None):
            raise MissingKeyError('No relinearization key')
        rows = self._rows(a)
        q = self.ring.q(rows)
        a0, a1 = (self.ring.ntt(p, rows) for p in a.parts)
        b0, b1 = (self.ring.ntt(p, rows) for p in b.parts)
        d0 = self.ring.intt(mulmod(a0, b0, q), rows)
        d1 = self.ring.intt((mulmod(a0, b1, q) + mulmod(a1, b0, q)) % q, rows)
        d2 = self.ring.intt(mulmod(a1, b1, q), rows)
        if not relinearize:
            return Ciphertext((d0, d1, d2), a.level, a.scale * b.scale)
        k0, k1 = self._switch(d2, self.keys.relin, a.level)
        return Ciphertext((self.ring.add(d0, k0, rows), self.ring.add(d1, k1, rows)), a.level, a.scale * b.scale)

    def key_switch_local(self, ct: Ciphertext) -> Ciphertext:
        """ Relinearize a three-part ciphertext with the collective key """
        if ct.degree == 1:
            return ct
        if self.keys is None or self.keys.relin is None:
            raise MissingKeyError('No relinearization key')
        rows = self._rows(ct)
        k0, k1 = self._switch(ct.parts[2], self.keys.relin, ct.level)
        self.counters.key_switches += 1
        return Ciphertext((self.ring.add(ct.parts[0], k0, rows), self.ring.add(ct.parts[1], k1, rows)), ct.level, ct.scale)

    def _switch(self, c: np.ndarray, key: SwitchingKey, level: int) -> typing.Tuple[np.ndarray, np.ndarray]:
        ext = self.ring.rows(level, special = True)
        digits = self.ring.decompose(c)
        D = len(digits)
        dn = self.ring.ntt(np.ascontiguousarray(np.broadcast_to(digits[:, None, :], (D, len(ext), self.N))), ext)
        kb, ka = self._key_ntt(key)
        q = self.ring.q(ext)
        acc0 = mulmod(dn, kb[:D][:, ext], q).sum(axis = 0) % q
        acc1 = mulmod(dn, ka[:D][:, ext], q).sum(axis = 0) % q
        acc0 = self.ring.intt(acc0, ext)
        acc1 = self.ring.intt(acc1, ext)
        return self.ring.drop_last(acc0, ext), self.ring.drop_last(acc1, ext)

    def _key_ntt(self, key: SwitchingKey) -> typing.Tuple[np.ndarray, np.ndarray]:
        cached = self._key_cache.get(id(key))
        if cached is None or cached[0] is not key:
            ext = self.ring.rows(self.top_level, special = True)
            cached = (key, self.ring.ntt(key.b, ext), self.ring.ntt(key.a, ext))
            self._key_cache[id(key)] = cached
        return cached[1], cached[2]

    def _mul_int(self, ct: Ciphertext, k: int) -> Ciphertext:
        rows = self._rows(ct)
        return Ciphertext(tuple(self.ring.mul_int(p, k, rows) for p in ct.parts), ct.level, ct.scale)

    def _relabel(self, ct: Ciphertext, scale: float) -> Ciphertext:
        return Ciphertext(ct.parts, ct.level, scale)

    def _rescale(self, ct: Ciphertext) -> Ciphertext:
        rows = self._rows(ct)
        parts = tuple(self.ring.drop_last(p, rows) for p in ct.parts)
        return Ciphertext(parts, ct.level - 1, ct.scale / self.params.modulus_chain[ct.level])

    def _drop(self, ct: Ciphertext, level: int) -> Ciphertext:
        if level > ct.level:
            raise LevelExhaustedError(f'Cannot raise level {ct.level} to {level}')
        return Ciphertext(tuple(p[: level + 1] for p in ct.parts), level, ct.scale)

    def _bring_down(self, ct: Ciphertext, level: int, scale: float) -> Ciphertext:
        ct = self._drop(ct, level + 1)
        q = self.params.modulus_chain[level + 1]
        ct = self._rescale(self._mul_int(ct, round(scale * q / ct.scale)))
        return self._relabel(ct, scale)

    def _match_scale(self, ct: Ciphertext, scale: float) -> Ciphertext:
        ratio = scale / ct.scale
        k = max(1, round(ratio))
        if abs(ratio - k) > 2.0 ** -10 * ratio:
            ez.logger.warning(f'Scale alignment by {k} for {ratio=} loses precision')
        return self._relabel(self._mul_int(ct, k), scale)

    def _mul_const(self, ct: Ciphertext, c: float, k: int, scale: float) -> Ciphertext:
        return self._relabel(self._rescale(self._mul_int(ct, k)), scale)

    def _rotate(self, ct: Ciphertext, offset: int) -> Ciphertext:
        if ct.degree != 1:
            raise ShareError('Rotation needs a relinearized ciphertext')
        key = self.keys.rotations.get(offset) if self.keys is not None else None
        if key is None:
            raise MissingKeyError(f'No rotation key for {offset=}')
        rows = self._rows(ct)
        galois = self.ring.encoder.galois(offset)
        c0 = self.ring.automorphism(ct.parts[0], galois, rows)
        c1 = self.ring.automorphism(ct.parts[1], galois, rows)
        k0, k1 = self._switch(c1, key, ct.level)
        return Ciphertext((self.ring.add(c0, k0, rows), k1), ct.level, ct.scale)

    def decrypt_values(self, ct: Ciphertext, shares: typing.Sequence[SecretShare]) -> np.ndarray:
        return self.decode(self.d_decrypt(ct, shares))
