import math
import typing

from dataclasses import dataclass, field

import numpy as np

import ezmsg.core as ez

from .params import RingParams
from .ledger import Evaluator, Counters
from .linear import LinearTransform, identity
from .mhe import BootstrapMixin
from .errors import MissingKeyError, ShareError, LevelExhaustedError


@dataclass(frozen = True, eq = False)
class RefPlaintext:
    values: np.ndarray
    level: int
    scale: float


@dataclass(frozen = True, eq = False)
class RefCiphertext:
    """ Slot values in the clear, tagged with the key they are 'encrypted' under """
    values: np.ndarray
    level: int
    scale: float
    key: typing.FrozenSet[int] = frozenset()
    degree: int = 1


@dataclass(frozen = True, eq = False)
class RefSecretShare:
    party: int
    token: int


@dataclass(frozen = True, eq = False)
class RefPublicKey:
    key: typing.FrozenSet[int]


@dataclass(frozen = True, eq = False)
class RefCollectiveKeys:
    public: RefPublicKey
    relin: bool = True
    rotations: typing.FrozenSet[int] = frozenset()


@dataclass(frozen = True)
class RefShare:
    """ Stand-in for any protocol share; sized like the real one on the wire """
    kind: str
    party: int
    level: int
    token: int = field(default = 0, repr = False)
    nonce: int = 0
    target: typing.FrozenSet[int] = frozenset()


@dataclass(frozen = True, eq = False)
class RefBootstrapRequest:
    level: int
    scale: float
    nonce: int
    transform: LinearTransform = field(default_factory = identity)


class ReferenceContext(BootstrapMixin, Evaluator[RefCiphertext]):
    """
    Exact-arithmetic stand-in for CKKSContext. Levels, scales, counters and
    key requirements follow the same rules; messages carry no noise.
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
        self.counters = Counters()
        self.rng = np.random.default_rng(seed)
        self.mask_bits = params.security_level if mask_bits is None else mask_bits
        scale_bits = int(round(math.log2(params.initial_scale)))
        self.message_bits = scale_bits + 8 if message_bits is None else message_bits
        self.keys: typing.Optional[RefCollectiveKeys] = None
        self._nonce = 0

    def _ct(
        self,
        values: np.ndarray,
        like: RefCiphertext,
        level: typing.Optional[int] = None,
        scale: typing.Optional[float] = None,
        key: typing.Optional[typing.FrozenSet[int]] = None,
        degree: typing.Optional[int] = None
    ) -> RefCiphertext:
        return RefCiphertext(
            values,
            like.level if level is None else level,
            like.scale if scale is None else scale,
            like.key if key is None else key,
            like.degree if degree is None else degree,
        )

    # Keys

    def sec_key_gen(self, n_parties: int, seed: typing.Optional[int] = None) -> typing.List[RefSecretShare]:
        if n_parties < 1:
            raise ShareError(f'{n_parties=} must be positive')
        rng = self.rng if seed is None else np.random.default_rng(seed)
        tokens = rng.integers(1, 2 ** 62, size = n_parties)
        return [RefSecretShare(party = i, token = int(t)) for i, t in enumerate(tokens)]

    def key_gen(self, seed: typing.Optional[int] = None) -> typing.Tuple[RefSecretShare, RefPublicKey]:
        rng = self.rng if seed is None else np.random.default_rng(seed)
        secret = RefSecretShare(party = -1, token = int(rng.integers(1, 2 ** 62)))
        return secret, RefPublicKey(frozenset({secret.token}))

    def public_key_share(self, share: RefSecretShare, rng = None) -> RefShare:
        return RefShare('public_key', share.party, self.top_level, share.token)

    def combine_public_key(self, shares: typing.Sequence[RefShare]) -> RefPublicKey:
        if not shares:
            raise ShareError('No public key shares')
        return RefPublicKey(frozenset(s.token for s in shares))

    def rotation_key_share(self, share: RefSecretShare, offset: int, rng = None) -> RefShare:
        return RefShare('rotation_key', share.party, self.top_level, share.token, offset)

    def combine_rotation_key(self, shares: typing.Sequence[RefShare]) -> int:
        offsets = {s.nonce for s in shares}
        if len(offsets) != 1:
            raise ShareError(f'Mixed rotation offsets {offsets}')
        return offsets.pop()

    def relin_round_one(self, share: RefSecretShare, rng = None) -> typing.Tuple[RefShare, RefShare]:
        return RefShare('relin_ephemeral', share.party, self.top_level), RefShare('relin', share.party, self.top_level, share.token, 1)

    def relin_round_two(self, share: RefSecretShare, ephemeral: RefShare, round_one, rng = None) -> RefShare:
        if ephemeral.party != share.party:
            raise ShareError('Ephemeral secret belongs to another party')
        return RefShare('relin', share.party, self.top_level, share.token, 2)

    def combine_relin(self, round_one, round_two) -> bool:
        return True

    def d_key_gen(
        self,
        shares: typing.Sequence[RefSecretShare],
        rotations: typing.Iterable[int] = (),
        relin: bool = True
    ) -> RefCollectiveKeys:
        if not shares:
            raise ShareError('No secret shares')
        offsets = frozenset(r % self.slots for r in rotations) - {0}
        public = self.combine_public_key([self.public_key_share(s) for s in shares])
        ez.logger.debug(f'Generated reference keys for {len(shares)} parties with {len(offsets)} rotations')
        return RefCollectiveKeys(public = public, relin = relin, rotations = offsets)

    def assemble_keys(
        self, public: RefPublicKey, relin: bool, rotations: typing.Mapping[int, int]
    ) -> RefCollectiveKeys:
        return RefCollectiveKeys(public = public, relin = bool(relin), rotations = frozenset(rotations))

    def has_rotation_key(self, offset: int) -> bool:
        return self.keys is not None and offset in self.keys.rotations

    # Encryption and decryption

    def _encode(self, values: np.ndarray, level: int, scale: float) -> RefPlaintext:
        return RefPlaintext(np.real(values).astype(float), level, scale)

    def decode(self, pt: RefPlaintext) -> np.ndarray:
        return pt.values.copy()

    def encrypt(self, pk: RefPublicKey, pt: RefPlaintext) -> RefCiphertext:
        self.counters.encryptions += 1
        return RefCiphertext(pt.values.copy(), pt.level, pt.scale, pk.key)

    def encrypt_values(self, pk: RefPublicKey, values, level: typing.Optional[int] = None) -> RefCiphertext:
        return self.encrypt(pk, self.encode(values, level))

    def _open(self, ct: RefCiphertext, tokens: typing.FrozenSet[int]) -> np.ndarray:
        if tokens == ct.key:
            return ct.values.copy()
        # Wrong or partial key set: indistinguishable from noise
        rng = np.random.default_rng(abs(hash((tokens, ct.key))) % (2 ** 32))
        return rng.normal(0.0, 1e12, ct.values.shape)

    def decrypt(self, ct: RefCiphertext, secret: RefSecretShare) -> RefPlaintext:
        self.counters.decryptions += 1
        return RefPlaintext(self._open(ct, frozenset({secret.token})), ct.level, ct.scale)

    def decryption_share(self, ct: RefCiphertext, share: RefSecretShare, rng = None) -> RefShare:
        if ct.degree != 1:
            raise ShareError('Collective decryption needs a relinearized ciphertext')
        return RefShare('decryption', share.party, ct.level, share.token)

    def combine_decryption(self, ct: RefCiphertext, shares: typing.Sequence[RefShare]) -> RefPlaintext:
        if not shares:
            raise ShareError('No decryption shares')
        if any(s.level != ct.level for s in shares):
            raise ShareError('Decryption share level mismatch')
        self.counters.decryptions += 1
        return RefPlaintext(self._open(ct, frozenset(s.token for s in shares)), ct.level, ct.scale)

    def d_decrypt(self, ct: RefCiphertext, shares: typing.Sequence[RefSecretShare]) -> RefPlaintext:
        if not shares:
            raise ShareError('No secret shares')
        return self.combine_decryption(ct, [self.decryption_share(ct, s) for s in shares])

    def decrypt_values(self, ct: RefCiphertext, shares: typing.Sequence[RefSecretShare]) -> np.ndarray:
        return self.decode(self.d_decrypt(ct, shares))

    def key_switch_share(self, ct: RefCiphertext, target: RefPublicKey, share: RefSecretShare, rng = None) -> RefShare:
        return RefShare('key_switch', share.party, ct.level, share.token, target = target.key)

    def combine_key_switch(self, ct: RefCiphertext, shares: typing.Sequence[RefShare]) -> RefCiphertext:
        if not shares:
            raise ShareError('No key switch shares')
        values = self._open(ct, frozenset(s.token for s in shares))
        self.counters.key_switches += 1
        return self._ct(values, ct, key = shares[0].target)

    def d_key_switch(
        self, ct: RefCiphertext, target: RefPublicKey, shares: typing.Sequence[RefSecretShare]
    ) -> RefCiphertext:
        if not shares:
            raise ShareError('No secret shares')
        return self.combine_key_switch(ct, [self.key_switch_share(ct, target, s) for s in shares])

    # Refresh

    def bootstrap_request(
        self, ct: RefCiphertext, transform: typing.Optional[LinearTransform] = None
    ) -> RefBootstrapRequest:
        if ct.degree != 1:
            raise ShareError('Refresh needs a relinearized ciphertext')
        self._nonce += 1
        return RefBootstrapRequest(ct.level, ct.scale, self._nonce, identity() if transform is None else transform)

    def bootstrap_share(self, request: RefBootstrapRequest, share: RefSecretShare, rng = None) -> RefShare:
        return RefShare('bootstrap', share.party, request.level, share.token, request.nonce)

    def combine_bootstrap(
        self, ct: RefCiphertext, request: RefBootstrapRequest, shares: typing.Sequence[RefShare]
    ) -> RefCiphertext:
        if not shares:
            raise ShareError('No refresh shares')
        if any(s.nonce != request.nonce for s in shares):
            raise ShareError('Refresh share does not answer this request')
        self.check_bootstrap(request.level, len(shares))
        values = request.transform(self._open(ct, frozenset(s.token for s in shares)))
        self.counters.bootstraps += 1
        return self._ct(values, ct, level = self.top_level, scale = self.canonical_scale(self.top_level))

    def d_bootstrap(self, ct: RefCiphertext, shares: typing.Sequence[RefSecretShare]) -> RefCiphertext:
        return self.d_bootstrap_alt(ct, identity(), shares)

    def d_bootstrap_alt(
        self, ct: RefCiphertext, transform: LinearTransform, shares: typing.Sequence[RefSecretShare]
    ) -> RefCiphertext:
        if not shares:
            raise ShareError('No secret shares')
        self.check_bootstrap(ct.level, len(shares))
        request = self.bootstrap_request(ct, transform)
        return self.combine_bootstrap(ct, request, [self.bootstrap_share(request, s) for s in shares])

    # Raw primitives for the ledger

    def _add(self, a: RefCiphertext, b: RefCiphertext, scale: float) -> RefCiphertext:
        return self._ct(a.values + b.values, a, scale = scale, degree = max(a.degree, b.degree))

    def _sub(self, a: RefCiphertext, b: RefCiphertext, scale: float) -> RefCiphertext:
        return self._ct(a.values - b.values, a, scale = scale, degree = max(a.degree, b.degree))

    def _neg(self, a: RefCiphertext) -> RefCiphertext:
        return self._ct(-a.values, a)

    def _add_plain(self, ct: RefCiphertext, pt: RefPlaintext) -> RefCiphertext:
        return self._ct(ct.values + pt.values, ct)

    def _mul_plain(self, ct: RefCiphertext, pt: RefPlaintext) -> RefCiphertext:
        return self._ct(ct.values * pt.values, ct, scale = ct.scale * pt.scale)

    def _mul_ct(self, a: RefCiphertext, b: RefCiphertext, relinearize: bool) -> RefCiphertext:
        if a.degree != 1 or b.degree != 1:
            raise ShareError('Multiplication needs relinearized ciphertexts')
        if relinearize:
            self._require_relin()
        return self._ct(a.values * b.values, a, scale = a.scale * b.scale, degree = 1 if relinearize else 2)

    def _require_relin(self) -> None:
        if self.keys is None or not self.keys.relin:
            raise MissingKeyError('No relinearization key')

    def key_switch_local(self, ct: RefCiphertext) -> RefCiphertext:
        if ct.degree == 1:
            return ct
        self._require_relin()
        self.counters.key_switches += 1
        return self._ct(ct.values, ct, degree = 1)

    def _mul_int(self, ct: RefCiphertext, k: int) -> RefCiphertext:
        return self._ct(ct.values * k, ct)

    def _relabel(self, ct: RefCiphertext, scale: float) -> RefCiphertext:
        return self._ct(ct.values * (ct.scale / scale), ct, scale = scale)

    def _rescale(self, ct: RefCiphertext) -> RefCiphertext:
        return self._ct(ct.values, ct, level = ct.level - 1, scale = ct.scale / self.params.modulus_chain[ct.level])

    def _drop(self, ct: RefCiphertext, level: int) -> RefCiphertext:
        if level > ct.level:
            raise LevelExhaustedError(f'Cannot raise level {ct.level} to {level}')
        return self._ct(ct.values, ct, level = level)

    def _bring_down(self, ct: RefCiphertext, level: int, scale: float) -> RefCiphertext:
        return self._ct(ct.values, ct, level = level, scale = scale)

    def _match_scale(self, ct: RefCiphertext, scale: float) -> RefCiphertext:
        return self._ct(ct.values, ct, scale = scale)

    def _mul_const(self, ct: RefCiphertext, c: float, k: int, scale: float) -> RefCiphertext:
        return self._ct(ct.values * c, ct, level = ct.level - 1, scale = scale)

    def _rotate(self, ct: RefCiphertext, offset: int) -> RefCiphertext:
        if not self.has_rotation_key(offset):
            raise MissingKeyError(f'No rotation key for {offset=}')
        offset %= len(ct.values)
        return self._ct(np.concatenate((ct.values[offset:], ct.values[:offset])), ct)
