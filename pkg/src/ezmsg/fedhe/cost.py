import json
import math
import typing

from dataclasses import dataclass, asdict
from fractions import Fraction
from pathlib import Path

import numpy as np

import ezmsg.core as ez

from .params import RingParams, build_chain, post_q_sec
from .ledger import Counters
from .approx import bsgs_mul_count
from .network import NetworkSpec, compile_network, layer_dims
from .packing import next_pow2
from .engine import Engine, LocalCollective
from .reference import ReferenceContext, RefBootstrapRequest, RefShare
from .serialize import ciphertext_size, wire_size
from .errors import PlanningError, PackingError, SecurityError, ParameterError

RING_DIMS = tuple(2 ** k for k in range(12, 16))
LEVEL_RANGE = tuple(range(3, 13))
PLAINTEXT_BOUND = 2.0
MIN_HEADROOM = 2.0


def bootstrap_count(layers: int, degree: int, levels: int, tau: int, r: typing.Union[int, Fraction] = 1) -> Fraction:
    """
    Refreshes per forward and backward pass: the levels a pass consumes,
    layers * (5 + ceil(log2(d + 1)) + ceil(log2 d)), over the depth usable
    between refreshes (levels - tau) times r multiplications per rescale.
    """
    if levels <= tau:
        raise PlanningError(f'{levels=} leaves no depth above {tau=}')
    r = Fraction(r)
    if r < 1:
        raise PlanningError(f'{r=} must be at least one')
    if layers == 0:
        return Fraction(0)
    consumed = 5 + math.ceil(math.log2(degree + 1)) + math.ceil(math.log2(max(degree, 1)))
    return Fraction(layers * consumed) / ((levels - tau) * r)


def network_dims(spec: NetworkSpec) -> typing.List[int]:
    """ Padded h_0 .. h_l of the weight layers """
    dims = layer_dims(spec)
    return [next_pow2(dims[0][0])] + [next_pow2(n_out) for _, n_out, _ in dims]


def rotation_budget(spec: NetworkSpec) -> int:
    """
    Rotations of one forward and one backward pass: each layer pays
    log2 h_(i-1) + log2 h_(i+1) per pass (h_(l+1) = h_l) and the output
    layer saves log2 h_l in each pass.
    """
    h = network_dims(spec)
    h = h + [h[-1]]
    per_pass = sum(int(math.log2(h[i - 1])) + int(math.log2(h[i + 1])) for i in range(1, len(h) - 1))
    return 2 * per_pass - 2 * int(math.log2(h[-2]))


@dataclass(frozen = True)
class CostModel:
    """
    Operation costs in abstract units for ring dimension N and a chain of
    `levels` primes. alpha counts the key-switching primes, so a key
    switch at level l decomposes into ceil((l + 1) / alpha) digits.
    Costs are taken at the top level unless a level is given.
    """
    ring_dim: int
    levels: int
    alpha: int = 1

    @property
    def top(self) -> int:
        return self.levels - 1

    def _level(self, level: typing.Optional[int]) -> int:
        return self.top if level is None else level

    def beta(self, level: typing.Optional[int] = None) -> int:
        return math.ceil((self._level(level) + 1) / self.alpha)

    @property
    def _nlogn(self) -> float:
        return self.ring_dim * math.log2(self.ring_dim)

    def key_switch(self, level: typing.Optional[int] = None) -> float:
        level = self._level(level)
        return self._nlogn * level * self.beta(level)

    def mul_pt(self, level: typing.Optional[int] = None) -> float:
        return 2 * self.ring_dim * (self._level(level) + 1)

    def mul_ct(self, level: typing.Optional[int] = None) -> float:
        return 4 * self.ring_dim * (self._level(level) + 1) + self.key_switch(level)

    def activation(self, degree: int, level: typing.Optional[int] = None) -> float:
        if degree < 1:
            return 0.0
        return bsgs_mul_count(degree) * self.mul_ct(level)

    def rotate(self, s: int, level: typing.Optional[int] = None) -> float:
        """ RIS or RR over s blocks """
        return math.log2(s) * self.key_switch(level)

    def bootstrap(self, level: typing.Optional[int] = None) -> float:
        return self._nlogn * (self.top + 1) + self._nlogn * (self._level(level) + 1)

    def forward(self, h_prev: int, h_next: int, degree: int) -> float:
        return (math.log2(h_prev) + math.log2(h_next)) * self.key_switch() + self.mul_ct() + self.mul_pt() + self.activation(degree)

    def backward(self, h_prev: int, h_next: int, degree: int) -> float:
        return (math.log2(h_prev) + math.log2(h_next)) * self.key_switch() + 2 * self.mul_ct() + self.mul_pt() + self.activation(degree - 1)

    def map(self, dims: typing.Sequence[int], degrees: typing.Sequence[int]) -> float:
        """ One local pass over every layer: sum of FP + BP, less the output layer's saving """
        h = list(dims) + [dims[-1]]
        total = sum(
            self.forward(h[i - 1], h[i + 1], degrees[i - 1]) + self.backward(h[i - 1], h[i + 1], degrees[i - 1])
            for i in range(1, len(h) - 1)
        )
        return total - 2 * math.log2(h[-2]) * self.key_switch()

    def reduce(self, layers: int) -> float:
        return layers * (self.mul_pt() + self.bootstrap())


def _degrees(spec: NetworkSpec) -> typing.List[int]:
    return [layer.degree for layer in spec.weight_layers]


def cost_eval(
    ring_dim: int,
    levels: int,
    spec: NetworkSpec,
    parties: int = 1,
    iterations: typing.Optional[int] = None,
    tau: int = 1,
    r: int = 1,
    alpha: int = 1
) -> float:
    """
    m * (sum over layers of (2 log2 h_(i-1) + log2 h_(i+1)) KS + 3 Mul_ct
    + 2 Mul_pt + phi + phi', less 2 log2 h_l KS, plus B refreshes), with
    every operation priced at the top level.
    """
    m = spec.iterations if iterations is None else iterations
    if m == 0:
        return 0.0
    model = CostModel(ring_dim, levels, alpha)
    h = network_dims(spec)
    h = h + [h[-1]]
    degrees = _degrees(spec)
    ks = model.key_switch()
    inner = 0.0
    for i in range(1, len(h) - 1):
        d = degrees[i - 1]
        inner += (2 * math.log2(h[i - 1]) + math.log2(h[i + 1])) * ks
        inner += 3 * model.mul_ct() + 2 * model.mul_pt() + model.activation(d) + model.activation(d - 1)
    inner -= 2 * math.log2(h[-2]) * ks
    B = math.ceil(bootstrap_count(len(degrees), max(degrees), levels, tau, r))
    return m * (inner + B * model.bootstrap())


def headroom(chain: typing.Sequence[int], security: int, parties: int, plaintext_bound: float = PLAINTEXT_BOUND) -> typing.Optional[int]:
    """ Smallest tau with Q_(tau - 1) > 2^security * |plaintext| * N, None if no prefix suffices """
    need = security + math.log2(plaintext_bound * parties)
    bits = 0.0
    for i, q in enumerate(chain):
        bits += math.log2(q)
        if bits > need:
            return i + 1
    return None


@dataclass
class CryptoPlan:
    ring_dim: int
    levels: int
    scale_bits: int
    chain: typing.Tuple[int, ...]
    tau: int
    security: int
    parties: int
    r: int = 1
    plaintext_bound: float = PLAINTEXT_BOUND
    bootstraps: str = '0'
    bootstraps_per_iteration: int = 0
    cipher_counts: typing.Tuple[int, ...] = ()
    cost: float = 0.0
    bytes_per_iteration: int = 0
    notes: typing.Tuple[str, ...] = ()

    @property
    def log_q(self) -> float:
        return sum(math.log2(q) for q in self.chain)

    @property
    def bootstrap_level(self) -> int:
        return self.tau - 1

    @property
    def slots(self) -> int:
        return self.ring_dim // 2

    def ring_params(self) -> RingParams:
        return RingParams.create(self.ring_dim, self.levels - 1, self.scale_bits, security_level = self.security)

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        out = asdict(self)
        out.update(
            chain = [str(q) for q in self.chain],
            chain_bits = [q.bit_length() for q in self.chain],
            log_q = round(self.log_q, 3),
            bootstrap_level = self.bootstrap_level,
            cipher_counts = list(self.cipher_counts),
            notes = list(self.notes),
        )
        return out

    def write(self, path: typing.Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent = 2))

    def describe(self) -> str:
        lines = [
            f'ring_dim        {self.ring_dim} ({self.slots} slots)',
            f'levels          {self.levels} primes, log2 Q = {self.log_q:.1f}',
            f'chain bits      {[q.bit_length() for q in self.chain]}',
            f'scale           2^{self.scale_bits}',
            f'tau             {self.tau} (refresh at level {self.bootstrap_level})',
            f'refreshes       {self.bootstraps} per pass, {self.bootstraps_per_iteration} scheduled',
            f'ciphertexts     {list(self.cipher_counts)}',
            f'cost            {self.cost:.4g}',
            f'bytes/iteration {self.bytes_per_iteration}',
        ]
        lines += [f'note            {n}' for n in self.notes]
        return '\n'.join(lines)


REINTERPRETED = (
    'Q = kS is enforced with k >= 2 (one full rescale of headroom)',
    '|plaintext| is the bound on plaintext values',
)


def _candidate(
    spec: NetworkSpec, ring_dim: int, levels: int, security: int, scale_bits: int, parties: int,
    plaintext_bound: float, r: int, iterations: typing.Optional[int]
) -> typing.Tuple[typing.Optional[CryptoPlan], typing.Optional[str]]:
    try:
        chain, _ = build_chain(ring_dim, levels - 1, scale_bits)
    except ParameterError:
        return None, 'primes'
    log_q = sum(math.log2(q) for q in chain)
    try:
        if post_q_sec(log_q, security) > ring_dim:
            return None, 'security'
    except (PlanningError, SecurityError):
        return None, 'security'
    if log_q - scale_bits < math.log2(MIN_HEADROOM):
        return None, 'scale'
    tau = headroom(chain, security, parties, plaintext_bound)
    if tau is None or tau >= levels:
        return None, 'bootstrap'
    try:
        plan = compile_network(spec, ring_dim // 2)
    except PackingError:
        return None, 'packing'
    degrees = _degrees(spec)
    B = bootstrap_count(len(degrees), max(degrees), levels, tau, r)
    cost = cost_eval(ring_dim, levels, spec, parties, iterations, tau, r)
    return CryptoPlan(
        ring_dim = ring_dim, levels = levels, scale_bits = scale_bits, chain = tuple(chain),
        tau = tau, security = security, parties = parties, r = r, plaintext_bound = plaintext_bound,
        bootstraps = str(B), bootstraps_per_iteration = math.ceil(B),
        cipher_counts = tuple(layer.layout.cipher_count for layer in plan.layers),
        cost = cost, notes = REINTERPRETED
    ), None


def select_params(
    spec: NetworkSpec,
    security: int = 128,
    scale_bits: int = 32,
    parties: int = 1,
    iterations: typing.Optional[int] = None,
    ring_dims: typing.Sequence[int] = RING_DIMS,
    level_range: typing.Sequence[int] = LEVEL_RANGE,
    plaintext_bound: float = PLAINTEXT_BOUND,
    r: int = 1
) -> CryptoPlan:
    """
    Exhaustive search for the cheapest feasible (ring_dim, levels). A
    candidate is feasible when its chain fits the security table, leaves
    at least one rescale above the scale, has a refresh level with
    Q_(tau - 1) > 2^security * |plaintext| * N and packs the network.
    """
    best: typing.Optional[CryptoPlan] = None
    rejected: typing.Dict[str, int] = {}
    for ring_dim in ring_dims:
        for levels in level_range:
            plan, reason = _candidate(spec, ring_dim, levels, security, scale_bits, parties, plaintext_bound, r, iterations)
            if plan is None:
                rejected[reason] = rejected.get(reason, 0) + 1
                continue
            if best is None or (plan.cost, plan.ring_dim, plan.levels) < (best.cost, best.ring_dim, best.levels):
                best = plan
    if best is None:
        binding = max(rejected, key = rejected.get) if rejected else 'none'
        raise PlanningError(f'No feasible parameters; binding constraint {binding!r} ({rejected})')
    best.bytes_per_iteration = comm_estimate(best, spec, parties).total
    ez.logger.info(f'Selected ring_dim={best.ring_dim} levels={best.levels} cost={best.cost:.4g}')
    return best


def check_plan(plan: CryptoPlan) -> typing.List[str]:
    """ Re-derive every constraint from the chain itself; returns the violated ones """
    violated = []
    if len(plan.chain) != plan.levels:
        violated.append('levels')
    log_q = sum(math.log2(q) for q in plan.chain)
    try:
        if plan.ring_dim < post_q_sec(log_q, plan.security):
            violated.append('security')
    except (PlanningError, SecurityError):
        violated.append('security')
    if 2.0 ** (log_q - plan.scale_bits) < MIN_HEADROOM:
        violated.append('scale')
    if not 1 <= plan.tau < plan.levels:
        violated.append('bootstrap')
    else:
        bits = sum(math.log2(q) for q in plan.chain[: plan.tau])
        if bits <= plan.security + math.log2(plan.plaintext_bound * plan.parties):
            violated.append('bootstrap')
    if any(q % (2 * plan.ring_dim) != 1 for q in plan.chain):
        violated.append('primes')
    return violated


# Traffic

@dataclass(frozen = True)
class CommEstimate:
    map: int = 0
    combine: int = 0
    lgd_refresh: int = 0
    reduce_refresh: int = 0

    @property
    def total(self) -> int:
        return self.map + self.combine + self.lgd_refresh + self.reduce_refresh


@dataclass(frozen = True)
class IterationProfile:
    """ What one party's LGD and the root's update cost, from a dry run on the reference backend """
    parties: int
    local_batch: int
    model_ciphers: int
    model_level: int
    gradient_levels: typing.Tuple[int, ...]
    lgd: Counters
    update: Counters
    lgd_refresh_bytes: int
    update_refresh_bytes: int
    rotation_budget: int


def refresh_bytes(params: RingParams, level: int, transform_key: str = 'identity') -> int:
    """ One party's request plus share for a refresh at level """
    request = RefBootstrapRequest(level = level, scale = 1.0, nonce = 0)
    size = wire_size(request, params) - len(request.transform.key.encode()) + len(transform_key.encode())
    return size + wire_size(RefShare('bootstrap', 0, level), params)


def comm_estimate(
    plan: typing.Union[CryptoPlan, RingParams],
    spec: NetworkSpec,
    parties: int,
    profile: typing.Optional[IterationProfile] = None
) -> CommEstimate:
    """
    Bytes per global iteration: the model down and the gradients up every
    edge, z (N - 1) |c| each, plus (N - 1) (request + share) per refresh.
    Every party refreshes during its LGD, the root during the update.
    Without a profile, gradients travel at the refresh level and the
    schedule uses the planned refresh count.
    """
    if parties <= 1:
        return CommEstimate()
    params = plan.ring_params() if isinstance(plan, CryptoPlan) else plan
    edges = parties - 1
    top = params.initial_level
    if profile is not None:
        down = profile.model_ciphers * ciphertext_size(params, profile.model_level)
        up = sum(ciphertext_size(params, level) for level in profile.gradient_levels)
        lgd = parties * edges * profile.lgd_refresh_bytes
        reduce = edges * profile.update_refresh_bytes
        return CommEstimate(map = edges * down, combine = edges * up, lgd_refresh = lgd, reduce_refresh = reduce)

    if isinstance(plan, CryptoPlan):
        z = sum(plan.cipher_counts)
        boot = plan.bootstrap_level
        per_pass = plan.bootstraps_per_iteration
    else:
        net = compile_network(spec, params.slots)
        z = net.cipher_count
        boot = 0
        per_pass = 0
    c = ciphertext_size(params, top)
    refresh = refresh_bytes(params, boot)
    return CommEstimate(
        map = edges * z * c,
        combine = edges * z * ciphertext_size(params, boot),
        lgd_refresh = parties * edges * per_pass * spec.local_batch * refresh,
        reduce_refresh = edges * z * refresh_bytes(params, top),
    )


class RecordingCollective(LocalCollective):
    """ In-process refreshes that also tally what they would put on the wire """

    def __init__(self, ev, shares) -> None:
        super().__init__(ev, shares)
        self.refresh_bytes = 0
        self.refresh_levels: typing.List[int] = []

    def bootstrap(self, ct, transform = None):
        ev = self.ev
        ev.check_bootstrap(ct.level, self.n_parties)
        request = ev.bootstrap_request(ct, transform)
        shares = [ev.bootstrap_share(request, s) for s in self.shares]
        self.refresh_levels.append(ct.level)
        self.refresh_bytes += wire_size(request, ev.params) + wire_size(shares[0], ev.params)
        return ev.combine_bootstrap(ct, request, shares)


def profile_iteration(
    spec: NetworkSpec,
    params: RingParams,
    parties: int,
    seed: int = 0,
    mask_bits: typing.Optional[int] = None,
    message_bits: typing.Optional[int] = None,
    boot_level: typing.Optional[int] = None
) -> IterationProfile:
    """ Dry run of one LGD and one update on random data """
    ev = ReferenceContext(params, seed = seed, mask_bits = mask_bits, message_bits = message_bits)
    shares = ev.sec_key_gen(parties, seed)
    plan = compile_network(spec, ev.slots)
    ev.keys = ev.d_key_gen(shares, plan.rotation_offsets())
    collective = RecordingCollective(ev, shares)
    engine = Engine(ev, plan, collective, boot_level)
    model = engine.init_model(ev.keys.public, seed)

    rng = np.random.default_rng(seed)
    b = spec.local_batch
    xs = rng.uniform(-1.0, 1.0, size = (b, spec.input_dim))
    ys = np.eye(plan.output.n_out)[rng.integers(0, plan.output.n_out, size = b)]

    ev.counters.reset()
    grads = engine.lgd_compute(model, xs, ys)
    lgd = ev.counters.snapshot()
    lgd_bytes = collective.refresh_bytes

    ev.counters.reset()
    collective.refresh_bytes = 0
    engine.apply_update(model, grads, global_batch = b * parties)
    update = ev.counters.snapshot()

    return IterationProfile(
        parties = parties,
        local_batch = b,
        model_ciphers = model.cipher_count,
        model_level = ev.top_level,
        gradient_levels = tuple(ct.level for ct in grads.ciphers()),
        lgd = lgd,
        update = update,
        lgd_refresh_bytes = lgd_bytes,
        update_refresh_bytes = collective.refresh_bytes,
        rotation_budget = b * (plan.forward_rotations() + plan.backward_rotations()),
    )
