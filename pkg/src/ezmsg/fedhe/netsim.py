import json
import typing

from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field, asdict
from pathlib import Path

import ezmsg.core as ez

from .params import RingParams
from .mhe import (
    Ciphertext,
    PublicKey,
    SwitchingKey,
    CollectiveKeys,
    PublicKeyShare,
    RelinShare,
    RotationKeyShare,
    DecryptionShare,
    KeySwitchShare,
    BootstrapRequest,
    BootstrapShare,
)
from .reference import RefCiphertext, RefPublicKey, RefCollectiveKeys, RefShare, RefBootstrapRequest
from .serialize import wire_size
from .errors import WireHygieneError, ProtocolError

DEFAULT_DELAY_MS = 0.17
DEFAULT_BANDWIDTH_GBPS = 1.0

PHASES = ('prepare', 'map', 'combine', 'reduce', 'bootstrap', 'key_switch', 'decrypt', 'predict')

# Ciphertexts, public keys and protocol shares; nothing else crosses a party boundary
WIRE_TYPES: typing.Tuple[type, ...] = (
    RingParams,
    Ciphertext,
    PublicKey,
    SwitchingKey,
    CollectiveKeys,
    PublicKeyShare,
    RelinShare,
    RotationKeyShare,
    DecryptionShare,
    KeySwitchShare,
    BootstrapRequest,
    BootstrapShare,
    RefCiphertext,
    RefPublicKey,
    RefCollectiveKeys,
    RefShare,
    RefBootstrapRequest,
)

LOCAL_SHARE_KINDS = frozenset({'relin_ephemeral'})

Edge = typing.Tuple[int, int]


def check_wire(msg: typing.Any) -> None:
    if not isinstance(msg, WIRE_TYPES):
        raise WireHygieneError(f'{type(msg).__name__} may not leave its owner')
    if isinstance(msg, RefShare) and msg.kind in LOCAL_SHARE_KINDS:
        raise WireHygieneError(f'{msg.kind} shares may not leave their owner')


@dataclass
class LinkStats:
    messages: int = 0
    bytes: int = 0
    seconds: float = 0.0

    def add(self, size: int, seconds: float) -> None:
        self.messages += 1
        self.bytes += size
        self.seconds += seconds


@dataclass
class WireStats:
    """ Traffic per edge, per phase and in total; every message lands in all three """
    edges: typing.Dict[str, LinkStats] = field(default_factory = dict)
    phases: typing.Dict[str, LinkStats] = field(default_factory = dict)
    total: LinkStats = field(default_factory = LinkStats)
    types: typing.Dict[str, int] = field(default_factory = dict)

    def record(self, edge: Edge, phase: str, kind: str, size: int, seconds: float) -> None:
        self.edges.setdefault(f'{edge[0]}->{edge[1]}', LinkStats()).add(size, seconds)
        self.phases.setdefault(phase, LinkStats()).add(size, seconds)
        self.total.add(size, seconds)
        self.types[kind] = self.types.get(kind, 0) + 1

    def conserved(self) -> bool:
        by_edge = sum(s.bytes for s in self.edges.values())
        by_phase = sum(s.bytes for s in self.phases.values())
        return by_edge == by_phase == self.total.bytes

    def to_dict(self) -> typing.Dict[str, typing.Any]:
        return dict(
            total = asdict(self.total),
            phases = {k: asdict(v) for k, v in sorted(self.phases.items())},
            edges = {k: asdict(v) for k, v in sorted(self.edges.items())},
            types = dict(sorted(self.types.items())),
        )

    def write(self, path: typing.Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent = 2))


@dataclass(frozen = True)
class Receipt:
    edge: Edge
    phase: str
    kind: str
    bytes: int
    sent: float
    arrival: float


class SimNetwork:
    """
    In-process message passing between numbered parties. Every edge is a
    FIFO queue with its own transmit line: a message occupies the line for
    size / bandwidth seconds and arrives one propagation delay later. The
    simulated clock only moves on receive and at phase barriers.
    """

    def __init__(
        self,
        params: RingParams,
        delay_ms: float = DEFAULT_DELAY_MS,
        bandwidth_gbps: float = DEFAULT_BANDWIDTH_GBPS
    ) -> None:
        if delay_ms < 0.0 or bandwidth_gbps <= 0.0:
            raise ProtocolError(f'Bad link settings {delay_ms=} {bandwidth_gbps=}')
        self.params = params
        self.delay = delay_ms * 1e-3
        self.bandwidth = bandwidth_gbps * 1e9
        self.clock = 0.0
        self.stats = WireStats()
        self._phases: typing.List[str] = []
        self._line_free: typing.Dict[Edge, float] = {}
        self._queues: typing.Dict[Edge, typing.Deque[typing.Tuple[Receipt, typing.Any]]] = {}
        self._latest = 0.0

    @property
    def current_phase(self) -> str:
        """ Nested phases are joined, e.g. 'map/bootstrap' for refreshes inside LGD """
        return '/'.join(self._phases) if self._phases else 'prepare'

    @contextmanager
    def phase(self, name: str) -> typing.Iterator[None]:
        if name not in PHASES:
            raise ProtocolError(f'Unknown phase {name!r}')
        nested = bool(self._phases) and self._phases[-1] == name
        if not nested:
            self._phases.append(name)
        try:
            yield
        finally:
            if not nested:
                self._phases.pop()

    def transfer_time(self, size: int) -> float:
        """ Seconds from first bit sent to last bit received """
        return self.delay + size * 8.0 / self.bandwidth

    def deliver(self, msg: typing.Any, src: int, dst: int, at: typing.Optional[float] = None) -> Receipt:
        check_wire(msg)
        edge = (src, dst)
        size = wire_size(msg, self.params)
        start = max(self.clock if at is None else at, self._line_free.get(edge, 0.0))
        wire = size * 8.0 / self.bandwidth
        self._line_free[edge] = start + wire
        receipt = Receipt(
            edge = edge, phase = self.current_phase, kind = type(msg).__name__,
            bytes = size, sent = start, arrival = start + self.delay + wire
        )
        self._queues.setdefault(edge, deque()).append((receipt, msg))
        self.stats.record(edge, receipt.phase, receipt.kind, size, receipt.arrival - start)
        self._latest = max(self._latest, receipt.arrival)
        ez.logger.debug(f'{receipt.kind} {src}->{dst} {size=} arrival={receipt.arrival:.6f}')
        return receipt

    def receive(self, src: int, dst: int) -> typing.Tuple[typing.Any, float]:
        """ Oldest pending message on the edge and its arrival time """
        queue = self._queues.get((src, dst))
        if not queue:
            raise ProtocolError(f'Nothing pending on {src}->{dst}')
        receipt, msg = queue.popleft()
        return msg, receipt.arrival

    def send(self, msg: typing.Any, src: int, dst: int, at: typing.Optional[float] = None) -> typing.Tuple[typing.Any, float]:
        self.deliver(msg, src, dst, at)
        return self.receive(src, dst)

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())

    def barrier(self) -> float:
        """ Advance the clock past every delivery so far """
        if self.pending():
            raise ProtocolError(f'{self.pending()} messages were never received')
        self.clock = max(self.clock, self._latest)
        return self.clock

    def type_counts(self) -> typing.Dict[str, int]:
        return dict(self.stats.types)
