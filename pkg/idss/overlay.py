# This code is part of the IDSS project.
#
# (C) Copyright IDSS developers 2024.
#
# This code is licensed under the Apache License, Version 2.0. You may
# obtain a copy of this license in the LICENSE.txt file in the root directory
# of this source tree or at http://www.apache.org/licenses/LICENSE-2.0.
#
# Any modifications or derivative works of this code must retain this
# copyright notice, and modified files need to carry a notice indicating
# that they have been altered from the originals.

# Reminder: update the RST file in docs/apidocs when adding new interfaces.
"""The structured overlay: identifier ring, messages, transport and the simulated network."""

from __future__ import annotations

import bisect
import hashlib
import heapq
import itertools
import logging
import math
from collections import Counter
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Union

import numpy as np

from .query_state import INITIATOR_SENTINEL, Uqi

logger = logging.getLogger(__name__)

PeerId = int

ID_BITS = 128


class MembershipError(ValueError):
    """Base class for ring membership errors."""


class AlreadyMemberError(MembershipError):
    """The peer is already part of the ring."""


class EmptyRingError(MembershipError):
    """The ring has no members."""


class ReservedPeerIdError(MembershipError):
    """The peer id is reserved for the initiator sentinel or out of range."""


def peer_id_from_name(name: str) -> PeerId:
    """Hash a peer name onto the identifier ring, avoiding the reserved id."""
    value = int.from_bytes(hashlib.blake2b(name.encode(), digest_size=16).digest(), "big")
    return value or 1


@dataclass(frozen=True)
class Ring:
    """The members of the overlay, sorted by id."""

    members: tuple[PeerId, ...] = ()

    def __post_init__(self):
        """Keep members sorted and unique."""
        object.__setattr__(self, "members", tuple(sorted(set(self.members))))

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, peer: object) -> bool:
        index = bisect.bisect_left(self.members, peer)  # type: ignore[arg-type]
        return index < len(self.members) and self.members[index] == peer

    def __iter__(self) -> Iterator[PeerId]:
        return iter(self.members)

    def position(self, peer: PeerId) -> int:
        """The position of a member in id order."""
        index = bisect.bisect_left(self.members, peer)
        if index == len(self.members) or self.members[index] != peer:
            raise MembershipError(f"Peer {peer:x} is not a member of the ring.")
        return index


def join(ring: Ring, peer: PeerId) -> Ring:
    """Add a peer to the ring.

    Raises:
        ReservedPeerIdError: The id is the initiator sentinel or does not fit in 128 bits.
        AlreadyMemberError: The peer is already a member.

    """
    if peer == INITIATOR_SENTINEL or not 0 <= peer < 2**ID_BITS:
        raise ReservedPeerIdError(f"Peer id {peer} is reserved or out of range.")
    if peer in ring:
        raise AlreadyMemberError(f"Peer {peer:x} is already a member of the ring.")
    return Ring((*ring.members, peer))


def leave(ring: Ring, peer: PeerId) -> Ring:
    """Remove a peer from the ring."""
    ring.position(peer)
    return Ring(tuple(member for member in ring.members if member != peer))


def route(ring: Ring, key: int) -> PeerId:
    """The peer responsible for a key: its successor on the ring, wrapping around.

    Raises:
        EmptyRingError: The ring has no members.

    """
    if not ring.members:
        raise EmptyRingError("Cannot route on an empty ring.")
    index = bisect.bisect_left(ring.members, key % 2**ID_BITS)
    return ring.members[index % len(ring.members)]


def broadcast_children(ring: Ring, self_id: PeerId, k: int) -> list[PeerId]:
    """The peers a query is forwarded to from ``self_id``.

    With ``N`` members and ``s = ceil(N ** (1 / k))`` the neighbors sit at ring offsets
    ``1, s, s**2, ..., s**(k - 1)`` from ``self_id``. Offsets that wrap onto ``self_id`` or onto
    an earlier neighbor are dropped. Every member is reachable from every other member within
    ``k * (s - 1)`` hops.

    Args:
        ring: The current members
        self_id: The forwarding peer, a member of ``ring``
        k: The fan-out, at least 1

    Returns:
        Up to ``k`` distinct peers, never ``self_id``.

    """
    if k < 1:
        raise ValueError("The fan-out must be a positive integer.")
    size = len(ring)
    position = ring.position(self_id)
    if size == 1:
        return []
    step = max(2, math.ceil(size ** (1 / k) - 1e-9))
    children: list[PeerId] = []
    for exponent in range(k):
        offset = step**exponent % size
        if offset == 0:
            continue
        child = ring.members[(position + offset) % size]
        if child not in children:
            children.append(child)
    return children


# ----------------------------------------------------------------------------------
# Messages
# ----------------------------------------------------------------------------------


@dataclass(frozen=True)
class QueryBroadcast:
    """A query travelling away from its initiator."""

    uqi: Uqi
    sql: str
    ttl: int
    sender_key: PeerId
    initiator: PeerId


@dataclass(frozen=True)
class ResultReturn:
    """A merged partial result travelling back toward the initiator."""

    uqi: Uqi
    payload: Any
    origin: PeerId
    contributors: frozenset[PeerId] = frozenset()


@dataclass(frozen=True)
class OverlayMessage:
    """A message between two peers."""

    body: Union[QueryBroadcast, ResultReturn]
    source: PeerId
    destination: PeerId
    send_time: int


class LatencyKind(str, Enum):
    """Supported one-way latency distributions."""

    UNIFORM = "uniform"
    CONSTANT = "constant"
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class LatencyDistribution:
    """A one-way latency distribution, in whole milliseconds."""

    kind: LatencyKind = LatencyKind.UNIFORM
    low: int = 5
    high: int = 50
    mean: float = 20.0

    def __post_init__(self):
        """Validate the parameters."""
        object.__setattr__(self, "kind", LatencyKind(self.kind))
        if self.low < 0 or self.high < self.low:
            raise ValueError("Latency bounds must satisfy 0 <= low <= high.")
        if self.mean <= 0:
            raise ValueError("The mean latency must be positive.")

    def sample(self, rng: np.random.Generator) -> int:
        """Draw one latency."""
        if self.kind is LatencyKind.CONSTANT:
            return self.low
        if self.kind is LatencyKind.UNIFORM:
            return int(rng.integers(self.low, self.high, endpoint=True))
        return self.low + int(round(rng.exponential(self.mean)))


_MESSAGE_KIND_CODES = {QueryBroadcast: 1, ResultReturn: 2}


@dataclass(frozen=True)
class TransportModel:
    """Latency and loss of the links between peers.

    Draws for a message depend only on the seed and on the message identity (kind, endpoints
    and query identifier), so the same message is delayed or dropped identically whatever else
    happens in the run.
    """

    latency: LatencyDistribution = field(default_factory=LatencyDistribution)
    loss: float = 0.0
    seed: int = 0

    def __post_init__(self):
        """Validate the loss probability."""
        if not 0.0 <= self.loss <= 1.0:
            raise ValueError("The loss probability must be within [0, 1].")

    def draw(self, message: OverlayMessage) -> tuple[bool, int]:
        """Decide whether a message is dropped and how long it travels.

        Returns:
            - Whether the message is dropped
            - The latency in milliseconds

        """
        body = message.body
        rng = np.random.default_rng(
            [
                self.seed,
                _MESSAGE_KIND_CODES[type(body)],
                message.source,
                message.destination,
                body.uqi.value,
            ]
        )
        dropped = bool(rng.random() < self.loss)
        return dropped, self.latency.sample(rng)


@dataclass(frozen=True)
class Delivery:
    """A message scheduled for delivery."""

    at: int
    message: OverlayMessage


class Dropped:
    """Marker for a message the transport lost."""

    def __repr__(self) -> str:
        return "DROPPED"


DROPPED = Dropped()


def send(
    transport: TransportModel, message: OverlayMessage, ring: Ring | None = None
) -> Delivery | Dropped:
    """Apply the transport model to a message.

    Args:
        transport: Latency and loss model
        message: The message
        ring: When given, messages to peers outside the ring are dropped

    Returns:
        The scheduled delivery, or :data:`DROPPED`.

    """
    if ring is not None and message.destination not in ring:
        return DROPPED
    dropped, latency = transport.draw(message)
    if dropped:
        return DROPPED
    return Delivery(at=message.send_time + latency, message=message)


# ----------------------------------------------------------------------------------
# Event loop
# ----------------------------------------------------------------------------------


class EventKind(str, Enum):
    """The kinds of event log entries."""

    SUBMIT = "SUBMIT"
    SEND_BROADCAST = "SEND_BROADCAST"
    SEND_RESULT = "SEND_RESULT"
    DELIVER_BROADCAST = "DELIVER_BROADCAST"
    DELIVER_RESULT = "DELIVER_RESULT"
    DROP = "DROP"
    DEADLINE = "DEADLINE"
    COMPLETE = "COMPLETE"
    FAILED = "FAILED"


@dataclass(frozen=True)
class EventLogEntry:
    """One line of the event log."""

    time: int
    kind: EventKind
    source: PeerId
    destination: PeerId
    uqi: Uqi | None

    def __str__(self) -> str:
        uqi = "" if self.uqi is None else str(self.uqi)
        return f"{self.time},{self.kind.value},{self.source:x},{self.destination:x},{uqi}"


class Endpoint:
    """Something the network can deliver messages to."""

    def on_message(self, message: OverlayMessage) -> None:  # pragma: no cover
        """Handle a delivered message."""
        raise NotImplementedError


@dataclass(order=True)
class _Event:
    time: int
    sequence: int
    owner: PeerId = field(compare=False)
    action: Callable[[], None] = field(compare=False)


class Network:
    """A discrete-event simulation of the overlay.

    Events run in order of virtual time, ties broken by scheduling order. Peers that leave the
    ring stop receiving messages and timers; messages already in flight to them are dropped.
    """

    def __init__(self, transport: TransportModel | None = None):
        """Create an empty network with its clock at zero."""
        self.transport = transport or TransportModel()
        self.ring = Ring()
        self.now = 0
        self.log: list[EventLogEntry] = []
        self.messages: Counter[Uqi] = Counter()
        self.inbound_results: Counter[tuple[Uqi, PeerId]] = Counter()
        self._endpoints: dict[PeerId, Endpoint] = {}
        self._queue: list[_Event] = []
        self._sequence = itertools.count()

    def join(self, peer: PeerId, endpoint: Endpoint) -> None:
        """Add a peer to the ring and route its messages to ``endpoint``."""
        self.ring = join(self.ring, peer)
        self._endpoints[peer] = endpoint
        logger.debug("Peer %x joined at %d ms", peer, self.now)

    def leave(self, peer: PeerId) -> None:
        """Remove a peer from the ring (fail-stop)."""
        self.ring = leave(self.ring, peer)
        self._endpoints.pop(peer, None)
        logger.debug("Peer %x left at %d ms", peer, self.now)

    def is_member(self, peer: PeerId) -> bool:
        """Whether a peer is currently part of the ring."""
        return peer in self._endpoints

    def record(
        self, kind: EventKind, source: PeerId, destination: PeerId, uqi: Uqi | None
    ) -> None:
        """Append an entry to the event log."""
        self.log.append(EventLogEntry(self.now, kind, source, destination, uqi))

    def schedule(self, at: int, owner: PeerId, action: Callable[[], None]) -> None:
        """Run ``action`` at virtual time ``at`` if ``owner`` is still a member.

        ``owner`` may be :data:`~idss.query_state.INITIATOR_SENTINEL` for actions that do not
        belong to a peer.
        """
        heapq.heappush(self._queue, _Event(max(at, self.now), next(self._sequence), owner, action))

    def send(self, message: OverlayMessage) -> None:
        """Hand a message to the transport and schedule its delivery."""
        body = message.body
        if isinstance(body, QueryBroadcast):
            kind = EventKind.SEND_BROADCAST
        else:
            kind = EventKind.SEND_RESULT
        self.messages[body.uqi] += 1
        self.record(kind, message.source, message.destination, body.uqi)
        outcome = send(self.transport, message, self.ring)
        if isinstance(outcome, Dropped):
            self.record(EventKind.DROP, message.source, message.destination, body.uqi)
            return
        # Deliveries are owned by no peer so that messages to departed peers are logged as drops.
        delivery = _Event(
            outcome.at, next(self._sequence), INITIATOR_SENTINEL, lambda: self._deliver(message)
        )
        heapq.heappush(self._queue, delivery)

    def _deliver(self, message: OverlayMessage) -> None:
        body = message.body
        endpoint = self._endpoints.get(message.destination)
        if endpoint is None:
            self.record(EventKind.DROP, message.source, message.destination, body.uqi)
            return
        if isinstance(body, QueryBroadcast):
            self.record(EventKind.DELIVER_BROADCAST, message.source, message.destination, body.uqi)
        else:
            self.record(EventKind.DELIVER_RESULT, message.source, message.destination, body.uqi)
            self.inbound_results[(body.uqi, message.destination)] += 1
        endpoint.on_message(message)

    def pending(self) -> int:
        """The number of scheduled events."""
        return len(self._queue)

    def step(self) -> bool:
        """Run the next event. Returns ``False`` when nothing is scheduled."""
        while self._queue:
            event = heapq.heappop(self._queue)
            self.now = event.time
            if event.owner != INITIATOR_SENTINEL and event.owner not in self._endpoints:
                continue
            event.action()
            return True
        return False

    def run(self, until: int | None = None) -> int:
        """Run events until none remain or the next one is later than ``until``.

        Returns:
            The virtual time after the run.

        """
        while self._queue:
            if until is not None and self._queue[0].time > until:
                self.now = max(self.now, until)
                break
            self.step()
        return self.now

    def log_text(self) -> str:
        """The event log, one ``time,kind,src,dst,uqi`` line per event."""
        return "".join(f"{entry}\n" for entry in self.log)

    def digest(self) -> str:
        """SHA-256 of the event log, identical across runs with equal inputs."""
        return hashlib.sha256(self.log_text().encode()).hexdigest()
