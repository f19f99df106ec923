"""Deterministic in-memory message bus.

Delivery proceeds in rounds. Envelopes queued before a round starts are ready
together and are interleaved by a seeded generator that keeps the send order of
each (sender, recipient) pair; envelopes sent while handling a round wait for the
next one. Given the same seed and the same sends, the transcript is identical.
"""

import hashlib
import json
import logging
import random
from collections import deque
from enum import Enum
from pathlib import Path
from typing import Optional, Protocol, Union

from pydantic import BaseModel, ConfigDict, Field

from idchain.core.config import settings
from idchain.exceptions import (
    DuplicateActorError,
    LivelockError,
    RoutingError,
    UnknownActorError,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

BUS_ID = "netsim"
DELIVERY_FAILURE = "delivery_failure"


class Envelope(BaseModel):
    seq: int
    sender: str
    recipient: str
    kind: str
    payload: bytes
    step: Optional[int] = None
    flow_id: Optional[str] = None
    delivered: bool = False

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


class MatchRule(BaseModel):
    """Matches envelopes on sender, recipient and kind; None matches anything."""

    sender: Optional[str] = None
    recipient: Optional[str] = None
    kind: Optional[str] = None
    # 0 matches every envelope; n matches only the n-th matching envelope
    occurrence: int = Field(default=0, ge=0)

    model_config = ConfigDict(frozen=True)

    def matches(self, envelope: Envelope) -> bool:
        return (
            (self.sender is None or self.sender == envelope.sender)
            and (self.recipient is None or self.recipient == envelope.recipient)
            and (self.kind is None or self.kind == envelope.kind)
        )


class TamperRule(BaseModel):
    match: MatchRule
    byte_index: int = Field(ge=0)
    xor_mask: int = Field(default=0x01, ge=1, le=0xFF)

    model_config = ConfigDict(frozen=True)


class FaultConfig(BaseModel):
    offline_actors: set[str] = set()
    tamper_rules: list[TamperRule] = []
    drop_rules: list[MatchRule] = []


class DeliveryStatus(str, Enum):
    DELIVERED = "delivered"
    TAMPERED = "tampered"
    DROPPED = "dropped"
    UNDELIVERABLE = "undeliverable"
    NOTE = "note"


class TranscriptEntry(BaseModel):
    index: int
    time: int
    seq: Optional[int] = None
    step: Optional[int] = None
    flow_id: Optional[str] = None
    sender: str
    recipient: Optional[str] = None
    kind: str
    status: DeliveryStatus
    digest: Optional[str] = None
    detail: Optional[str] = None

    model_config = ConfigDict(frozen=True)


class Transcript:
    """Ordered record of every delivery attempt and protocol note."""

    def __init__(self, entries: Optional[list[TranscriptEntry]] = None):
        self.entries: list[TranscriptEntry] = list(entries or [])

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Transcript):
            return NotImplemented
        return self.entries == other.entries

    def append(self, **fields) -> TranscriptEntry:
        entry = TranscriptEntry(index=len(self.entries), **fields)
        self.entries.append(entry)
        return entry

    def filter(
        self,
        flow_id: Optional[str] = None,
        kind: Optional[str] = None,
        status: Optional[DeliveryStatus] = None,
        sender: Optional[str] = None,
        recipient: Optional[str] = None,
    ) -> list[TranscriptEntry]:
        return [
            e
            for e in self.entries
            if (flow_id is None or e.flow_id == flow_id)
            and (kind is None or e.kind == kind)
            and (status is None or e.status == status)
            and (sender is None or e.sender == sender)
            and (recipient is None or e.recipient == recipient)
        ]

    def steps(self, flow_id: str) -> list[int]:
        """Distinct flow steps in order of first appearance."""
        seen = []
        for entry in self.filter(flow_id=flow_id):
            if entry.step is not None and entry.step not in seen:
                seen.append(entry.step)
        return seen

    def to_jsonl(self) -> str:
        return "".join(entry.model_dump_json() + "\n" for entry in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        return cls(
            [
                TranscriptEntry.model_validate_json(line)
                for line in text.splitlines()
                if line.strip()
            ]
        )

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path: Union[str, Path]) -> "Transcript":
        return cls.from_jsonl(Path(path).read_text(encoding="utf-8"))


class SimClock:
    """Logical seconds, advanced explicitly."""

    def __init__(self, start: int = 0):
        if start < 0:
            raise ValueError("Clock cannot start before the epoch")
        self.now = start

    def advance(self, seconds: int) -> int:
        if seconds < 0:
            raise ValueError("Clock cannot move backwards")
        self.now += seconds
        return self.now

    def set(self, unix_time: int) -> int:
        if unix_time < self.now:
            raise ValueError(f"Clock cannot move backwards from {self.now}")
        self.now = unix_time
        return self.now


class Actor(Protocol):
    def handle(self, envelope: Envelope, bus: "MessageBus") -> None: ...


class MessageBus:
    def __init__(
        self,
        seed: int = 0,
        faults: Optional[FaultConfig] = None,
        clock: Optional[SimClock] = None,
        max_steps: Optional[int] = None,
        history_limit: Optional[int] = None,
    ):
        self.faults = faults or FaultConfig()
        self.clock = clock or SimClock()
        self.max_steps = max_steps or settings.NETSIM_MAX_STEPS
        self.transcript = Transcript()
        self._rng = random.Random(seed)
        self._actors: dict[str, Actor] = {}
        self._roles: dict[str, str] = {}
        self._denied_links: set[frozenset[str]] = set()
        self._queue: deque[Envelope] = deque()
        self._next_seq = 0
        self._match_counts: dict[int, int] = {}
        # most recent envelopes by seq, oldest evicted first
        self.history: dict[int, Envelope] = {}
        self.history_limit = history_limit or settings.NETSIM_HISTORY_LIMIT

    def __repr__(self) -> str:
        return (
            f"<MessageBus(actors={len(self._actors)}, queued={len(self._queue)}, "
            f"transcript={len(self.transcript)})>"
        )

    @property
    def actor_ids(self) -> list[str]:
        return sorted(self._actors)

    def role_of(self, actor_id: str) -> Optional[str]:
        return self._roles.get(actor_id)

    def register_actor(
        self, actor_id: str, actor: Actor, role: Optional[str] = None
    ) -> str:
        if actor_id in self._actors or actor_id == BUS_ID:
            raise DuplicateActorError(f"Actor id '{actor_id}' is already registered")
        self._actors[actor_id] = actor
        if role is not None:
            self._roles[actor_id] = role
        logger.debug(f"Registered actor '{actor_id}' ({role=})")
        return actor_id

    def actor(self, actor_id: str) -> Actor:
        try:
            return self._actors[actor_id]
        except KeyError:
            raise UnknownActorError(f"Unknown actor '{actor_id}'")

    def deny_link(self, role_a: str, role_b: str) -> None:
        self._denied_links.add(frozenset((role_a, role_b)))

    def set_online(self, actor_id: str, online: bool) -> None:
        self.actor(actor_id)
        if online:
            self.faults.offline_actors.discard(actor_id)
        else:
            self.faults.offline_actors.add(actor_id)

    def is_online(self, actor_id: str) -> bool:
        return actor_id not in self.faults.offline_actors

    def send(
        self,
        sender: str,
        recipient: str,
        kind: str,
        payload: bytes,
        step: Optional[int] = None,
        flow_id: Optional[str] = None,
    ) -> int:
        if sender != BUS_ID:
            self.actor(sender)
        self.actor(recipient)
        link = frozenset((self._roles.get(sender), self._roles.get(recipient)))
        if link in self._denied_links:
            raise RoutingError(
                f"Direct link {sender} -> {recipient} is not allowed "
                f"({self._roles.get(sender)} <-> {self._roles.get(recipient)})"
            )
        envelope = Envelope(
            seq=self._next_seq,
            sender=sender,
            recipient=recipient,
            kind=kind,
            payload=payload,
            step=step,
            flow_id=flow_id,
        )
        self._next_seq += 1
        self._queue.append(envelope)
        self._remember(envelope)
        logger.debug(f"Queued #{envelope.seq} {kind} {sender} -> {recipient}")
        return envelope.seq

    def note(
        self,
        actor_id: str,
        kind: str,
        step: Optional[int] = None,
        flow_id: Optional[str] = None,
        detail: Optional[str] = None,
        payload: Optional[bytes] = None,
    ) -> TranscriptEntry:
        """Record a local protocol event that involves no message."""
        return self.transcript.append(
            time=self.clock.now,
            step=step,
            flow_id=flow_id,
            sender=actor_id,
            kind=kind,
            status=DeliveryStatus.NOTE,
            digest=_digest(payload) if payload is not None else None,
            detail=detail,
        )

    def _rule_fires(self, rule_id: int, rule: MatchRule, envelope: Envelope) -> bool:
        if not rule.matches(envelope):
            return False
        self._match_counts[rule_id] = self._match_counts.get(rule_id, 0) + 1
        return rule.occurrence == 0 or self._match_counts[rule_id] == rule.occurrence

    def _remember(self, envelope: Envelope) -> None:
        self.history.pop(envelope.seq, None)
        self.history[envelope.seq] = envelope
        while len(self.history) > self.history_limit:
            del self.history[next(iter(self.history))]

    def _next_round(self) -> list[Envelope]:
        """Drain the queue in a seeded interleaving that keeps per-pair FIFO."""
        lanes: dict[tuple[str, str], deque[Envelope]] = {}
        while self._queue:
            envelope = self._queue.popleft()
            lanes.setdefault((envelope.sender, envelope.recipient), deque()).append(
                envelope
            )
        ordered = []
        while lanes:
            pair = self._rng.choice(sorted(lanes))
            ordered.append(lanes[pair].popleft())
            if not lanes[pair]:
                del lanes[pair]
        return ordered

    def _deliver(self, envelope: Envelope) -> None:
        base = dict(
            time=self.clock.now,
            seq=envelope.seq,
            step=envelope.step,
            flow_id=envelope.flow_id,
            sender=envelope.sender,
            recipient=envelope.recipient,
            kind=envelope.kind,
        )
        for rule_id, rule in enumerate(self.faults.drop_rules):
            if self._rule_fires(rule_id, rule, envelope):
                logger.info(f"Dropped #{envelope.seq} {envelope.kind}")
                self.transcript.append(
                    **base,
                    status=DeliveryStatus.DROPPED,
                    digest=_digest(envelope.payload),
                )
                return

        if not self.is_online(envelope.recipient):
            logger.warning(
                f"'{envelope.recipient}' is offline; #{envelope.seq} undeliverable"
            )
            self.transcript.append(
                **base,
                status=DeliveryStatus.UNDELIVERABLE,
                digest=_digest(envelope.payload),
                detail="recipient offline",
            )
            if envelope.sender != BUS_ID and self.is_online(envelope.sender):
                failure = {"seq": envelope.seq, "recipient": envelope.recipient}
                self.send(
                    BUS_ID,
                    envelope.sender,
                    DELIVERY_FAILURE,
                    json.dumps(failure, sort_keys=True).encode(),
                    step=envelope.step,
                    flow_id=envelope.flow_id,
                )
            return

        status = DeliveryStatus.DELIVERED
        payload = envelope.payload
        for offset, rule in enumerate(self.faults.tamper_rules):
            rule_id = len(self.faults.drop_rules) + offset
            if self._rule_fires(rule_id, rule.match, envelope):
                if rule.byte_index < len(payload):
                    mutated = bytearray(payload)
                    mutated[rule.byte_index] ^= rule.xor_mask
                    payload = bytes(mutated)
                    status = DeliveryStatus.TAMPERED
                    logger.info(
                        f"Tampered #{envelope.seq} {envelope.kind} at "
                        f"byte {rule.byte_index}"
                    )

        delivered = envelope.model_copy(update={"payload": payload, "delivered": True})
        self._remember(delivered)
        self.transcript.append(**base, status=status, digest=_digest(payload))
        self._actors[envelope.recipient].handle(delivered, self)

    def run_until_idle(self, seed: Optional[int] = None) -> Transcript:
        """Deliver queued envelopes, and any they cause, until the queue is empty."""
        if seed is not None:
            self._rng.seed(seed)
        steps = 0
        while self._queue:
            pending = deque(self._next_round())
            try:
                while pending:
                    steps += 1
                    if steps > self.max_steps:
                        raise LivelockError(
                            f"Bus exceeded {self.max_steps} delivery steps"
                        )
                    self._deliver(pending.popleft())
            finally:
                # an interrupted round keeps its undelivered envelopes, ahead
                # of anything its handlers queued
                self._queue.extendleft(reversed(pending))
        return self.transcript


def _digest(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()
