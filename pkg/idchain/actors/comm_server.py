import json
import logging
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict

from idchain.actors.base import ActorBase
from idchain.actors.messages import RouteFailure, RoutedMessage
from idchain.exceptions import RoutingError
from idchain.netsim import BUS_ID, Envelope, MessageBus

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class RouteEntry(BaseModel):
    seq: int
    origin: str
    destination: str
    inner_kind: str
    flow_id: Optional[str] = None

    model_config = ConfigDict(frozen=True)


class CommunicationServer(ActorBase):
    """Gateway between identity providers and the members of one consortium."""

    role = "comm_server"

    def __init__(self, server_id: str, members: set[str]):
        super().__init__(server_id)
        self.members = set(members)
        self.idps: set[str] = set()
        self.log: list[RouteEntry] = []
        self._by_seq: dict[int, RouteEntry] = {}

    def allow_idp(self, idp_id: str) -> None:
        self.idps.add(idp_id)

    def route(self, envelope: Envelope, bus: MessageBus) -> int:
        message = RoutedMessage.from_payload(envelope.payload)
        allowed = self.members if envelope.sender in self.idps else self.idps
        if envelope.sender not in self.members | self.idps:
            raise RoutingError(f"{self.actor_id} does not serve '{envelope.sender}'")
        if message.destination not in allowed:
            raise RoutingError(
                f"{self.actor_id} cannot route to '{message.destination}'"
            )
        seq = bus.send(
            self.actor_id,
            message.destination,
            message.inner_kind,
            message.payload,
            step=envelope.step,
            flow_id=envelope.flow_id,
        )
        entry = RouteEntry(
            seq=seq,
            origin=envelope.sender,
            destination=message.destination,
            inner_kind=message.inner_kind,
            flow_id=envelope.flow_id,
        )
        self.log.append(entry)
        self._by_seq[seq] = entry
        return seq

    def on_route(self, envelope: Envelope, bus: MessageBus) -> None:
        try:
            self.route(envelope, bus)
        except (RoutingError, ValueError) as e:
            logger.warning(f"{self.actor_id} refused #{envelope.seq}: {e}")
            bus.note(
                self.actor_id,
                "route_refused",
                step=envelope.step,
                flow_id=envelope.flow_id,
                detail=str(e),
            )

    def on_delivery_failure(self, envelope: Envelope, bus: MessageBus) -> None:
        if envelope.sender != BUS_ID:
            return
        failure = json.loads(envelope.payload)
        entry = self._by_seq.get(failure["seq"])
        if entry is None:
            return
        self.send(
            bus,
            entry.origin,
            RouteFailure(
                destination=entry.destination,
                inner_kind=entry.inner_kind,
                reason="destination offline",
            ),
            step=envelope.step,
            flow_id=envelope.flow_id,
        )

    def export_state(self) -> dict[str, Any]:
        return {
            **super().export_state(),
            "members": sorted(self.members),
            "idps": sorted(self.idps),
            "routed": [entry.model_dump(mode="json") for entry in self.log],
        }
