import logging
from typing import Any, ClassVar, Optional, Type, TypeVar

from pydantic import ValidationError

from idchain.actors.messages import Message
from idchain.netsim import Envelope, MessageBus

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

M = TypeVar("M", bound=Message)


class ActorBase:
    """Dispatches each delivered envelope to an `on_<kind>` method."""

    role: ClassVar[str]

    def __init__(self, actor_id: str):
        self.actor_id = actor_id

    def __repr__(self) -> str:
        return f"<{self.__class__.__name__}(actor_id={self.actor_id})>"

    def handle(self, envelope: Envelope, bus: MessageBus) -> None:
        handler = getattr(self, f"on_{envelope.kind}", None)
        if handler is None:
            logger.warning(f"{self.actor_id} ignores '{envelope.kind}' messages")
            return
        handler(envelope, bus)

    def send(
        self,
        bus: MessageBus,
        recipient: str,
        message: Message,
        step: Optional[int] = None,
        flow_id: Optional[str] = None,
    ) -> int:
        return bus.send(
            self.actor_id, recipient, message.kind, message.to_payload(), step, flow_id
        )

    def parse(
        self, envelope: Envelope, bus: MessageBus, message_type: Type[M]
    ) -> Optional[M]:
        """Parse a payload; malformed payloads are noted and dropped."""
        try:
            return message_type.from_payload(envelope.payload)
        except ValidationError as e:
            logger.warning(
                f"{self.actor_id} rejected malformed '{envelope.kind}' "
                f"#{envelope.seq}: {e.error_count()} errors"
            )
            bus.note(
                self.actor_id,
                "message_rejected",
                step=envelope.step,
                flow_id=envelope.flow_id,
                detail=f"malformed {envelope.kind} #{envelope.seq}",
            )
            return None

    def export_state(self) -> dict[str, Any]:
        return {"actor_id": self.actor_id, "role": self.role}
