import logging
from typing import Any, Optional

from pydantic import BaseModel

from idchain.actors.base import ActorBase
from idchain.actors.messages import (
    AccessDecision,
    AssertionResponse,
    ClaimsRequest,
    FlowAborted,
    RequestedClaim,
)
from idchain.netsim import Envelope, MessageBus
from idchain.trust import AttributeAssertion

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class SpDecision(BaseModel):
    nonce: str
    granted: bool
    assertions: list[AttributeAssertion] = []
    failed_claims: list[str] = []
    missing: list[str] = []
    aborted: Optional[str] = None


class ServiceProvider(ActorBase):
    """A relying party that grants access when every mandatory claim clears its bar."""

    role = "sp"

    def __init__(self, sp_id: str, claims: list[RequestedClaim]):
        super().__init__(sp_id)
        self.claims = list(claims)
        self.decisions: dict[str, SpDecision] = {}
        self._nonces: dict[str, str] = {}

    def request_claims(
        self, user_id: str, idp_id: str, nonce: str, flow_id: str, bus: MessageBus
    ) -> int:
        request = ClaimsRequest(
            sp_id=self.actor_id,
            idp_id=idp_id,
            user_id=user_id,
            claims=self.claims,
            nonce=nonce,
        )
        self._nonces[flow_id] = nonce
        return self.send(bus, idp_id, request, step=1, flow_id=flow_id)

    def decide(self, response: AssertionResponse) -> tuple[bool, list[str]]:
        by_name = {a.attribute_name: a for a in response.assertions}
        failed = []
        for claim in self.claims:
            assertion = by_name.get(claim.name)
            if assertion is not None and assertion.score.value >= claim.threshold:
                continue
            if claim.mandatory:
                failed.append(claim.name)
        return not failed, failed

    def on_assertion_response(self, envelope: Envelope, bus: MessageBus) -> None:
        response = self.parse(envelope, bus, AssertionResponse)
        if response is None or self._nonces.get(envelope.flow_id) != response.nonce:
            return
        granted, failed = self.decide(response)
        self.decisions[envelope.flow_id] = SpDecision(
            nonce=response.nonce,
            granted=granted,
            assertions=response.assertions,
            failed_claims=failed,
            missing=response.missing,
        )
        logger.info(
            f"{self.actor_id} {'granted' if granted else 'denied'} "
            f"flow {envelope.flow_id}"
        )
        decision = AccessDecision(
            nonce=response.nonce, granted=granted, failed_claims=failed
        )
        self.send(bus, envelope.sender, decision, step=9, flow_id=envelope.flow_id)

    def on_flow_aborted(self, envelope: Envelope, bus: MessageBus) -> None:
        aborted = self.parse(envelope, bus, FlowAborted)
        if aborted is None or self._nonces.get(envelope.flow_id) != aborted.nonce:
            return
        self.decisions[envelope.flow_id] = SpDecision(
            nonce=aborted.nonce, granted=False, aborted=aborted.reason
        )

    def export_state(self) -> dict[str, Any]:
        return {
            **super().export_state(),
            "claims": [claim.model_dump() for claim in self.claims],
            "decisions": {
                flow_id: {
                    "granted": decision.granted,
                    "failed_claims": decision.failed_claims,
                    "scores": {
                        a.attribute_name: a.score.value for a in decision.assertions
                    },
                    "aborted": decision.aborted,
                }
                for flow_id, decision in sorted(self.decisions.items())
            },
        }
