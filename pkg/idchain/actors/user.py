import logging
from typing import Any, Callable, Optional

from pydantic import BaseModel, ConfigDict

from idchain.actors.base import ActorBase
from idchain.actors.messages import (
    ClaimsRequest,
    DelegationGrant,
    FlowAborted,
    GrantPurpose,
    GreenSignal,
    IdentitySubmission,
    LoginChallenge,
    LoginKeyProof,
    LoginKeyRequest,
    LoginPassword,
    LoginStage,
    LoginTotp,
    OwnerSubmission,
    Recommendations,
    SignupRequest,
    SignupResponse,
    StoreReceipt,
    StoreRequest,
    SubmittedDocument,
)
from idchain.core.security import TotpSecret, totp_code
from idchain.hdkeys import UserKeyring, neuter, sign
from idchain.ibcpre import IdentitySecretKey, SystemParams, encrypt, rkgen
from idchain.netsim import Envelope, MessageBus
from idchain.trust import base_attribute

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class ConsentRule(BaseModel):
    """What the user lets one service provider see, and through which owners."""

    attributes: list[str]
    owners: list[str] = []

    model_config = ConfigDict(frozen=True)


class LoginPlan(BaseModel):
    flow_id: str
    idp_id: str
    username: str
    password: str
    login_index: int
    totp_code: Optional[str] = None
    literal_key: bool = False


class UserFlow(BaseModel):
    request: ClaimsRequest
    condition: Optional[str] = None
    owners: list[str] = []
    attributes: list[str] = []
    green: Optional[GreenSignal] = None
    aborted: Optional[FlowAborted] = None
    recommendations: Optional[Recommendations] = None
    store_receipts: list[StoreReceipt] = []


def verify_condition(attributes: list[str], nonce: str) -> str:
    return f"verify:{','.join(sorted(attributes))}:{nonce}"


class UserAgent(ActorBase):
    """Acts for one person: holds both key trees and scripted consent."""

    role = "user"

    def __init__(
        self,
        user_id: str,
        keyring: UserKeyring,
        secret_key: IdentitySecretKey,
        params: Callable[[], SystemParams],
        rng: Callable[[int], bytes],
    ):
        super().__init__(user_id)
        self.keyring = keyring
        self.consent: dict[str, ConsentRule] = {}
        self.documents: dict[str, dict[str, str]] = {}
        self.owner_indices: dict[str, int] = {}
        self.idp_indices: dict[str, int] = {}
        self.usernames: dict[str, str] = {}
        self.passwords: dict[str, str] = {}
        self.totp: dict[str, TotpSecret] = {}
        self.sessions: dict[str, str] = {}
        self.signups: dict[str, SignupResponse] = {}
        self.login_stages: dict[str, list[LoginStage]] = {}
        self.flows: dict[str, UserFlow] = {}
        self.stored_conditions: dict[str, dict[str, str]] = {}
        self._secret_key = secret_key
        self._params = params
        self._rng = rng
        self._logins: dict[str, LoginPlan] = {}
        self._next_login_index: dict[str, int] = {}

    def __repr__(self) -> str:
        return f"<UserAgent(actor_id={self.actor_id}, keyring={self.keyring})>"

    # Key layout bookkeeping

    def owner_index(self, owner_id: str) -> int:
        if owner_id not in self.owner_indices:
            self.owner_indices[owner_id] = len(self.owner_indices)
        return self.owner_indices[owner_id]

    def idp_index(self, idp_id: str) -> int:
        if idp_id not in self.idp_indices:
            self.idp_indices[idp_id] = len(self.idp_indices)
        return self.idp_indices[idp_id]

    def next_login_index(self, idp_id: str) -> int:
        return self._next_login_index.get(idp_id, 0)

    def set_consent(self, sp_id: str, rule: ConsentRule) -> None:
        self.consent[sp_id] = rule

    # Sign-up and login

    def signup(
        self, idp_id: str, username: str, password: str, bus: MessageBus, flow_id: str
    ) -> None:
        request = SignupRequest(
            username=username,
            password=password,
            idp_xpub=self.keyring.idp_xpub(self.idp_index(idp_id)).to_base58(),
            ibcpre_identity=self.actor_id,
        )
        self.usernames[idp_id] = username
        self.passwords[idp_id] = password
        self.send(bus, idp_id, request, step=0, flow_id=flow_id)

    def on_signup_response(self, envelope: Envelope, bus: MessageBus) -> None:
        response = self.parse(envelope, bus, SignupResponse)
        if response is None:
            return
        self.signups[envelope.sender] = response
        if response.accepted and response.totp_secret:
            self.totp[envelope.sender] = TotpSecret.from_base32(response.totp_secret)

    def start_login(self, plan: LoginPlan, bus: MessageBus) -> None:
        self._logins[plan.flow_id] = plan
        self.login_stages[plan.flow_id] = []
        message = LoginPassword(username=plan.username, password=plan.password)
        self.send(bus, plan.idp_id, message, step=1, flow_id=plan.flow_id)

    def _login_key(self, plan: LoginPlan):
        return self.keyring.login_key(self.idp_index(plan.idp_id), plan.login_index)

    def on_login_stage(self, envelope: Envelope, bus: MessageBus) -> None:
        stage = self.parse(envelope, bus, LoginStage)
        plan = self._logins.get(envelope.flow_id)
        if stage is None or plan is None:
            return
        self.login_stages[envelope.flow_id].append(stage)
        if not stage.passed:
            return
        if stage.stage == 1:
            code = plan.totp_code
            if code is None:
                code = totp_code(self.totp[plan.idp_id], bus.clock.now)
            message = LoginTotp(username=plan.username, code=code)
            self.send(bus, plan.idp_id, message, step=2, flow_id=plan.flow_id)
        elif stage.stage == 2 and plan.literal_key:
            proof = LoginKeyProof(
                username=plan.username,
                login_index=plan.login_index,
                public_key=neuter(self._login_key(plan)).point,
            )
            self.send(bus, plan.idp_id, proof, step=3, flow_id=plan.flow_id)
        elif stage.stage == 2:
            request = LoginKeyRequest(
                username=plan.username, login_index=plan.login_index
            )
            self.send(bus, plan.idp_id, request, step=3, flow_id=plan.flow_id)
        elif stage.stage == 3:
            self.sessions[plan.idp_id] = stage.session
            self._next_login_index[plan.idp_id] = max(
                self.next_login_index(plan.idp_id), plan.login_index + 1
            )

    def on_login_challenge(self, envelope: Envelope, bus: MessageBus) -> None:
        challenge = self.parse(envelope, bus, LoginChallenge)
        plan = self._logins.get(envelope.flow_id)
        if challenge is None or plan is None:
            return
        if challenge.login_index != plan.login_index:
            return
        signature = sign(self._login_key(plan), challenge.challenge)
        proof = LoginKeyProof(
            username=plan.username,
            login_index=plan.login_index,
            signature=signature.to_bytes(),
        )
        self.send(bus, plan.idp_id, proof, step=3, flow_id=plan.flow_id)

    # Service-provider login

    def on_claims_request(self, envelope: Envelope, bus: MessageBus) -> None:
        request = self.parse(envelope, bus, ClaimsRequest)
        if request is None or request.user_id != self.actor_id:
            return
        self.flows[envelope.flow_id] = UserFlow(request=request)

    def _consented(self, request: ClaimsRequest) -> tuple[ConsentRule, list[str]]:
        rule = self.consent.get(request.sp_id, ConsentRule(attributes=[]))
        requested = {base_attribute(claim.name) for claim in request.claims}
        return rule, sorted(requested & set(rule.attributes))

    def respond_to_claims(
        self, flow_id: str, bus: MessageBus, owners: Optional[list[str]] = None
    ) -> list[str]:
        """Encrypt the consented document for each chosen owner and delegate.

        Returns the owners the IDP was asked to consult.
        """
        flow = self.flows[flow_id]
        request = flow.request
        rule, attributes = self._consented(request)
        candidates = owners if owners is not None else rule.owners
        chosen = [
            owner_id
            for owner_id in candidates
            if owner_id in rule.owners and owner_id in self.documents
        ]
        bus.note(
            self.actor_id,
            "owners_selected",
            step=2,
            flow_id=flow_id,
            detail=",".join(chosen),
        )
        if not chosen or not attributes:
            logger.info(f"{self.actor_id} has no consented owner for {request.sp_id}")
            return []

        condition = verify_condition(attributes, request.nonce)
        params = self._params()
        submissions = []
        for owner_id in chosen:
            document = SubmittedDocument(
                owner_key=self.keyring.owner_xpub(self.owner_indices[owner_id])
                .to_base58(),
                attributes={
                    name: self.documents[owner_id][name]
                    for name in attributes
                    if name in self.documents[owner_id]
                },
            )
            sealed = encrypt(
                params,
                self.actor_id,
                condition,
                document.model_dump_json().encode("utf-8"),
                rng=self._rng,
            )
            submissions.append(
                OwnerSubmission(owner_id=owner_id, envelope=sealed.to_bytes())
            )
        flow.condition = condition
        flow.owners = chosen
        flow.attributes = attributes
        submission = IdentitySubmission(
            nonce=request.nonce,
            session=self.sessions.get(request.idp_id, ""),
            attributes=attributes,
            condition=condition,
            submissions=submissions,
        )
        self.send(bus, request.idp_id, submission, step=3, flow_id=flow_id)

        rekeys = [
            rkgen(params, self._secret_key, owner_id, condition, rng=self._rng)
            for owner_id in chosen
        ]
        grant = DelegationGrant(
            nonce=request.nonce, purpose=GrantPurpose.VERIFY, rekeys=rekeys
        )
        self.send(bus, request.idp_id, grant, step=4, flow_id=flow_id)
        return chosen

    def respond_with_stored(self, flow_id: str, bus: MessageBus) -> list[str]:
        """Let the IDP open documents it stored earlier; no owner is contacted."""
        flow = self.flows[flow_id]
        request = flow.request
        rule, attributes = self._consented(request)
        stored = {
            owner_id: condition
            for owner_id, condition in self.stored_conditions.get(
                request.idp_id, {}
            ).items()
            if owner_id in rule.owners
        }
        bus.note(
            self.actor_id,
            "owners_selected",
            step=2,
            flow_id=flow_id,
            detail="stored:" + ",".join(sorted(stored)),
        )
        params = self._params()
        rekeys = [
            rkgen(params, self._secret_key, request.idp_id, condition, rng=self._rng)
            for _, condition in sorted(stored.items())
        ]
        flow.owners = sorted(stored)
        flow.attributes = attributes
        grant = DelegationGrant(
            nonce=request.nonce,
            purpose=GrantPurpose.STORED,
            rekeys=rekeys,
            session=self.sessions.get(request.idp_id),
            attributes=attributes,
        )
        self.send(bus, request.idp_id, grant, step=7, flow_id=flow_id)
        return flow.owners

    def on_green_signal(self, envelope: Envelope, bus: MessageBus) -> None:
        signal = self.parse(envelope, bus, GreenSignal)
        flow = self.flows.get(envelope.flow_id)
        if signal is None or flow is None or signal.nonce != flow.request.nonce:
            return
        flow.green = signal
        rekey = rkgen(
            self._params(),
            self._secret_key,
            envelope.sender,
            flow.condition,
            rng=self._rng,
        )
        grant = DelegationGrant(
            nonce=signal.nonce, purpose=GrantPurpose.ASSERT, rekeys=[rekey]
        )
        self.send(bus, envelope.sender, grant, step=7, flow_id=envelope.flow_id)

    def on_flow_aborted(self, envelope: Envelope, bus: MessageBus) -> None:
        aborted = self.parse(envelope, bus, FlowAborted)
        flow = self.flows.get(envelope.flow_id)
        if aborted is not None and flow is not None:
            flow.aborted = aborted

    def on_recommendations(self, envelope: Envelope, bus: MessageBus) -> None:
        recommendations = self.parse(envelope, bus, Recommendations)
        flow = self.flows.get(envelope.flow_id)
        if recommendations is not None and flow is not None:
            flow.recommendations = recommendations

    # Stored identity

    def request_store(self, flow_id: str, owner_id: str, bus: MessageBus) -> None:
        request = self.flows[flow_id].request
        message = StoreRequest(
            nonce=request.nonce,
            session=self.sessions.get(request.idp_id, ""),
            owner_id=owner_id,
        )
        self.send(bus, request.idp_id, message, flow_id=flow_id)

    def on_store_receipt(self, envelope: Envelope, bus: MessageBus) -> None:
        receipt = self.parse(envelope, bus, StoreReceipt)
        flow = self.flows.get(envelope.flow_id)
        if receipt is None or flow is None:
            return
        flow.store_receipts.append(receipt)
        if receipt.handle is not None:
            self.stored_conditions.setdefault(envelope.sender, {})[
                receipt.owner_id
            ] = flow.condition

    def export_state(self) -> dict[str, Any]:
        return {
            **super().export_state(),
            "owner_indices": dict(sorted(self.owner_indices.items())),
            "idp_indices": dict(sorted(self.idp_indices.items())),
            "consent": {
                sp_id: rule.model_dump() for sp_id, rule in sorted(self.consent.items())
            },
        }
