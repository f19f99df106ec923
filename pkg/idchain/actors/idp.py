import logging
from enum import Enum
from typing import Any, Callable, Optional

from pydantic import BaseModel, ConfigDict, ValidationError

from idchain.actors.base import ActorBase
from idchain.actors.messages import (
    AccessDecision,
    AssertionResponse,
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
    Recommendations,
    RouteFailure,
    RoutedMessage,
    SignupRequest,
    SignupResponse,
    StoreReceipt,
    StoreRequest,
    SubmittedDocument,
    VerificationOutcome,
    VerificationResult,
    VerifyRequest,
)
from idchain.core.security import (
    PasswordRecord,
    TotpReplayGuard,
    TotpSecret,
    hash_password,
    totp_verify,
    verify_password,
)
from idchain.exceptions import (
    DecryptionFailedError,
    KeyFormatError,
    PasswordPolicyError,
    ReEncryptionError,
    TrustError,
    UnknownUserError,
    UnverifiedEnvelopeError,
    UsernameTakenError,
)
from idchain.hdkeys import ExtendedPublicKey, KeyLayout, verify
from idchain.ibcpre import (
    CiphertextEnvelope,
    IdentitySecretKey,
    Level,
    ReEncryptionKey,
    decrypt,
    reencrypt,
)
from idchain.netsim import Envelope, MessageBus
from idchain.trust import (
    AttributeAssertion,
    ClaimRequirement,
    ServicePolicy,
    SourceClass,
    SourceEvidence,
    SourceWeightTable,
    TrustParameters,
    assert_attribute,
    base_attribute,
    evaluate_predicate,
    is_predicate_claim,
    recommend_sources,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CHALLENGE_LENGTH = 32
SESSION_LENGTH = 16
MAX_RECOMMENDATIONS = 5


class OfflineBehavior(str, Enum):
    BLOCK = "block"
    DEGRADE = "degrade"


class StoredDocument(BaseModel):
    """A verified, still-encrypted identity document kept for later logins."""

    handle: str
    owner_id: str
    envelope: bytes
    condition: str
    stored_at: int
    # owner's latest recertification per attribute, at verification time
    last_recert: dict[str, int] = {}

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


class UserProfile(BaseModel):
    username: str
    password: PasswordRecord
    totp: TotpSecret
    registered_idp_xpub: ExtendedPublicKey
    ibcpre_identity: str
    used_login_indices: set[int] = set()
    stored_documents: list[StoredDocument] = []

    model_config = ConfigDict(ser_json_bytes="hex", val_json_bytes="hex")


class OwnerListing(BaseModel):
    owner_id: str
    source_class: SourceClass
    comm_server_id: str

    model_config = ConfigDict(frozen=True)


class LoginAttempt(BaseModel):
    username: str
    stage_passed: int = 0
    login_index: Optional[int] = None
    challenge: Optional[bytes] = None


class FlowState(BaseModel):
    """What the identity provider knows about one service-provider login."""

    flow_id: str
    request: ClaimsRequest
    username: Optional[str] = None
    attributes: list[str] = []
    condition: Optional[str] = None
    submissions: dict[str, bytes] = {}
    results: dict[str, VerificationResult] = {}
    verified_at: dict[str, int] = {}
    unavailable: set[str] = set()
    green: list[str] = []
    degraded: list[str] = []
    status: str = "requested"
    recommendations: dict[str, list] = {}

    model_config = ConfigDict(ser_json_bytes="hex", val_json_bytes="hex")

    def summary(self) -> dict[str, Any]:
        return {
            "flow_id": self.flow_id,
            "sp_id": self.request.sp_id,
            "username": self.username,
            "attributes": self.attributes,
            "status": self.status,
            "outcomes": {o: r.outcome.value for o, r in sorted(self.results.items())},
            "unavailable": sorted(self.unavailable),
        }


class IdentityProvider(ActorBase):
    role = "idp"

    def __init__(
        self,
        idp_id: str,
        secret_key: IdentitySecretKey,
        weights: SourceWeightTable,
        trust: TrustParameters,
        rng: Callable[[int], bytes],
        literal_login: bool = False,
    ):
        super().__init__(idp_id)
        self.weights = weights
        self.trust = trust
        self.literal_login = literal_login
        self.directory: dict[str, OwnerListing] = {}
        self.profiles: dict[str, UserProfile] = {}
        self.flows: dict[str, FlowState] = {}
        self.totp_guard = TotpReplayGuard()
        self._secret_key = secret_key
        self._rng = rng
        self._sessions: dict[str, str] = {}
        self._logins: dict[str, LoginAttempt] = {}
        self._seen_nonces: set[str] = set()

    def list_owner(self, listing: OwnerListing) -> None:
        self.directory[listing.owner_id] = listing

    def profile(self, username: str) -> UserProfile:
        try:
            return self.profiles[username]
        except KeyError:
            raise UnknownUserError(f"Unknown user '{username}'") from None

    def session_user(self, session: Optional[str]) -> Optional[str]:
        return self._sessions.get(session) if session else None

    # Sign-up

    def create_profile(self, request: SignupRequest) -> UserProfile:
        if request.username in self.profiles:
            raise UsernameTakenError(f"Username '{request.username}' is taken")
        profile = UserProfile(
            username=request.username,
            password=hash_password(request.password, rng=self._rng),
            totp=TotpSecret.generate(rng=self._rng),
            registered_idp_xpub=ExtendedPublicKey.from_base58(request.idp_xpub),
            ibcpre_identity=request.ibcpre_identity,
        )
        self.profiles[request.username] = profile
        logger.info(f"{self.actor_id} signed up '{request.username}'")
        return profile

    def on_signup_request(self, envelope: Envelope, bus: MessageBus) -> None:
        request = self.parse(envelope, bus, SignupRequest)
        if request is None:
            return
        try:
            profile = self.create_profile(request)
            response = SignupResponse(
                username=request.username,
                accepted=True,
                totp_secret=profile.totp.base32,
            )
        except UsernameTakenError as e:
            response = SignupResponse(
                username=request.username,
                accepted=False,
                error="username_taken",
                detail=str(e),
            )
        except PasswordPolicyError as e:
            response = SignupResponse(
                username=request.username,
                accepted=False,
                error="password_policy",
                detail=str(e),
            )
        self.send(bus, envelope.sender, response, envelope.step, envelope.flow_id)

    # Login: password, then TOTP, then the login key

    def _stage_reply(
        self,
        envelope: Envelope,
        bus: MessageBus,
        username: str,
        stage: int,
        passed: bool,
        detail: Optional[str] = None,
        session: Optional[str] = None,
    ) -> None:
        if not passed:
            logger.info(f"Login for '{username}' failed at stage {stage}: {detail}")
            self._logins.pop(envelope.flow_id, None)
        reply = LoginStage(
            username=username,
            stage=stage,
            passed=passed,
            detail=detail,
            session=session,
        )
        self.send(bus, envelope.sender, reply, stage, envelope.flow_id)

    def _attempt(self, envelope: Envelope, username: str, stage: int):
        attempt = self._logins.get(envelope.flow_id)
        if attempt is None or attempt.username != username:
            return None
        if attempt.stage_passed < stage - 1:
            return None
        return attempt

    def on_login_password(self, envelope: Envelope, bus: MessageBus) -> None:
        message = self.parse(envelope, bus, LoginPassword)
        if message is None:
            return
        profile = self.profiles.get(message.username)
        if profile is None:
            self._stage_reply(envelope, bus, message.username, 1, False, "unknown user")
            return
        if not verify_password(profile.password, message.password):
            self._stage_reply(envelope, bus, message.username, 1, False, "bad password")
            return
        self._logins[envelope.flow_id] = LoginAttempt(
            username=message.username, stage_passed=1
        )
        self._stage_reply(envelope, bus, message.username, 1, True)

    def on_login_totp(self, envelope: Envelope, bus: MessageBus) -> None:
        message = self.parse(envelope, bus, LoginTotp)
        if message is None:
            return
        attempt = self._attempt(envelope, message.username, 2)
        if attempt is None:
            self._stage_reply(envelope, bus, message.username, 2, False, "out of order")
            return
        profile = self.profiles[message.username]
        now = bus.clock.now
        if not totp_verify(
            profile.totp, now, message.code, self.totp_guard, message.username
        ):
            self._stage_reply(envelope, bus, message.username, 2, False, "bad code")
            return
        attempt.stage_passed = 2
        self._stage_reply(envelope, bus, message.username, 2, True)

    def on_login_key_request(self, envelope: Envelope, bus: MessageBus) -> None:
        message = self.parse(envelope, bus, LoginKeyRequest)
        if message is None:
            return
        attempt = self._attempt(envelope, message.username, 3)
        if attempt is None:
            self._stage_reply(envelope, bus, message.username, 3, False, "out of order")
            return
        if self.literal_login:
            self._stage_reply(
                envelope, bus, message.username, 3, False, "no challenge in this mode"
            )
            return
        if message.login_index in self.profiles[message.username].used_login_indices:
            self._stage_reply(
                envelope, bus, message.username, 3, False, "login index reused"
            )
            return
        attempt.login_index = message.login_index
        attempt.challenge = self._rng(CHALLENGE_LENGTH)
        challenge = LoginChallenge(
            username=message.username,
            login_index=message.login_index,
            challenge=attempt.challenge,
        )
        self.send(bus, envelope.sender, challenge, 3, envelope.flow_id)

    def check_login_key(self, attempt: LoginAttempt, proof: LoginKeyProof) -> bool:
        profile = self.profiles[proof.username]
        if proof.login_index in profile.used_login_indices:
            return False
        expected = KeyLayout.login_key(profile.registered_idp_xpub, proof.login_index)
        if self.literal_login:
            return proof.public_key == expected.point
        return (
            proof.signature is not None
            and attempt.challenge is not None
            and attempt.login_index == proof.login_index
            and verify(expected, attempt.challenge, proof.signature)
        )

    def on_login_key_proof(self, envelope: Envelope, bus: MessageBus) -> None:
        message = self.parse(envelope, bus, LoginKeyProof)
        if message is None:
            return
        attempt = self._attempt(envelope, message.username, 3)
        if attempt is None:
            self._stage_reply(envelope, bus, message.username, 3, False, "out of order")
            return
        if not self.check_login_key(attempt, message):
            self._stage_reply(
                envelope, bus, message.username, 3, False, "bad login key"
            )
            return
        profile = self.profiles[message.username]
        profile.used_login_indices.add(message.login_index)
        session = self._rng(SESSION_LENGTH).hex()
        self._sessions[session] = message.username
        self._logins.pop(envelope.flow_id, None)
        logger.info(f"{self.actor_id} opened a session for '{message.username}'")
        self._stage_reply(envelope, bus, message.username, 3, True, session=session)

    # Service-provider login

    def _abort(self, flow: FlowState, bus: MessageBus, step: int, reason: str) -> None:
        flow.status = "aborted"
        logger.info(f"Flow {flow.flow_id} aborted at step {step}: {reason}")
        aborted = FlowAborted(nonce=flow.request.nonce, reason=reason)
        self.send(bus, flow.request.user_id, aborted, step, flow.flow_id)
        self.send(bus, flow.request.sp_id, aborted, step, flow.flow_id)

    def on_claims_request(self, envelope: Envelope, bus: MessageBus) -> None:
        request = self.parse(envelope, bus, ClaimsRequest)
        if request is None:
            return
        if request.nonce in self._seen_nonces:
            reason = "nonce already used"
            aborted = FlowAborted(nonce=request.nonce, reason=reason)
            self.send(bus, envelope.sender, aborted, 1, envelope.flow_id)
            return
        self._seen_nonces.add(request.nonce)
        self.flows[envelope.flow_id] = FlowState(
            flow_id=envelope.flow_id, request=request
        )
        self.send(bus, request.user_id, request, 1, envelope.flow_id)

    def on_identity_submission(self, envelope: Envelope, bus: MessageBus) -> None:
        flow = self.flows.get(envelope.flow_id)
        submission = self.parse(envelope, bus, IdentitySubmission)
        if flow is None or submission is None:
            return
        username = self.session_user(submission.session)
        if username is None or submission.nonce != flow.request.nonce:
            self._abort(flow, bus, 3, "no valid session")
            return
        flow.username = username
        flow.attributes = list(submission.attributes)
        flow.condition = submission.condition
        flow.submissions = {s.owner_id: s.envelope for s in submission.submissions}
        flow.status = "submitted"

    def on_delegation_grant(self, envelope: Envelope, bus: MessageBus) -> None:
        flow = self.flows.get(envelope.flow_id)
        grant = self.parse(envelope, bus, DelegationGrant)
        if flow is None or grant is None or grant.nonce != flow.request.nonce:
            return
        if flow.status == "aborted":
            return
        if grant.purpose is GrantPurpose.VERIFY:
            for rekey in grant.rekeys:
                self._request_verification(flow, rekey, bus)
        elif grant.purpose is GrantPurpose.ASSERT:
            self._assert_submitted(flow, grant, bus)
        else:
            self._assert_stored(flow, grant, bus)

    def _request_verification(
        self, flow: FlowState, rekey: ReEncryptionKey, bus: MessageBus
    ) -> None:
        owner_id = rekey.delegatee_identity
        listing = self.directory.get(owner_id)
        submitted = flow.submissions.get(owner_id)
        if listing is None or submitted is None:
            logger.warning(f"Flow {flow.flow_id}: nothing to verify at '{owner_id}'")
            return
        try:
            transformed = reencrypt(rekey, CiphertextEnvelope.from_bytes(submitted))
        except (ReEncryptionError, DecryptionFailedError) as e:
            logger.warning(
                f"Flow {flow.flow_id}: cannot re-encrypt for {owner_id}: {e}"
            )
            return
        request = VerifyRequest(
            nonce=flow.request.nonce,
            idp_id=self.actor_id,
            sp_id=flow.request.sp_id,
            owner_id=owner_id,
            claimed_attributes=flow.attributes,
            condition=flow.condition,
            envelope=transformed.to_bytes(),
        )
        routed = RoutedMessage(
            origin=self.actor_id,
            destination=owner_id,
            inner_kind=request.kind,
            payload=request.to_payload(),
        )
        self.send(bus, listing.comm_server_id, routed, 4, flow.flow_id)
        flow.status = "verifying"

    def on_verification_result(self, envelope: Envelope, bus: MessageBus) -> None:
        flow = self.flows.get(envelope.flow_id)
        result = self.parse(envelope, bus, VerificationResult)
        if flow is None or result is None or result.owner_id not in flow.submissions:
            return
        flow.results[result.owner_id] = result
        flow.verified_at[result.owner_id] = bus.clock.now

    def on_route_failure(self, envelope: Envelope, bus: MessageBus) -> None:
        flow = self.flows.get(envelope.flow_id)
        failure = self.parse(envelope, bus, RouteFailure)
        if flow is None or failure is None:
            return
        flow.unavailable.add(failure.destination)

    def close_verification(
        self,
        flow_id: str,
        bus: MessageBus,
        offline_behavior: OfflineBehavior = OfflineBehavior.BLOCK,
    ) -> bool:
        """End the wait for owner results; send the green signal or abort.

        Owners that never answered count as failed. Returns True when a green
        signal was sent.
        """
        flow = self.flows[flow_id]
        if flow.status == "aborted":
            return False
        verified = sorted(
            owner_id
            for owner_id, result in flow.results.items()
            if result.outcome is VerificationOutcome.VERIFIED
        )
        unavailable = sorted(flow.unavailable)
        if unavailable and OfflineBehavior(offline_behavior) is OfflineBehavior.BLOCK:
            self._abort(flow, bus, 5, f"data owner offline: {', '.join(unavailable)}")
            return False
        degraded = unavailable if offline_behavior == OfflineBehavior.DEGRADE else []
        if not verified and not degraded:
            self._abort(flow, bus, 5, "no data owner verified the identity")
            return False
        flow.green = verified
        flow.degraded = degraded
        flow.status = "green"
        signal = GreenSignal(
            nonce=flow.request.nonce, owners=verified, degraded=degraded
        )
        self.send(bus, flow.request.user_id, signal, 7, flow.flow_id)
        return True

    def _open(
        self, rekey: ReEncryptionKey, sealed: bytes, condition: str
    ) -> Optional[dict[str, str]]:
        try:
            envelope = CiphertextEnvelope.from_bytes(sealed)
            plaintext = decrypt(self._secret_key, reencrypt(rekey, envelope), condition)
            return SubmittedDocument.model_validate_json(plaintext).attributes
        except (ReEncryptionError, DecryptionFailedError, ValidationError):
            return None

    def _assert_submitted(
        self, flow: FlowState, grant: DelegationGrant, bus: MessageBus
    ) -> None:
        if flow.status != "green" or not grant.rekeys:
            return
        now = bus.clock.now
        documents, evidence = {}, {}
        for owner_id in flow.green + flow.degraded:
            attributes = self._open(
                grant.rekeys[0], flow.submissions[owner_id], flow.condition
            )
            if attributes is None:
                continue
            documents[owner_id] = attributes
            if owner_id in flow.degraded:
                evidence[owner_id] = {name: (now, False) for name in attributes}
            else:
                evidence[owner_id] = {
                    info.attribute_name: (info.timestamp, True)
                    for info in flow.results[owner_id].latest_recert
                }
        self._respond(flow, documents, evidence, stored=False, bus=bus)

    def _assert_stored(
        self, flow: FlowState, grant: DelegationGrant, bus: MessageBus
    ) -> None:
        username = self.session_user(grant.session)
        if username is None:
            self._abort(flow, bus, 7, "no valid session")
            return
        flow.username = username
        flow.attributes = list(grant.attributes)
        rekeys = {rekey.condition.value: rekey for rekey in grant.rekeys}
        documents, evidence = {}, {}
        for stored in self.profiles[username].stored_documents:
            rekey = rekeys.get(stored.condition)
            if rekey is None:
                continue
            attributes = self._open(rekey, stored.envelope, stored.condition)
            if attributes is None:
                continue
            documents[stored.owner_id] = attributes
            evidence[stored.owner_id] = {
                name: (timestamp, True)
                for name, timestamp in stored.last_recert.items()
                if name in attributes
            }
        flow.status = "green"
        self._respond(flow, documents, evidence, stored=True, bus=bus)

    def compute_assertions(
        self,
        flow: FlowState,
        documents: dict[str, dict[str, str]],
        evidence: dict[str, dict[str, tuple[int, bool]]],
        stored: bool,
        now: int,
    ) -> tuple[list[AttributeAssertion], list[str]]:
        policy = ServicePolicy(
            claims={
                claim.name: ClaimRequirement(
                    threshold=claim.threshold, mandatory=claim.mandatory
                )
                for claim in flow.request.claims
            }
        )
        assertions, missing = [], []
        for claim in flow.request.claims:
            attribute = base_attribute(claim.name)
            sources = []
            if attribute in flow.attributes:
                for owner_id in sorted(documents):
                    if attribute not in documents[owner_id]:
                        continue
                    if attribute not in evidence.get(owner_id, {}):
                        continue
                    last_recert, available = evidence[owner_id][attribute]
                    sources.append(
                        SourceEvidence(
                            owner_id=owner_id,
                            source_class=self.directory[owner_id].source_class,
                            last_recert=last_recert,
                            available=available,
                        )
                    )
            if not sources:
                missing.append(claim.name)
                continue
            value = documents[sources[0].owner_id][attribute]
            if is_predicate_claim(claim.name):
                try:
                    value = evaluate_predicate(claim.name, value, now)
                except TrustError as e:
                    logger.warning(f"Flow {flow.flow_id}: {e}")
                    missing.append(claim.name)
                    continue
            assertion, _ = assert_attribute(
                claim.name,
                value,
                sources,
                self.weights,
                now,
                policy,
                self.trust,
                stored=stored,
            )
            assertions.append(assertion)
        return assertions, missing

    def _respond(
        self,
        flow: FlowState,
        documents: dict[str, dict[str, str]],
        evidence: dict[str, dict[str, tuple[int, bool]]],
        stored: bool,
        bus: MessageBus,
    ) -> None:
        assertions, missing = self.compute_assertions(
            flow, documents, evidence, stored, bus.clock.now
        )
        bus.note(
            self.actor_id,
            "assertions_computed",
            step=8,
            flow_id=flow.flow_id,
            detail=", ".join(
                f"{a.attribute_name}={a.score.value:.6f}" for a in assertions
            ),
        )
        flow.status = "asserted"
        response = AssertionResponse(
            nonce=flow.request.nonce, assertions=assertions, missing=missing
        )
        self.send(bus, flow.request.sp_id, response, 9, flow.flow_id)

    def on_access_decision(self, envelope: Envelope, bus: MessageBus) -> None:
        flow = self.flows.get(envelope.flow_id)
        decision = self.parse(envelope, bus, AccessDecision)
        if flow is None or decision is None:
            return
        flow.status = "granted" if decision.granted else "denied"
        if decision.granted:
            return
        now = bus.clock.now
        catalog = [
            SourceEvidence(
                owner_id=listing.owner_id,
                source_class=listing.source_class,
                last_recert=now,
            )
            for listing in sorted(self.directory.values(), key=lambda l: l.owner_id)
        ]
        requirements = {claim.name: claim for claim in flow.request.claims}
        by_claim = {}
        for name in decision.failed_claims:
            claim = requirements.get(name)
            if claim is None:
                continue
            by_claim[name] = recommend_sources(
                base_attribute(name),
                claim.threshold,
                catalog,
                self.weights,
                now,
                self.trust,
            )[:MAX_RECOMMENDATIONS]
        flow.recommendations = by_claim
        recommendations = Recommendations(nonce=flow.request.nonce, by_claim=by_claim)
        self.send(bus, flow.request.user_id, recommendations, 9, flow.flow_id)

    # Stored identity

    def store_identity(self, request: StoreRequest, now: int) -> StoredDocument:
        username = self.session_user(request.session)
        flow = next(
            (f for f in self.flows.values() if f.request.nonce == request.nonce), None
        )
        if username is None or flow is None or flow.username != username:
            raise UnknownUserError("No verified flow for this session")
        result = flow.results.get(request.owner_id)
        if result is None or result.outcome is not VerificationOutcome.VERIFIED:
            raise UnverifiedEnvelopeError(
                f"'{request.owner_id}' did not verify this envelope"
            )
        sealed = flow.submissions[request.owner_id]
        profile = self.profiles[username]
        parsed = CiphertextEnvelope.from_bytes(sealed)
        if (
            parsed.level is not Level.ORIGINAL
            or parsed.recipient_identity != profile.ibcpre_identity
        ):
            raise KeyFormatError("Only envelopes addressed to the user can be stored")
        document = StoredDocument(
            handle=f"{username}/{request.owner_id}/{flow.flow_id}",
            owner_id=request.owner_id,
            envelope=sealed,
            condition=flow.condition,
            stored_at=flow.verified_at[request.owner_id],
            last_recert={
                info.attribute_name: info.timestamp for info in result.latest_recert
            },
        )
        profile.stored_documents = [
            d for d in profile.stored_documents if d.owner_id != request.owner_id
        ] + [document]
        logger.info(f"{self.actor_id} stored a document from '{request.owner_id}'")
        return document

    def on_store_request(self, envelope: Envelope, bus: MessageBus) -> None:
        request = self.parse(envelope, bus, StoreRequest)
        if request is None:
            return
        try:
            document = self.store_identity(request, bus.clock.now)
            receipt = StoreReceipt(
                nonce=request.nonce, owner_id=request.owner_id, handle=document.handle
            )
        except (
            UnknownUserError,
            UnverifiedEnvelopeError,
            KeyFormatError,
            DecryptionFailedError,
        ) as e:
            logger.warning(f"{self.actor_id} refused to store a document: {e}")
            receipt = StoreReceipt(
                nonce=request.nonce, owner_id=request.owner_id, error=str(e)
            )
        self.send(bus, envelope.sender, receipt, envelope.step, envelope.flow_id)

    def export_state(self) -> dict[str, Any]:
        """Persistable state. Holds no attribute value and no user private key."""
        return {
            **super().export_state(),
            "profiles": {
                username: profile.model_dump(
                    mode="json", exclude={"password", "totp"}
                )
                for username, profile in sorted(self.profiles.items())
            },
            "directory": sorted(self.directory),
            "flows": [flow.summary() for _, flow in sorted(self.flows.items())],
            "totp_used": self.totp_guard.export_state(),
        }
