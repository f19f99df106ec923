"""Wire messages exchanged between actors over the bus.

Every message is a frozen pydantic model serialized as JSON; bytes travel as hex.
"""

from enum import Enum
from typing import ClassVar, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from idchain.ibcpre import ReEncryptionKey
from idchain.ledger import RecertificationInfo
from idchain.trust import AttributeAssertion, SourceClass, SourceRecommendation


class Message(BaseModel):
    kind: ClassVar[str]

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    def to_payload(self) -> bytes:
        return self.model_dump_json().encode("utf-8")

    @classmethod
    def from_payload(cls, payload: bytes):
        return cls.model_validate_json(payload)


# Sign-up and login


class SignupRequest(Message):
    kind: ClassVar[str] = "signup_request"

    username: str
    password: str
    idp_xpub: str
    ibcpre_identity: str


class SignupResponse(Message):
    kind: ClassVar[str] = "signup_response"

    username: str
    accepted: bool
    error: Optional[Literal["username_taken", "password_policy"]] = None
    detail: Optional[str] = None
    totp_secret: Optional[str] = None


class LoginPassword(Message):
    kind: ClassVar[str] = "login_password"

    username: str
    password: str


class LoginTotp(Message):
    kind: ClassVar[str] = "login_totp"

    username: str
    code: str


class LoginKeyRequest(Message):
    kind: ClassVar[str] = "login_key_request"

    username: str
    login_index: int = Field(ge=0)


class LoginChallenge(Message):
    kind: ClassVar[str] = "login_challenge"

    username: str
    login_index: int
    challenge: bytes


class LoginKeyProof(Message):
    """Signature over the challenge, or the child public key in literal mode."""

    kind: ClassVar[str] = "login_key_proof"

    username: str
    login_index: int = Field(ge=0)
    signature: Optional[bytes] = None
    public_key: Optional[bytes] = None


class LoginStage(Message):
    kind: ClassVar[str] = "login_stage"

    username: str
    stage: int
    passed: bool
    detail: Optional[str] = None
    session: Optional[str] = None


# Service provider login


class RequestedClaim(BaseModel):
    name: str
    threshold: float = Field(ge=0.0, le=1.0)
    mandatory: bool = True

    model_config = ConfigDict(frozen=True)


class ClaimsRequest(Message):
    kind: ClassVar[str] = "claims_request"

    sp_id: str
    idp_id: str
    user_id: str
    claims: list[RequestedClaim]
    nonce: str


class OwnerSubmission(BaseModel):
    owner_id: str
    envelope: bytes

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


class IdentitySubmission(Message):
    kind: ClassVar[str] = "identity_submission"

    nonce: str
    session: str
    attributes: list[str]
    condition: str
    submissions: list[OwnerSubmission]


class GrantPurpose(str, Enum):
    VERIFY = "verify"
    ASSERT = "assert"
    STORED = "stored"


class DelegationGrant(Message):
    kind: ClassVar[str] = "delegation_grant"

    nonce: str
    purpose: GrantPurpose
    rekeys: list[ReEncryptionKey]
    session: Optional[str] = None
    # consented attributes; used by stored grants, which carry no submission
    attributes: list[str] = []


class RoutedMessage(Message):
    """Carried by a communication server; `payload` is forwarded unmodified."""

    kind: ClassVar[str] = "route"

    origin: str
    destination: str
    inner_kind: str
    payload: bytes


class RouteFailure(Message):
    kind: ClassVar[str] = "route_failure"

    destination: str
    inner_kind: str
    reason: str


class VerifyRequest(Message):
    kind: ClassVar[str] = "verify_request"

    nonce: str
    idp_id: str
    sp_id: str
    owner_id: str
    claimed_attributes: list[str]
    condition: str
    envelope: bytes


class VerificationOutcome(str, Enum):
    VERIFIED = "verified"
    MISMATCH = "mismatch"
    FAILED = "failed"


class VerificationResult(Message):
    kind: ClassVar[str] = "verification_result"

    owner_id: str
    outcome: VerificationOutcome
    source_class: SourceClass
    latest_recert: list[RecertificationInfo] = []


class SubmittedDocument(BaseModel):
    """Plaintext of a user envelope: the pseudo-identifier and claimed values."""

    owner_key: str
    attributes: dict[str, str]

    model_config = ConfigDict(frozen=True)


class GreenSignal(Message):
    kind: ClassVar[str] = "green_signal"

    nonce: str
    owners: list[str]
    degraded: list[str] = []


class FlowAborted(Message):
    kind: ClassVar[str] = "flow_aborted"

    nonce: str
    reason: str


class AssertionResponse(Message):
    kind: ClassVar[str] = "assertion_response"

    nonce: str
    assertions: list[AttributeAssertion]
    missing: list[str] = []


class AccessDecision(Message):
    kind: ClassVar[str] = "access_decision"

    nonce: str
    granted: bool
    failed_claims: list[str] = []


class Recommendations(Message):
    kind: ClassVar[str] = "recommendations"

    nonce: str
    by_claim: dict[str, list[SourceRecommendation]]


# Stored identity


class StoreRequest(Message):
    kind: ClassVar[str] = "store_request"

    nonce: str
    session: str
    owner_id: str


class StoreReceipt(Message):
    kind: ClassVar[str] = "store_receipt"

    nonce: str
    owner_id: str
    handle: Optional[str] = None
    error: Optional[str] = None
