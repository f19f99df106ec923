import logging
from typing import Any, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError

from idchain.actors.base import ActorBase
from idchain.actors.messages import (
    RoutedMessage,
    SubmittedDocument,
    VerificationOutcome,
    VerificationResult,
    VerifyRequest,
)
from idchain.exceptions import (
    DecryptionFailedError,
    DuplicateRegistrationError,
    KeyFormatError,
    ReEncryptionError,
    UnknownPseudonymError,
)
from idchain.hdkeys import ExtendedPrivateKey, ExtendedPublicKey
from idchain.ibcpre import (
    CiphertextEnvelope,
    IdentitySecretKey,
    ReEncryptionKey,
    decrypt,
    reencrypt,
)
from idchain.ledger import (
    AccessOutcome,
    Consortium,
    DataAccessDetails,
    TransactionRecord,
)
from idchain.netsim import Envelope, MessageBus
from idchain.trust import SourceClass

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class AttributeRecord(BaseModel):
    value: str
    last_recert: int


class IdentityDocument(BaseModel):
    registered_owner_key: ExtendedPublicKey
    attributes: dict[str, AttributeRecord]
    owner_class: SourceClass
    registered_at: int

    @property
    def key_id(self) -> str:
        return self.registered_owner_key.to_base58()


class PendingAccess(BaseModel):
    key_id: str
    details: DataAccessDetails

    model_config = ConfigDict(frozen=True)


class DataOwner(ActorBase):
    """An authoritative attribute source and consortium member."""

    role = "owner"

    def __init__(
        self,
        owner_id: str,
        source_class: SourceClass,
        secret_key: IdentitySecretKey,
        signing_key: ExtendedPrivateKey,
    ):
        super().__init__(owner_id)
        self.source_class = SourceClass(source_class)
        self.signing_key = signing_key
        self.consortium: Optional[Consortium] = None
        self.comm_server_id: Optional[str] = None
        self.documents: dict[str, IdentityDocument] = {}
        self._secret_key = secret_key
        self._counters: dict[str, int] = {}
        self._txn_keys: dict[str, list[bytes]] = {}
        self._pending: dict[str, PendingAccess] = {}

    def join(self, consortium: Consortium) -> None:
        self.consortium = consortium
        self.comm_server_id = consortium.comm_server_id

    def document(self, owner_key: Union[ExtendedPublicKey, str]) -> IdentityDocument:
        key_id = owner_key if isinstance(owner_key, str) else owner_key.to_base58()
        try:
            return self.documents[key_id]
        except KeyError:
            raise UnknownPseudonymError(
                f"No identity document registered with {self.actor_id} under this key"
            ) from None

    def _next_counter(self, key_id: str) -> int:
        counter = self._counters.get(key_id, 0)
        self._counters[key_id] = counter + 1
        return counter

    def _record_recertification(
        self, document: IdentityDocument, attribute: str, now: int
    ) -> TransactionRecord:
        record = self.consortium.ledger.record_recertification(
            document.registered_owner_key,
            self._next_counter(document.key_id),
            attribute,
            self.actor_id,
            now,
        )
        self._txn_keys.setdefault(document.key_id, []).append(record.txn_pubkey)
        return record

    def register(
        self, owner_key: ExtendedPublicKey, attributes: dict[str, str], now: int
    ) -> IdentityDocument:
        key_id = owner_key.to_base58()
        if key_id in self.documents:
            raise DuplicateRegistrationError(
                f"Key already registered with {self.actor_id}"
            )
        document = IdentityDocument(
            registered_owner_key=owner_key,
            attributes={
                name: AttributeRecord(value=value, last_recert=now)
                for name, value in attributes.items()
            },
            owner_class=self.source_class,
            registered_at=now,
        )
        self.documents[key_id] = document
        for name in sorted(attributes):
            self._record_recertification(document, name, now)
        self.consortium.commit(now)
        logger.info(
            f"{self.actor_id} registered a user with {len(attributes)} attributes"
        )
        return document

    def recertify(
        self,
        owner_key: ExtendedPublicKey,
        attribute: str,
        now: int,
        value: Optional[str] = None,
    ) -> TransactionRecord:
        document = self.document(owner_key)
        current = document.attributes.get(attribute)
        if current is None and value is None:
            raise UnknownPseudonymError(
                f"Attribute '{attribute}' is not on file with {self.actor_id}"
            )
        document.attributes[attribute] = AttributeRecord(
            value=value if value is not None else current.value, last_recert=now
        )
        record = self._record_recertification(document, attribute, now)
        self.consortium.commit(now)
        return record

    def verify_identity_claim(
        self,
        envelope: Union[CiphertextEnvelope, bytes],
        condition: str,
        claimed_attributes: list[str],
        rekey: Optional[ReEncryptionKey] = None,
    ) -> tuple[VerificationResult, IdentityDocument]:
        """Decrypt a submitted document and compare it with the one on file.

        With `rekey` the owner applies the re-encryption itself; otherwise the
        envelope must already be addressed to this owner.
        """
        if isinstance(envelope, bytes):
            envelope = CiphertextEnvelope.from_bytes(envelope)
        if rekey is not None:
            try:
                envelope = reencrypt(rekey, envelope)
            except ReEncryptionError:
                raise DecryptionFailedError() from None
        plaintext = decrypt(self._secret_key, envelope, condition)
        try:
            submitted = SubmittedDocument.model_validate_json(plaintext)
            document = self.document(ExtendedPublicKey.from_base58(submitted.owner_key))
        except (ValidationError, KeyFormatError):
            raise UnknownPseudonymError("Submitted owner key is not a valid key")

        matches = all(
            name in submitted.attributes
            and name in document.attributes
            and submitted.attributes[name].encode("utf-8")
            == document.attributes[name].value.encode("utf-8")
            for name in claimed_attributes
        )
        outcome = (
            VerificationOutcome.VERIFIED if matches else VerificationOutcome.MISMATCH
        )
        latest = []
        if matches:
            keys = self._txn_keys.get(document.key_id, [])
            for name in sorted(claimed_attributes):
                info = self.consortium.ledger.latest_recertification(keys, name)
                if info is not None:
                    latest.append(info)
        result = VerificationResult(
            owner_id=self.actor_id,
            outcome=outcome,
            source_class=self.source_class,
            latest_recert=latest,
        )
        return result, document

    def on_verify_request(self, envelope: Envelope, bus: MessageBus) -> None:
        request = self.parse(envelope, bus, VerifyRequest)
        if request is None:
            return
        try:
            result, document = self.verify_identity_claim(
                request.envelope, request.condition, request.claimed_attributes
            )
        except (DecryptionFailedError, UnknownPseudonymError) as e:
            logger.warning(f"{self.actor_id} could not verify a claim: {e}")
            result = VerificationResult(
                owner_id=self.actor_id,
                outcome=VerificationOutcome.FAILED,
                source_class=self.source_class,
            )
        else:
            self._pending[envelope.flow_id] = PendingAccess(
                key_id=document.key_id,
                details=DataAccessDetails(
                    idp_id=request.idp_id,
                    sp_id=request.sp_id,
                    requested_attributes=sorted(request.claimed_attributes),
                    outcome=AccessOutcome(result.outcome.value),
                ),
            )
        self.send(
            bus,
            self.comm_server_id,
            RoutedMessage(
                origin=self.actor_id,
                destination=request.idp_id,
                inner_kind=result.kind,
                payload=result.to_payload(),
            ),
            step=5,
            flow_id=envelope.flow_id,
        )

    def record_access(
        self, flow_id: str, bus: MessageBus
    ) -> Optional[TransactionRecord]:
        """Record the data access of a verified or mismatched claim on the ledger."""
        pending = self._pending.pop(flow_id, None)
        if pending is None:
            return None
        document = self.documents[pending.key_id]
        now = bus.clock.now
        record = self.consortium.ledger.record_data_access(
            document.registered_owner_key,
            self._next_counter(pending.key_id),
            pending.details,
            self.actor_id,
            now,
        )
        self._txn_keys.setdefault(pending.key_id, []).append(record.txn_pubkey)
        self.consortium.commit(now)
        bus.note(
            self.actor_id,
            "ledger_record",
            step=6,
            flow_id=flow_id,
            detail=pending.details.outcome.value,
            payload=record.txn_pubkey,
        )
        return record

    def export_state(self) -> dict[str, Any]:
        return {
            **super().export_state(),
            "source_class": self.source_class.value,
            "documents": {
                key_id: document.model_dump(mode="json")
                for key_id, document in sorted(self.documents.items())
            },
            "counters": dict(sorted(self._counters.items())),
        }
