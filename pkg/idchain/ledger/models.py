from enum import Enum
from typing import Annotated, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from idchain.hdkeys import Signature
from idchain.hdkeys.curve import point_from_bytes


Hash32 = Annotated[bytes, Field(min_length=32, max_length=32)]
Point33 = Annotated[bytes, Field(min_length=33, max_length=33)]

ZERO_HASH = b"\x00" * 32


class TransactionKind(str, Enum):
    DATA_ACCESS = "data_access"
    RECERTIFICATION = "recertification"


class AccessOutcome(str, Enum):
    VERIFIED = "verified"
    MISMATCH = "mismatch"


class DataAccessDetails(BaseModel):
    idp_id: str
    sp_id: str
    requested_attributes: list[str]
    outcome: AccessOutcome

    model_config = ConfigDict(frozen=True)


class RecertificationDetails(BaseModel):
    attribute_name: str

    model_config = ConfigDict(frozen=True)


class TransactionRecord(BaseModel):
    """A ledger entry. Carries attribute names and metadata, never values."""

    kind: TransactionKind
    timestamp: int = Field(ge=0)
    txn_pubkey: Point33
    data_owner_id: str
    data_access: Optional[DataAccessDetails] = None
    recertification: Optional[RecertificationDetails] = None

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    @field_validator("txn_pubkey")
    @classmethod
    def check_point(cls, value: bytes) -> bytes:
        point_from_bytes(value)
        return value

    @model_validator(mode="after")
    def check_payload(self) -> "TransactionRecord":
        if self.kind is TransactionKind.DATA_ACCESS:
            if self.data_access is None or self.recertification is not None:
                raise ValueError("data_access records carry only data_access details")
        elif self.recertification is None or self.data_access is not None:
            raise ValueError("recertification records carry only an attribute name")
        return self

    @property
    def attribute_names(self) -> list[str]:
        if self.data_access is not None:
            return list(self.data_access.requested_attributes)
        return [self.recertification.attribute_name]


class MemberInfo(BaseModel):
    member_id: str
    public_key: Point33

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


class ChannelConfig(BaseModel):
    channel_id: str
    members: list[MemberInfo]
    quorum: int

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )

    def member_key(self, member_id: str) -> Optional[bytes]:
        for member in self.members:
            if member.member_id == member_id:
                return member.public_key
        return None

    def quorum_in_range(self) -> bool:
        member_ids = [member.member_id for member in self.members]
        return (
            1 <= self.quorum <= len(self.members)
            and len(set(member_ids)) == len(member_ids)
        )


class Endorsement(BaseModel):
    member_id: str
    signature: Signature

    model_config = ConfigDict(frozen=True)


class Block(BaseModel):
    height: int = Field(ge=0)
    prev_hash: Hash32
    timestamp: int = Field(ge=0)
    channel_digest: Hash32
    transactions: list[TransactionRecord] = []
    tx_root: Hash32
    endorsements: list[Endorsement] = []

    model_config = ConfigDict(
        frozen=True, ser_json_bytes="hex", val_json_bytes="hex"
    )


class RecertificationInfo(BaseModel):
    attribute_name: str
    timestamp: int
    block_height: int

    model_config = ConfigDict(frozen=True)
