"""Canonical length-prefixed binary encoding of ledger structures.

Integers are fixed-width big-endian, strings and byte strings carry a 4-byte
length, and lists carry a 4-byte count. Decoding is strict: every block must
re-encode to exactly the bytes it was read from.
"""

import hashlib
from typing import Callable, TypeVar

from idchain.hdkeys import Signature
from idchain.ledger.models import (
    AccessOutcome,
    Block,
    ChannelConfig,
    DataAccessDetails,
    Endorsement,
    MemberInfo,
    RecertificationDetails,
    TransactionKind,
    TransactionRecord,
)

T = TypeVar("T")

KIND_CODES = {TransactionKind.DATA_ACCESS: 1, TransactionKind.RECERTIFICATION: 2}
OUTCOME_CODES = {AccessOutcome.VERIFIED: 1, AccessOutcome.MISMATCH: 2}


def _u8(value: int) -> bytes:
    return value.to_bytes(1, "big")


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "big")


def _u64(value: int) -> bytes:
    return value.to_bytes(8, "big")


def _blob(data: bytes) -> bytes:
    return _u32(len(data)) + data


def _text(value: str) -> bytes:
    return _blob(value.encode("utf-8"))


def encode_transaction(record: TransactionRecord) -> bytes:
    parts = [
        _u8(KIND_CODES[record.kind]),
        _u64(record.timestamp),
        record.txn_pubkey,
        _text(record.data_owner_id),
    ]
    if record.data_access is not None:
        details = record.data_access
        parts += [
            _text(details.idp_id),
            _text(details.sp_id),
            _u32(len(details.requested_attributes)),
            *(_text(name) for name in details.requested_attributes),
            _u8(OUTCOME_CODES[details.outcome]),
        ]
    else:
        parts.append(_text(record.recertification.attribute_name))
    return b"".join(parts)


def transaction_root(transactions: list[TransactionRecord]) -> bytes:
    encoded = [_blob(encode_transaction(record)) for record in transactions]
    return hashlib.sha256(_u32(len(encoded)) + b"".join(encoded)).digest()


def encode_config(config: ChannelConfig) -> bytes:
    return b"".join(
        [
            _text(config.channel_id),
            _u32(config.quorum),
            _u32(len(config.members)),
            *(_text(m.member_id) + m.public_key for m in config.members),
        ]
    )


def encode_header(block: Block) -> bytes:
    return b"".join(
        [
            _u64(block.height),
            block.prev_hash,
            _u64(block.timestamp),
            block.channel_digest,
            block.tx_root,
        ]
    )


def encode_block(block: Block) -> bytes:
    return b"".join(
        [
            encode_header(block),
            _u32(len(block.transactions)),
            *(_blob(encode_transaction(record)) for record in block.transactions),
            _u32(len(block.endorsements)),
            *(
                _text(e.member_id) + e.signature.to_bytes()
                for e in block.endorsements
            ),
        ]
    )


class Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, length: int) -> bytes:
        if self.offset + length > len(self.data):
            raise ValueError("unexpected end of data")
        chunk = self.data[self.offset : self.offset + length]
        self.offset += length
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "big")

    def u64(self) -> int:
        return int.from_bytes(self.take(8), "big")

    def blob(self) -> bytes:
        return self.take(self.u32())

    def text(self) -> str:
        return self.blob().decode("utf-8")

    def many(self, read: Callable[[], T]) -> list[T]:
        count = self.u32()
        if count > len(self.data) - self.offset:
            raise ValueError(f"implausible item count {count}")
        return [read() for _ in range(count)]

    def finish(self) -> None:
        if self.offset != len(self.data):
            raise ValueError("trailing bytes")


def _lookup(codes: dict, code: int):
    for value, known in codes.items():
        if known == code:
            return value
    raise ValueError(f"unknown code {code}")


def decode_transaction(data: bytes) -> TransactionRecord:
    reader = Reader(data)
    kind = _lookup(KIND_CODES, reader.u8())
    fields = dict(
        kind=kind,
        timestamp=reader.u64(),
        txn_pubkey=reader.take(33),
        data_owner_id=reader.text(),
    )
    if kind is TransactionKind.DATA_ACCESS:
        fields["data_access"] = DataAccessDetails(
            idp_id=reader.text(),
            sp_id=reader.text(),
            requested_attributes=reader.many(reader.text),
            outcome=_lookup(OUTCOME_CODES, reader.u8()),
        )
    else:
        fields["recertification"] = RecertificationDetails(
            attribute_name=reader.text()
        )
    reader.finish()
    return TransactionRecord(**fields)


def decode_config(data: bytes) -> ChannelConfig:
    reader = Reader(data)
    channel_id = reader.text()
    quorum = reader.u32()
    members = reader.many(
        lambda: MemberInfo(member_id=reader.text(), public_key=reader.take(33))
    )
    reader.finish()
    config = ChannelConfig(channel_id=channel_id, members=members, quorum=quorum)
    if encode_config(config) != data:
        raise ValueError("non-canonical channel config")
    return config


def decode_block(data: bytes) -> Block:
    """Raises ValueError (including pydantic validation errors) on bad input."""
    reader = Reader(data)
    header = dict(
        height=reader.u64(),
        prev_hash=reader.take(32),
        timestamp=reader.u64(),
        channel_digest=reader.take(32),
        tx_root=reader.take(32),
    )
    transactions = reader.many(lambda: decode_transaction(reader.blob()))
    endorsements = reader.many(
        lambda: Endorsement(
            member_id=reader.text(), signature=Signature.from_bytes(reader.take(64))
        )
    )
    reader.finish()
    block = Block(**header, transactions=transactions, endorsements=endorsements)
    if encode_block(block) != data:
        raise ValueError("non-canonical block encoding")
    return block


def config_digest(config: ChannelConfig) -> bytes:
    return hashlib.sha256(encode_config(config)).digest()


def block_hash(block: Block) -> bytes:
    """Hash of the block header; endorsements sign this value."""
    return hashlib.sha256(encode_header(block)).digest()
