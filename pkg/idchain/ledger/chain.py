import logging
from collections import defaultdict
from typing import Iterable, Iterator, Mapping, Optional, Union

from idchain.core.config import settings
from idchain.exceptions import CounterReuseError, EndorsementError, LedgerError
from idchain.hdkeys import (
    ExtendedPrivateKey,
    ExtendedPublicKey,
    KeyLayout,
    ckd_pub,
    neuter,
    sign,
    verify,
)
from idchain.ledger.codec import block_hash, config_digest, transaction_root
from idchain.ledger.models import (
    ZERO_HASH,
    Block,
    ChannelConfig,
    DataAccessDetails,
    Endorsement,
    RecertificationDetails,
    RecertificationInfo,
    TransactionKind,
    TransactionRecord,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class Ledger:
    """Hash-chained, endorsement-quorum ledger for one channel.

    Records are queued by `record_*` and appended by `commit_block`. A single
    writer mutates the ledger; committed blocks are never modified.
    """

    def __init__(self, config: ChannelConfig, blocks: list[Block]):
        self.config = config
        self.blocks: list[Block] = list(blocks)
        self.pending: list[TransactionRecord] = []
        self._locations: dict[bytes, list[tuple[int, int]]] = defaultdict(list)
        for block in self.blocks:
            self._index(block)

    def __repr__(self) -> str:
        return (
            f"<Ledger(channel_id={self.config.channel_id}, height={self.height}, "
            f"pending={len(self.pending)})>"
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Ledger):
            return NotImplemented
        return self.config == other.config and self.blocks == other.blocks

    @classmethod
    def genesis(cls, config: ChannelConfig, timestamp: int = 0) -> "Ledger":
        if not config.quorum_in_range():
            raise LedgerError(
                f"Quorum {config.quorum} out of range for {len(config.members)} "
                f"members (or duplicate member ids)"
            )
        block = Block(
            height=0,
            prev_hash=ZERO_HASH,
            timestamp=timestamp,
            channel_digest=config_digest(config),
            transactions=[],
            tx_root=transaction_root([]),
        )
        logger.info(f"Created genesis block for channel '{config.channel_id}'")
        return cls(config, [block])

    @property
    def tip(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return self.tip.height

    def _index(self, block: Block) -> None:
        for position, record in enumerate(block.transactions):
            self._locations[record.txn_pubkey].append((block.height, position))

    def records(self) -> Iterator[tuple[int, TransactionRecord]]:
        """Committed records with their block heights, in ledger order."""
        for block in self.blocks:
            for record in block.transactions:
                yield block.height, record

    def _queue(
        self,
        owner_key_of_user: ExtendedPublicKey,
        counter: int,
        data_owner_id: str,
        timestamp: int,
        **payload,
    ) -> TransactionRecord:
        txn_key = KeyLayout.transaction_key(owner_key_of_user, counter)
        pending_keys = {record.txn_pubkey for record in self.pending}
        if txn_key.point in self._locations or txn_key.point in pending_keys:
            raise CounterReuseError(
                f"Counter {counter} already used under this owner key "
                f"on channel '{self.config.channel_id}'"
            )
        record = TransactionRecord(
            timestamp=timestamp,
            txn_pubkey=txn_key.point,
            data_owner_id=data_owner_id,
            **payload,
        )
        self.pending.append(record)
        logger.debug(f"Queued {record.kind.value} record from '{data_owner_id}'")
        return record

    def record_data_access(
        self,
        owner_key_of_user: ExtendedPublicKey,
        counter: int,
        details: DataAccessDetails,
        data_owner_id: str,
        timestamp: int,
    ) -> TransactionRecord:
        return self._queue(
            owner_key_of_user,
            counter,
            data_owner_id,
            timestamp,
            kind=TransactionKind.DATA_ACCESS,
            data_access=details,
        )

    def record_recertification(
        self,
        owner_key_of_user: ExtendedPublicKey,
        counter: int,
        attribute: str,
        data_owner_id: str,
        timestamp: int,
    ) -> TransactionRecord:
        return self._queue(
            owner_key_of_user,
            counter,
            data_owner_id,
            timestamp,
            kind=TransactionKind.RECERTIFICATION,
            recertification=RecertificationDetails(attribute_name=attribute),
        )

    def commit_block(
        self,
        signers: Mapping[str, ExtendedPrivateKey],
        timestamp: int,
        transactions: Optional[list[TransactionRecord]] = None,
    ) -> Block:
        """Append a block holding `transactions` (default: all pending records)."""
        if transactions is None:
            transactions = list(self.pending)
        for member_id, key in signers.items():
            registered = self.config.member_key(member_id)
            if registered is None or registered != key.public_bytes:
                raise EndorsementError(f"Signer '{member_id}' is not a channel member")
        if len(signers) < self.config.quorum:
            raise EndorsementError(
                f"{len(signers)} endorsements, quorum is {self.config.quorum}"
            )

        unsigned = Block(
            height=self.height + 1,
            prev_hash=block_hash(self.tip),
            timestamp=timestamp,
            channel_digest=config_digest(self.config),
            transactions=transactions,
            tx_root=transaction_root(transactions),
        )
        digest = block_hash(unsigned)
        endorsements = [
            Endorsement(member_id=member_id, signature=sign(key, digest))
            for member_id, key in sorted(signers.items())
        ]
        block = unsigned.model_copy(update={"endorsements": endorsements})

        self.blocks.append(block)
        self._index(block)
        committed = {id(record) for record in transactions}
        self.pending = [r for r in self.pending if id(r) not in committed]
        logger.info(
            f"Committed block {block.height} on '{self.config.channel_id}' with "
            f"{len(transactions)} transactions and {len(endorsements)} endorsements"
        )
        return block

    def verify_chain(self) -> bool:
        """True iff heights, links, roots, channel digests and endorsements hold."""
        try:
            if not self.config.quorum_in_range():
                return False
            digest = config_digest(self.config)
            for expected_height, block in enumerate(self.blocks):
                if block.height != expected_height:
                    return False
                if block.channel_digest != digest:
                    return False
                if block.tx_root != transaction_root(block.transactions):
                    return False
                if expected_height == 0:
                    if block.prev_hash != ZERO_HASH or block.transactions:
                        return False
                    continue
                if block.prev_hash != block_hash(self.blocks[expected_height - 1]):
                    return False
                if not self._endorsements_valid(block):
                    return False
            return True
        except Exception as e:
            logger.warning(f"Chain verification raised {e!r}")
            return False

    def _endorsements_valid(self, block: Block) -> bool:
        member_ids = [e.member_id for e in block.endorsements]
        if len(set(member_ids)) != len(member_ids):
            return False
        if len(member_ids) < self.config.quorum:
            return False
        digest = block_hash(block)
        for endorsement in block.endorsements:
            key = self.config.member_key(endorsement.member_id)
            if key is None or not verify(key, digest, endorsement.signature):
                return False
        return True

    def lookup(self, txn_pubkey: bytes) -> list[tuple[int, TransactionRecord]]:
        return [
            (height, self.blocks[height].transactions[position])
            for height, position in self._locations.get(txn_pubkey, [])
        ]

    def _scan_children(
        self, parent: ExtendedPublicKey, gap_limit: int
    ) -> list[tuple[int, int, TransactionRecord]]:
        found = []
        misses = 0
        index = 0
        while misses < gap_limit:
            child = ckd_pub(parent, index)
            locations = self._locations.get(child.point, [])
            if locations:
                misses = 0
                for height, position in locations:
                    found.append(
                        (height, position, self.blocks[height].transactions[position])
                    )
            else:
                misses += 1
            index = child.child_index + 1
        return found

    def trace_by_parent_key(
        self,
        parent: Union[ExtendedPublicKey, ExtendedPrivateKey],
        gap_limit: Optional[int] = None,
    ) -> list[TransactionRecord]:
        """Committed records whose transaction key derives from `parent`.

        An extended public key (an owner key) is scanned over its non-hardened
        children. An extended private key is treated as the user's Data Access
        root: each hardened owner key d' is scanned in turn, stopping after
        `gap_limit` consecutive owner keys without records.
        """
        if gap_limit is None:
            gap_limit = settings.LEDGER_GAP_LIMIT
        if gap_limit < 1:
            raise LedgerError("gap_limit must be at least 1")

        if isinstance(parent, ExtendedPublicKey):
            found = self._scan_children(parent, gap_limit)
        else:
            found = []
            misses = 0
            owner_index = 0
            while misses < gap_limit:
                owner_key = neuter(KeyLayout.owner_key(parent, owner_index))
                owner_records = self._scan_children(owner_key, gap_limit)
                if owner_records:
                    misses = 0
                    found.extend(owner_records)
                else:
                    misses += 1
                owner_index += 1

        found.sort(key=lambda item: (item[0], item[1]))
        return [record for _, _, record in found]

    def brute_force_scan(
        self, parent: ExtendedPublicKey, max_index: int
    ) -> list[TransactionRecord]:
        """Records under any child index below `max_index`, ignoring gaps."""
        wanted = {ckd_pub(parent, index).point for index in range(max_index)}
        return [record for _, record in self.records() if record.txn_pubkey in wanted]

    def latest_recertification(
        self, txn_pubkeys: Iterable[bytes], attribute: str
    ) -> Optional[RecertificationInfo]:
        latest = None
        for txn_pubkey in txn_pubkeys:
            for height, record in self.lookup(txn_pubkey):
                if (
                    record.kind is TransactionKind.RECERTIFICATION
                    and record.recertification.attribute_name == attribute
                    and (latest is None or (record.timestamp, height) > latest[:2])
                ):
                    latest = (record.timestamp, height)
        if latest is None:
            return None
        return RecertificationInfo(
            attribute_name=attribute, timestamp=latest[0], block_height=latest[1]
        )
