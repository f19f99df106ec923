import io
import logging
import random

import pytest

from idchain.exceptions import (
    CounterReuseError,
    EndorsementError,
    LedgerError,
    LedgerParseError,
)
from idchain.hdkeys import UserKeyring, master_from_seed, verify
from idchain.ledger import (
    AccessOutcome,
    ChannelConfig,
    Consortium,
    DataAccessDetails,
    FileLedgerStore,
    Ledger,
    MemberInfo,
    MemoryLedgerStore,
    TransactionKind,
    block_hash,
    dumps,
    load,
    loads,
    persist,
)


MEMBER_IDS = ["dmv", "irs", "ssa"]


def member_key(member_id: str):
    return master_from_seed(member_id.encode().ljust(32, b"\x00"))


def details(sp_id: str = "sp-shop", outcome=AccessOutcome.VERIFIED):
    return DataAccessDetails(
        idp_id="idp-1",
        sp_id=sp_id,
        requested_attributes=["name", "dob"],
        outcome=outcome,
    )


@pytest.fixture
def signers():
    return {member_id: member_key(member_id) for member_id in MEMBER_IDS}


@pytest.fixture
def config(signers):
    return ChannelConfig(
        channel_id="gov",
        members=[
            MemberInfo(member_id=member_id, public_key=key.public_bytes)
            for member_id, key in sorted(signers.items())
        ],
        quorum=2,
    )


@pytest.fixture
def alice():
    return UserKeyring.from_seed(b"alice-seed-for-ledger-tests-0000")


@pytest.fixture
def bob():
    return UserKeyring.from_seed(b"bob-seed-for-ledger-tests-000000")


@pytest.fixture
def five_block_ledger(config, signers, alice, bob):
    """Genesis plus four blocks, each holding two records."""
    ledger = Ledger.genesis(config, timestamp=1_000)
    endorsers = {m: signers[m] for m in ["dmv", "irs"]}
    for block_index in range(4):
        ledger.record_data_access(
            alice.owner_xpub(0), block_index, details(), "dmv", 2_000 + block_index
        )
        ledger.record_recertification(
            bob.owner_xpub(1), block_index, "address", "irs", 2_000 + block_index
        )
        ledger.commit_block(endorsers, timestamp=3_000 + block_index)
    return ledger


class TestLedger:
    def test_hello(self):
        assert True

    def test_genesis(self, config):
        ledger = Ledger.genesis(config)
        assert ledger.height == 0
        assert ledger.tip.transactions == []
        assert ledger.tip.endorsements == []
        assert ledger.verify_chain()

    def test_genesis_rejects_bad_quorum(self, config):
        with pytest.raises(LedgerError):
            Ledger.genesis(config.model_copy(update={"quorum": 0}))
        with pytest.raises(LedgerError):
            Ledger.genesis(config.model_copy(update={"quorum": 4}))

    def test_genesis_rejects_duplicate_members(self, config):
        members = config.members + [config.members[0]]
        with pytest.raises(LedgerError):
            Ledger.genesis(config.model_copy(update={"members": members}))

    def test_commit_and_verify(self, five_block_ledger):
        assert five_block_ledger.height == 4
        assert five_block_ledger.pending == []
        assert five_block_ledger.verify_chain()
        for block in five_block_ledger.blocks[1:]:
            assert len(block.transactions) == 2
            assert [e.member_id for e in block.endorsements] == ["dmv", "irs"]

    def test_endorsements_sign_the_block_hash(self, five_block_ledger, signers):
        block = five_block_ledger.tip
        digest = block_hash(block)
        for endorsement in block.endorsements:
            public = signers[endorsement.member_id].public_bytes
            assert verify(public, digest, endorsement.signature)

    def test_block_hash_ignores_endorsements(self, five_block_ledger):
        block = five_block_ledger.tip
        assert block_hash(block) == block_hash(
            block.model_copy(update={"endorsements": []})
        )

    def test_below_quorum_rejected(self, config, signers, alice):
        ledger = Ledger.genesis(config)
        ledger.record_data_access(alice.owner_xpub(0), 0, details(), "dmv", 10)
        with pytest.raises(EndorsementError):
            ledger.commit_block({"dmv": signers["dmv"]}, timestamp=20)
        assert ledger.height == 0
        assert len(ledger.pending) == 1

    def test_non_member_rejected(self, config, signers):
        ledger = Ledger.genesis(config)
        outsider = {"dmv": signers["dmv"], "mallory": member_key("mallory")}
        with pytest.raises(EndorsementError):
            ledger.commit_block(outsider, timestamp=20)

    def test_member_id_with_wrong_key_rejected(self, config, signers):
        ledger = Ledger.genesis(config)
        forged = {"dmv": signers["dmv"], "irs": member_key("mallory")}
        with pytest.raises(EndorsementError):
            ledger.commit_block(forged, timestamp=20)

    def test_counter_reuse(self, config, signers, alice):
        ledger = Ledger.genesis(config)
        owner_key = alice.owner_xpub(0)
        ledger.record_data_access(owner_key, 0, details(), "dmv", 10)
        with pytest.raises(CounterReuseError):
            ledger.record_recertification(owner_key, 0, "name", "dmv", 11)
        ledger.commit_block(signers, timestamp=20)
        with pytest.raises(CounterReuseError):
            ledger.record_data_access(owner_key, 0, details(), "dmv", 30)
        # same counter under a different owner key is a different transaction key
        ledger.record_data_access(alice.owner_xpub(1), 0, details(), "irs", 30)

    def test_records_are_pseudonymous(self, five_block_ledger, alice, bob):
        keys = [record.txn_pubkey for _, record in five_block_ledger.records()]
        assert len(set(keys)) == len(keys)
        raw = dumps(five_block_ledger)
        for keyring in (alice, bob):
            for owner_index in (0, 1):
                assert keyring.owner_xpub(owner_index).point.hex().encode() not in raw

    def test_reordered_transactions_fail(self, five_block_ledger):
        block = five_block_ledger.blocks[2]
        five_block_ledger.blocks[2] = block.model_copy(
            update={"transactions": list(reversed(block.transactions))}
        )
        assert not five_block_ledger.verify_chain()

    def test_removed_endorsement_fails(self, five_block_ledger):
        block = five_block_ledger.blocks[3]
        five_block_ledger.blocks[3] = block.model_copy(
            update={"endorsements": block.endorsements[:1]}
        )
        assert not five_block_ledger.verify_chain()

    def test_duplicate_endorsement_fails(self, five_block_ledger):
        block = five_block_ledger.blocks[3]
        five_block_ledger.blocks[3] = block.model_copy(
            update={"endorsements": [block.endorsements[0]] * 2}
        )
        assert not five_block_ledger.verify_chain()

    def test_commit_explicit_transactions_keeps_the_rest_pending(
        self, config, signers, alice
    ):
        ledger = Ledger.genesis(config)
        first = ledger.record_data_access(alice.owner_xpub(0), 0, details(), "dmv", 1)
        ledger.record_data_access(alice.owner_xpub(0), 1, details(), "dmv", 2)
        ledger.commit_block(signers, timestamp=3, transactions=[first])
        assert ledger.tip.transactions == [first]
        assert len(ledger.pending) == 1

    def test_latest_recertification(self, config, signers, bob):
        ledger = Ledger.genesis(config)
        owner_key = bob.owner_xpub(1)
        ledger.record_recertification(owner_key, 0, "address", "irs", 100)
        ledger.record_recertification(owner_key, 1, "name", "irs", 150)
        ledger.commit_block(signers, timestamp=200)
        ledger.record_recertification(owner_key, 2, "address", "irs", 300)
        ledger.commit_block(signers, timestamp=400)
        keys = [record.txn_pubkey for _, record in ledger.records()]

        info = ledger.latest_recertification(keys, "address")
        assert info.timestamp == 300
        assert info.block_height == 2
        assert ledger.latest_recertification(keys, "name").timestamp == 150
        assert ledger.latest_recertification(keys, "dob") is None


class TestTrace:
    def test_hello(self):
        assert True

    def test_trace_owner_key(self, five_block_ledger, alice):
        records = five_block_ledger.trace_by_parent_key(alice.owner_xpub(0))
        assert len(records) == 4
        assert all(r.kind is TransactionKind.DATA_ACCESS for r in records)
        assert records == five_block_ledger.brute_force_scan(alice.owner_xpub(0), 50)

    def test_trace_unrelated_key(self, five_block_ledger):
        stranger = UserKeyring.from_seed(b"stranger-seed-for-ledger-tests-0")
        assert five_block_ledger.trace_by_parent_key(stranger.owner_xpub(0)) == []
        assert five_block_ledger.trace_by_parent_key(stranger.data_access_root) == []

    def test_trace_from_root_matches_brute_force(self, config, signers, alice, bob):
        ledger = Ledger.genesis(config)
        plan = [(alice, 0, 0), (bob, 1, 0), (alice, 2, 0), (alice, 0, 1), (alice, 2, 1)]
        for timestamp, (keyring, owner_index, counter) in enumerate(plan):
            ledger.record_data_access(
                keyring.owner_xpub(owner_index), counter, details(), "dmv", timestamp
            )
            ledger.commit_block(signers, timestamp=timestamp + 100)

        traced = ledger.trace_by_parent_key(alice.data_access_root)
        expected = [
            record
            for _, record in ledger.records()
            if record
            in ledger.brute_force_scan(alice.owner_xpub(0), 50)
            + ledger.brute_force_scan(alice.owner_xpub(2), 50)
        ]
        assert len(traced) == 4
        assert traced == expected

    def test_owner_scoped_trace(self, five_block_ledger, alice):
        records = five_block_ledger.trace_by_parent_key(alice.owner_xpub(0))
        assert {record.data_owner_id for record in records} == {"dmv"}

    def test_gap_limit(self, config, signers, alice):
        ledger = Ledger.genesis(config)
        owner_key = alice.owner_xpub(0)
        ledger.record_data_access(owner_key, 0, details(), "dmv", 1)
        ledger.record_data_access(owner_key, 25, details(), "dmv", 2)
        ledger.commit_block(signers, timestamp=3)

        assert len(ledger.trace_by_parent_key(owner_key, gap_limit=20)) == 1
        assert len(ledger.trace_by_parent_key(owner_key, gap_limit=30)) == 2
        assert len(ledger.brute_force_scan(owner_key, 30)) == 2

    def test_gap_limit_must_be_positive(self, five_block_ledger, alice):
        with pytest.raises(LedgerError):
            five_block_ledger.trace_by_parent_key(alice.owner_xpub(0), gap_limit=-1)


class TestPersistence:
    def test_hello(self):
        assert True

    def test_round_trip_file(self, five_block_ledger, tmp_path):
        path = tmp_path / "gov.ledger"
        persist(five_block_ledger, path)
        restored = load(path)
        assert restored == five_block_ledger
        assert restored.verify_chain()

    def test_round_trip_stream(self, five_block_ledger):
        buffer = io.BytesIO()
        persist(five_block_ledger, buffer)
        buffer.seek(0)
        assert load(buffer) == five_block_ledger

    def test_round_trip_ten_blocks(self, config, signers, alice):
        ledger = Ledger.genesis(config)
        for counter in range(9):
            ledger.record_recertification(
                alice.owner_xpub(0), counter, "name", "dmv", counter
            )
            ledger.commit_block(signers, timestamp=counter + 10)
        restored = loads(dumps(ledger))
        assert restored == ledger
        assert restored.height == 9
        assert restored.verify_chain()

    def test_restored_ledger_keeps_counter_index(self, five_block_ledger, alice):
        restored = loads(dumps(five_block_ledger))
        with pytest.raises(CounterReuseError):
            restored.record_data_access(alice.owner_xpub(0), 3, details(), "dmv", 9)

    def test_format(self, five_block_ledger):
        lines = dumps(five_block_ledger).decode().splitlines()
        assert lines[0] == '{"channel_id":"gov","format":"idchain-ledger","version":1}'
        assert len(lines) == 2 + 5
        assert all(line == line.lower() for line in lines[1:])

    def test_truncated_mid_block(self, five_block_ledger):
        data = dumps(five_block_ledger)
        lines = data.split(b"\n")
        offset = sum(len(line) + 1 for line in lines[:5]) + len(lines[5]) // 2
        with pytest.raises(LedgerParseError) as excinfo:
            loads(data[:offset])
        assert excinfo.value.height == 3
        assert "block height 3" in str(excinfo.value)

    def test_missing_final_newline(self, five_block_ledger):
        with pytest.raises(LedgerParseError) as excinfo:
            loads(dumps(five_block_ledger)[:-1])
        assert excinfo.value.height == 4

    def test_uppercase_hex_rejected(self, five_block_ledger):
        lines = dumps(five_block_ledger).split(b"\n")
        lines[3] = lines[3].upper()
        with pytest.raises(LedgerParseError):
            loads(b"\n".join(lines))

    def test_not_a_ledger(self):
        with pytest.raises(LedgerParseError):
            loads(b"hello\nworld\n!\n")
        with pytest.raises(LedgerParseError):
            loads(b"\xff\xfe")
        with pytest.raises(LedgerParseError):
            loads(b"")

    def test_byte_mutation_sample(self, five_block_ledger):
        data = dumps(five_block_ledger)
        positions = random.Random(7).sample(range(len(data)), 150)
        for position in positions:
            assert_mutation_detected(data, position)

    @pytest.mark.acceptance
    def test_byte_mutation_sweep(self, five_block_ledger):
        data = dumps(five_block_ledger)
        for position in range(len(data)):
            assert_mutation_detected(data, position)


def assert_mutation_detected(data: bytes, position: int) -> None:
    mutated = bytearray(data)
    mutated[position] ^= 0x01
    try:
        ledger = loads(bytes(mutated))
    except LedgerParseError:
        return
    assert not ledger.verify_chain(), f"mutation at byte {position} went unnoticed"


class TestLedgerStores:
    def test_hello(self):
        assert True

    def test_file_store(self, five_block_ledger, tmp_path):
        store = FileLedgerStore(tmp_path / "ledgers")
        assert store.list_channels() == []
        store.save(five_block_ledger)
        assert store.list_channels() == ["gov"]
        assert store.path_for("gov").exists()
        assert store.open("gov") == five_block_ledger
        assert store.raw("gov") == dumps(five_block_ledger)

    def test_memory_store(self, five_block_ledger):
        store = MemoryLedgerStore()
        store.save(five_block_ledger)
        assert store.list_channels() == ["gov"]
        assert store.open("gov") == five_block_ledger
        with pytest.raises(LedgerParseError):
            store.open("credit")


class TestConsortium:
    def test_hello(self):
        assert True

    def test_commit_with_online_members(self, signers, alice):
        consortium = Consortium("gov", signers, quorum=2, comm_server_id="comm-gov")
        assert consortium.member_ids == MEMBER_IDS
        assert consortium.commit(timestamp=5) is None

        consortium.ledger.record_data_access(
            alice.owner_xpub(0), 0, details(), "dmv", 1
        )
        block = consortium.commit(timestamp=5)
        assert block.height == 1
        assert [e.member_id for e in block.endorsements] == MEMBER_IDS
        assert consortium.ledger.verify_chain()

    def test_below_quorum_waits(self, signers, alice, caplog):
        consortium = Consortium("gov", signers, quorum=2, comm_server_id="comm-gov")
        consortium.set_online("irs", False)
        consortium.set_online("ssa", False)
        consortium.ledger.record_data_access(
            alice.owner_xpub(0), 0, details(), "dmv", 1
        )
        with caplog.at_level(logging.WARNING):
            assert consortium.commit(timestamp=5) is None
        assert "endorsers online" in caplog.text
        assert len(consortium.ledger.pending) == 1

        consortium.set_online("ssa", True)
        block = consortium.commit(timestamp=6)
        assert [e.member_id for e in block.endorsements] == ["dmv", "ssa"]
        assert consortium.ledger.pending == []

    def test_unknown_member(self, signers):
        consortium = Consortium("gov", signers, quorum=1, comm_server_id="comm-gov")
        with pytest.raises(LedgerError):
            consortium.set_online("mallory", False)
