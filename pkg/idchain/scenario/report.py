import hashlib
import json
import logging
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Optional, Union

from pydantic import BaseModel

from idchain.exceptions import KeyFormatError, LedgerParseError, ScenarioError
from idchain.hdkeys import ExtendedPublicKey
from idchain.ledger import FileLedgerStore, Ledger, TransactionKind, loads
from idchain.netsim import DeliveryStatus, Transcript

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

# Shorter terms match ordinary hex text by chance.
MIN_TERM_LENGTH = 4


class ChainStatus(BaseModel):
    channel_id: str
    ok: bool
    height: Optional[int] = None
    records: int = 0
    data_access: int = 0
    error: Optional[str] = None


class UserTrace(BaseModel):
    user_id: str
    records: int
    data_access: int
    recertification: int
    per_owner: dict[str, int]
    matches_brute_force: bool


class PrivacyScan(BaseModel):
    blobs: list[str]
    terms: int
    findings: list[str] = []

    @property
    def clean(self) -> bool:
        return not self.findings


class AuditReport(BaseModel):
    chains: list[ChainStatus]
    users: list[UserTrace]
    transcript_ledger_records: int
    privacy: PrivacyScan

    @property
    def ok(self) -> bool:
        return all(chain.ok for chain in self.chains) and self.privacy.clean

    def summary(self) -> dict:
        return {
            **self.model_dump(mode="json"),
            "privacy_clean": self.privacy.clean,
            "ok": self.ok,
        }


def trace_user(
    user_id: str,
    owner_keys: Mapping[str, ExtendedPublicKey],
    ledgers: Mapping[str, Ledger],
    gap_limit: Optional[int] = None,
) -> UserTrace:
    """Trace a user's records from their owner keys and reconcile with a full scan."""
    traced, scanned = [], []
    for ledger in ledgers.values():
        bound = sum(1 for _ in ledger.records()) + 1
        for owner_key in owner_keys.values():
            traced.extend(ledger.trace_by_parent_key(owner_key, gap_limit))
            scanned.extend(ledger.brute_force_scan(owner_key, bound))
    kinds = Counter(record.kind for record in traced)
    return UserTrace(
        user_id=user_id,
        records=len(traced),
        data_access=kinds[TransactionKind.DATA_ACCESS],
        recertification=kinds[TransactionKind.RECERTIFICATION],
        per_owner=dict(sorted(Counter(r.data_owner_id for r in traced).items())),
        matches_brute_force=(
            sorted(r.txn_pubkey for r in traced)
            == sorted(r.txn_pubkey for r in scanned)
        ),
    )


def scan_blobs(
    blobs: Mapping[str, bytes], terms: Iterable[bytes]
) -> tuple[list[str], int]:
    """Names of blobs containing any term; terms are matched raw and as hex."""
    patterns = set()
    for term in terms:
        if len(term) >= MIN_TERM_LENGTH:
            patterns.add(term)
            patterns.add(term.hex().encode("ascii"))
    findings = [
        name
        for name, blob in sorted(blobs.items())
        if any(pattern in blob for pattern in patterns)
    ]
    return findings, len(patterns)


def audit_report(
    transcript: Transcript,
    ledgers: Mapping[str, bytes],
    user_keys: Mapping[str, Mapping[str, ExtendedPublicKey]],
    value_terms: Iterable[bytes] = (),
    key_terms: Iterable[bytes] = (),
    state_blobs: Optional[Mapping[str, bytes]] = None,
    owner_state: Iterable[str] = (),
    pending_digests: Iterable[str] = (),
    gap_limit: Optional[int] = None,
) -> AuditReport:
    """Per-user traces, chain checks and privacy scans over one run's outputs.

    `ledgers` holds persisted ledger bytes per channel. Attribute values
    (`value_terms`) are scanned for in ledgers and in every state blob except
    those named in `owner_state`; user private scalars (`key_terms`) are scanned
    for everywhere. Raises ScenarioError when the transcript records ledger
    writes that the verified ledgers do not contain and that are not
    listed in `pending_digests`; a ledger failing verification is reported
    instead.
    """
    state_blobs = dict(state_blobs or {})
    chains, parsed = [], {}
    for channel_id, data in sorted(ledgers.items()):
        try:
            ledger = loads(data)
        except LedgerParseError as e:
            chains.append(ChainStatus(channel_id=channel_id, ok=False, error=str(e)))
            continue
        parsed[channel_id] = ledger
        records = [record for _, record in ledger.records()]
        ok = ledger.verify_chain()
        chains.append(
            ChainStatus(
                channel_id=channel_id,
                ok=ok,
                height=ledger.height,
                records=len(records),
                data_access=sum(
                    1 for r in records if r.kind is TransactionKind.DATA_ACCESS
                ),
                error=None if ok else "chain verification failed",
            )
        )

    notes = transcript.filter(kind="ledger_record", status=DeliveryStatus.NOTE)
    if parsed and all(chain.ok for chain in chains):
        known = {
            hashlib.sha256(record.txn_pubkey).hexdigest()
            for ledger in parsed.values()
            for _, record in ledger.records()
        }
        known.update(pending_digests)
        unknown = [note for note in notes if note.digest not in known]
        if unknown:
            raise ScenarioError(
                f"Transcript records {len(unknown)} ledger writes missing from the "
                f"ledgers; transcript and ledgers come from different runs"
            )

    users = [
        trace_user(user_id, owner_keys, parsed, gap_limit)
        for user_id, owner_keys in sorted(user_keys.items())
    ]

    value_terms, key_terms = list(value_terms), list(key_terms)
    value_blobs = {f"ledger:{c}": data for c, data in ledgers.items()}
    value_blobs.update(
        {f"state:{n}": b for n, b in state_blobs.items() if n not in set(owner_state)}
    )
    key_blobs = {
        **{f"ledger:{c}": data for c, data in ledgers.items()},
        **{f"state:{n}": b for n, b in state_blobs.items()},
    }
    value_findings, value_count = scan_blobs(value_blobs, value_terms)
    key_findings, key_count = scan_blobs(key_blobs, key_terms)
    findings = sorted(
        {f"attribute value in {name}" for name in value_findings}
        | {f"private key in {name}" for name in key_findings}
    )
    if findings:
        logger.warning(f"Privacy scan found {len(findings)} leaks")

    return AuditReport(
        chains=chains,
        users=users,
        transcript_ledger_records=len(notes),
        privacy=PrivacyScan(
            blobs=sorted(key_blobs), terms=value_count + key_count, findings=findings
        ),
    )


def audit_report_from_dir(
    run_dir: Union[str, Path], gap_limit: Optional[int] = None
) -> AuditReport:
    """Rebuild the audit report from the files a scenario run wrote.

    Private keys are never written, so the private-key scan is skipped.
    """
    root = Path(run_dir)
    try:
        transcript = Transcript.read(root / "transcript.jsonl")
        store = FileLedgerStore(root / "ledger")
        ledgers = {c: store.raw(c) for c in store.list_channels()}
        users = json.loads((root / "users.json").read_text(encoding="utf-8"))
        run = json.loads((root / "run.json").read_text(encoding="utf-8"))
        state_blobs = {
            path.stem: path.read_bytes()
            for path in sorted((root / "state").glob("*.json"))
        }
        user_keys = {
            user_id: {
                owner_id: ExtendedPublicKey.from_base58(key)
                for owner_id, key in keys.items()
            }
            for user_id, keys in users.items()
        }
    except (OSError, ValueError, KeyFormatError) as e:
        raise ScenarioError(f"Cannot read run directory {root}: {e}") from e
    return audit_report(
        transcript,
        ledgers,
        user_keys,
        value_terms=[v.encode("utf-8") for v in run.get("attribute_values", [])],
        state_blobs=state_blobs,
        owner_state=run.get("owners", []),
        pending_digests=run.get("pending_records", []),
        gap_limit=gap_limit,
    )
