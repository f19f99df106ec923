from idchain.ledger.chain import Ledger
from idchain.ledger.codec import block_hash, config_digest
from idchain.ledger.consortium import Consortium
from idchain.ledger.models import (
    AccessOutcome,
    Block,
    ChannelConfig,
    DataAccessDetails,
    Endorsement,
    MemberInfo,
    RecertificationDetails,
    RecertificationInfo,
    TransactionKind,
    TransactionRecord,
)
from idchain.ledger.storage import (
    FileLedgerStore,
    LedgerStore,
    MemoryLedgerStore,
    dumps,
    load,
    loads,
    persist,
)
