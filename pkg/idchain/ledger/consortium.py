import logging
from typing import Mapping, Optional

from idchain.exceptions import LedgerError
from idchain.hdkeys import ExtendedPrivateKey
from idchain.ledger.chain import Ledger
from idchain.ledger.models import Block, ChannelConfig, MemberInfo

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class Consortium:
    """A group of data owners sharing one channel and one communication server."""

    def __init__(
        self,
        channel_id: str,
        member_keys: Mapping[str, ExtendedPrivateKey],
        quorum: int,
        comm_server_id: str,
        genesis_time: int = 0,
    ):
        config = ChannelConfig(
            channel_id=channel_id,
            members=[
                MemberInfo(member_id=member_id, public_key=key.public_bytes)
                for member_id, key in sorted(member_keys.items())
            ],
            quorum=quorum,
        )
        self.ledger = Ledger.genesis(config, genesis_time)
        self.comm_server_id = comm_server_id
        self._member_keys = dict(member_keys)
        self.online: set[str] = set(member_keys)

    def __repr__(self) -> str:
        return (
            f"<Consortium(channel_id={self.channel_id}, "
            f"members={sorted(self._member_keys)}, online={sorted(self.online)})>"
        )

    @property
    def channel_id(self) -> str:
        return self.ledger.config.channel_id

    @property
    def member_ids(self) -> list[str]:
        return sorted(self._member_keys)

    def set_online(self, member_id: str, online: bool) -> None:
        if member_id not in self._member_keys:
            raise LedgerError(f"'{member_id}' is not a member of '{self.channel_id}'")
        if online:
            self.online.add(member_id)
        else:
            self.online.discard(member_id)

    def commit(self, timestamp: int) -> Optional[Block]:
        """Commit pending records with endorsements from the online members.

        Returns None when nothing is pending or too few members are online; the
        records stay pending in that case.
        """
        if not self.ledger.pending:
            return None
        signers = {m: self._member_keys[m] for m in sorted(self.online)}
        if len(signers) < self.ledger.config.quorum:
            logger.warning(
                f"Only {len(signers)} of {self.ledger.config.quorum} endorsers online "
                f"for '{self.channel_id}'; {len(self.ledger.pending)} records wait"
            )
            return None
        return self.ledger.commit_block(signers, timestamp)
