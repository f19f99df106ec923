import hashlib
import logging
import random
from typing import Optional, Union

from idchain.actors.comm_server import CommunicationServer
from idchain.actors.idp import IdentityProvider, OfflineBehavior, OwnerListing
from idchain.actors.messages import RequestedClaim
from idchain.actors.owner import DataOwner
from idchain.actors.sp import ServiceProvider
from idchain.actors.user import ConsentRule, UserAgent
from idchain.exceptions import DuplicateActorError, UnknownActorError
from idchain.hdkeys import Mode, UserKeyring, master_from_seed
from idchain.ibcpre import KeyGenerationCenter
from idchain.ledger import Consortium
from idchain.netsim import FaultConfig, MessageBus, SimClock
from idchain.trust import SourceClass, SourceWeightTable, TrustParameters

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class World:
    """Every actor of one simulation, wired to one bus, clock and key center.

    All randomness is drawn from a generator seeded with `seed`, so a world
    built and driven the same way twice produces identical transcripts.
    """

    def __init__(
        self,
        seed: int = 0,
        mode: Optional[Union[Mode, str]] = None,
        faults: Optional[FaultConfig] = None,
        start_time: int = 0,
        weights: Optional[SourceWeightTable] = None,
        trust: Optional[TrustParameters] = None,
        offline_behavior: OfflineBehavior = OfflineBehavior.BLOCK,
        literal_login: bool = False,
        security_parameter: int = 128,
    ):
        self.seed = seed
        self.mode = Mode(mode) if mode is not None else None
        self.weights = weights or SourceWeightTable.default()
        self.trust = trust or TrustParameters()
        self.offline_behavior = OfflineBehavior(offline_behavior)
        self.literal_login = literal_login
        self.rng = random.Random(seed)
        self.clock = SimClock(start_time)
        self.bus = MessageBus(seed=seed, faults=faults, clock=self.clock)
        self.bus.deny_link("idp", "owner")
        self.kgc = KeyGenerationCenter(security_parameter, rng=self.randbytes)
        self.consortia: dict[str, Consortium] = {}
        self.comm_servers: dict[str, CommunicationServer] = {}
        self.owners: dict[str, DataOwner] = {}
        self.idps: dict[str, IdentityProvider] = {}
        self.sps: dict[str, ServiceProvider] = {}
        self.users: dict[str, UserAgent] = {}
        self._flow_counter = 0

    def __repr__(self) -> str:
        return (
            f"<World(seed={self.seed}, owners={sorted(self.owners)}, "
            f"idps={sorted(self.idps)}, sps={sorted(self.sps)}, "
            f"users={sorted(self.users)})>"
        )

    def randbytes(self, n: int) -> bytes:
        return self.rng.randbytes(n)

    def next_flow_id(self, prefix: str) -> str:
        self._flow_counter += 1
        return f"{prefix}-{self._flow_counter}"

    def _member_key(self, owner_id: str):
        seed = hashlib.sha256(f"{self.seed}:{owner_id}".encode("utf-8")).digest()
        return master_from_seed(seed, self.mode)

    def add_consortium(
        self,
        channel_id: str,
        owners: dict[str, SourceClass],
        quorum: int,
        comm_server_id: Optional[str] = None,
    ) -> Consortium:
        if channel_id in self.consortia:
            raise DuplicateActorError(f"Consortium '{channel_id}' already exists")
        comm_server_id = comm_server_id or f"{channel_id}-comm"
        member_keys = {owner_id: self._member_key(owner_id) for owner_id in owners}
        consortium = Consortium(
            channel_id, member_keys, quorum, comm_server_id, self.clock.now
        )
        comm = CommunicationServer(comm_server_id, set(owners))
        self.bus.register_actor(comm_server_id, comm, comm.role)
        for owner_id, source_class in sorted(owners.items()):
            owner = DataOwner(
                owner_id,
                source_class,
                self.kgc.register(owner_id),
                member_keys[owner_id],
            )
            owner.join(consortium)
            self.bus.register_actor(owner_id, owner, owner.role)
            self.owners[owner_id] = owner
        for idp_id, idp in self.idps.items():
            comm.allow_idp(idp_id)
            self._list_owners(idp, owners, comm_server_id)
        self.consortia[channel_id] = consortium
        self.comm_servers[comm_server_id] = comm
        logger.info(f"Created consortium '{channel_id}' with {len(owners)} members")
        return consortium

    def _list_owners(
        self, idp: IdentityProvider, owners: dict[str, SourceClass], comm_server_id: str
    ) -> None:
        for owner_id, source_class in owners.items():
            idp.list_owner(
                OwnerListing(
                    owner_id=owner_id,
                    source_class=source_class,
                    comm_server_id=comm_server_id,
                )
            )

    def add_idp(self, idp_id: str) -> IdentityProvider:
        idp = IdentityProvider(
            idp_id,
            self.kgc.register(idp_id),
            self.weights,
            self.trust,
            rng=self.randbytes,
            literal_login=self.literal_login,
        )
        self.bus.register_actor(idp_id, idp, idp.role)
        for comm_server_id, comm in self.comm_servers.items():
            comm.allow_idp(idp_id)
            self._list_owners(
                idp,
                {
                    owner_id: self.owners[owner_id].source_class
                    for owner_id in comm.members
                },
                comm_server_id,
            )
        self.idps[idp_id] = idp
        return idp

    def add_sp(self, sp_id: str, claims: list[RequestedClaim]) -> ServiceProvider:
        sp = ServiceProvider(sp_id, claims)
        self.bus.register_actor(sp_id, sp, sp.role)
        self.sps[sp_id] = sp
        return sp

    def add_user(
        self,
        user_id: str,
        seed: bytes,
        consent: Optional[dict[str, ConsentRule]] = None,
    ) -> UserAgent:
        user = UserAgent(
            user_id,
            UserKeyring.from_seed(seed, self.mode),
            self.kgc.register(user_id),
            params=lambda: self.kgc.params,
            rng=self.randbytes,
        )
        for sp_id, rule in (consent or {}).items():
            user.set_consent(sp_id, rule)
        self.bus.register_actor(user_id, user, user.role)
        self.users[user_id] = user
        return user

    def consortium_of(self, owner_id: str) -> Consortium:
        try:
            return self.owners[owner_id].consortium
        except KeyError:
            raise UnknownActorError(f"Unknown data owner '{owner_id}'") from None

    def set_online(self, actor_id: str, online: bool) -> None:
        """Take an actor off the network; an offline owner also stops endorsing."""
        self.bus.set_online(actor_id, online)
        if actor_id in self.owners:
            consortium = self.consortium_of(actor_id)
            consortium.set_online(actor_id, online)
            if online:
                consortium.commit(self.clock.now)
        logger.info(f"'{actor_id}' is {'online' if online else 'offline'}")

    def advance_clock(self, seconds: int) -> int:
        return self.clock.advance(seconds)
