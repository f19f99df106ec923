"""Protocol phases driven end to end over a world's message bus.

Each operation queues the opening messages, runs the bus until it is idle and
reads the outcome back from the actors' state. Decisions a person would take
(choosing owners, storing a document) happen between bus runs.
"""

import logging
from typing import Optional

from pydantic import BaseModel

from idchain.actors.idp import OfflineBehavior, UserProfile
from idchain.actors.owner import IdentityDocument
from idchain.actors.user import LoginPlan
from idchain.exceptions import (
    PasswordPolicyError,
    ProtocolError,
    UnverifiedEnvelopeError,
    UsernameTakenError,
)
from idchain.actors.world import World
from idchain.ledger import TransactionRecord
from idchain.trust import AttributeAssertion, SourceRecommendation

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)


class LoginResult(BaseModel):
    flow_id: str
    success: bool
    login_index: int
    failed_stage: Optional[int] = None
    detail: Optional[str] = None
    session: Optional[str] = None


class FlowResult(BaseModel):
    flow_id: str
    nonce: str
    granted: bool
    stored: bool = False
    aborted: Optional[str] = None
    owners_contacted: list[str] = []
    outcomes: dict[str, str] = {}
    assertions: list[AttributeAssertion] = []
    missing: list[str] = []
    failed_claims: list[str] = []
    ledger_records: int = 0
    recommendations: dict[str, list[SourceRecommendation]] = {}

    def score(self, attribute_name: str) -> Optional[float]:
        for assertion in self.assertions:
            if assertion.attribute_name == attribute_name:
                return assertion.score.value
        return None


def register_user_with_data_owner(
    world: World, user_id: str, owner_id: str, attributes: dict[str, str]
) -> IdentityDocument:
    """Offline registration of the user's owner key and identity document."""
    user = world.users[user_id]
    owner = world.owners[owner_id]
    owner_key = user.keyring.owner_xpub(user.owner_index(owner_id))
    document = owner.register(owner_key, attributes, world.clock.now)
    user.documents[owner_id] = dict(attributes)
    world.bus.note(
        owner_id,
        "registered",
        detail=f"{user_id} with {len(attributes)} attributes",
        payload=owner_key.to_bytes(),
    )
    return document


def idp_signup(
    world: World, user_id: str, idp_id: str, username: str, password: str
) -> UserProfile:
    user = world.users[user_id]
    idp = world.idps[idp_id]
    user.signup(idp_id, username, password, world.bus, world.next_flow_id("signup"))
    world.bus.run_until_idle()
    response = user.signups.get(idp_id)
    if response is None:
        raise ProtocolError(f"No sign-up response from '{idp_id}'")
    if response.error == "username_taken":
        raise UsernameTakenError(response.detail)
    if response.error == "password_policy":
        raise PasswordPolicyError(response.detail)
    return idp.profile(username)


def idp_login(
    world: World,
    user_id: str,
    idp_id: str,
    password: Optional[str] = None,
    totp_code: Optional[str] = None,
    login_index: Optional[int] = None,
    username: Optional[str] = None,
) -> LoginResult:
    """Password, then TOTP, then the login key at index `login_index`.

    Unset arguments default to what the user agent remembers, so a plain call is
    an honest login. Failures come back as a result naming the failed stage.
    """
    user = world.users[user_id]
    flow_id = world.next_flow_id("login")
    index = login_index if login_index is not None else user.next_login_index(idp_id)
    plan = LoginPlan(
        flow_id=flow_id,
        idp_id=idp_id,
        username=username or user.usernames.get(idp_id, user_id),
        password=password if password is not None else user.passwords.get(idp_id, ""),
        login_index=index,
        totp_code=totp_code,
        literal_key=world.literal_login,
    )
    user.start_login(plan, world.bus)
    world.bus.run_until_idle()

    stages = user.login_stages.get(flow_id, [])
    if not stages:
        return LoginResult(
            flow_id=flow_id, success=False, login_index=index, detail="no response"
        )
    last = stages[-1]
    if last.passed and last.stage == 3:
        return LoginResult(
            flow_id=flow_id, success=True, login_index=index, session=last.session
        )
    return LoginResult(
        flow_id=flow_id,
        success=False,
        login_index=index,
        failed_stage=last.stage if not last.passed else last.stage + 1,
        detail=last.detail if not last.passed else "no response",
    )


def sp_login_flow(
    world: World,
    user_id: str,
    sp_id: str,
    idp_id: str,
    owners: Optional[list[str]] = None,
    stored: bool = False,
    offline_behavior: Optional[OfflineBehavior] = None,
) -> FlowResult:
    """Run a service-provider login through the nine protocol phases.

    With `stored` the identity provider opens documents it stored earlier and no
    data owner is contacted.
    """
    user = world.users[user_id]
    sp = world.sps[sp_id]
    idp = world.idps[idp_id]
    bus = world.bus
    flow_id = world.next_flow_id("flow")
    nonce = world.randbytes(16).hex()
    behavior = OfflineBehavior(offline_behavior or world.offline_behavior)

    sp.request_claims(user_id, idp_id, nonce, flow_id, bus)
    bus.run_until_idle()

    contacted: list[str] = []
    if flow_id in user.flows:
        if stored:
            user.respond_with_stored(flow_id, bus)
            bus.run_until_idle()
        else:
            contacted = user.respond_to_claims(flow_id, bus, owners)
            bus.run_until_idle()
            for owner_id in contacted:
                world.owners[owner_id].record_access(flow_id, bus)
            if idp_flow_open(world, idp_id, flow_id):
                idp.close_verification(flow_id, bus, behavior)
            bus.run_until_idle()

    return _flow_result(world, user_id, sp_id, idp_id, flow_id, nonce, stored)


def idp_flow_open(world: World, idp_id: str, flow_id: str) -> bool:
    flow = world.idps[idp_id].flows.get(flow_id)
    return flow is not None and flow.status != "aborted"


def _flow_result(
    world: World,
    user_id: str,
    sp_id: str,
    idp_id: str,
    flow_id: str,
    nonce: str,
    stored: bool,
) -> FlowResult:
    decision = world.sps[sp_id].decisions.get(flow_id)
    idp_flow = world.idps[idp_id].flows.get(flow_id)
    user_flow = world.users[user_id].flows.get(flow_id)

    aborted = None
    if decision is not None and decision.aborted is not None:
        aborted = decision.aborted
    elif decision is None:
        aborted = "no decision"
    recommendations = {}
    if user_flow is not None and user_flow.recommendations is not None:
        recommendations = user_flow.recommendations.by_claim

    result = FlowResult(
        flow_id=flow_id,
        nonce=nonce,
        granted=decision is not None and decision.granted,
        stored=stored,
        aborted=aborted,
        owners_contacted=sorted(idp_flow.submissions) if idp_flow else [],
        outcomes=(
            {o: r.outcome.value for o, r in sorted(idp_flow.results.items())}
            if idp_flow
            else {}
        ),
        assertions=decision.assertions if decision else [],
        missing=decision.missing if decision else [],
        failed_claims=decision.failed_claims if decision else [],
        ledger_records=len(
            world.bus.transcript.filter(flow_id=flow_id, kind="ledger_record")
        ),
        recommendations=recommendations,
    )
    logger.info(
        f"Flow {flow_id} for {user_id} at {sp_id}: "
        f"{'granted' if result.granted else 'denied'}"
        + (f" ({aborted})" if aborted else "")
    )
    return result


def store_encrypted_identity(
    world: World, user_id: str, flow_id: str, owner_id: str
) -> str:
    """Ask the identity provider to keep the envelope `owner_id` verified in a flow."""
    user = world.users[user_id]
    user.request_store(flow_id, owner_id, world.bus)
    world.bus.run_until_idle()
    receipts = [
        r for r in user.flows[flow_id].store_receipts if r.owner_id == owner_id
    ]
    if not receipts:
        raise ProtocolError(f"No store receipt for '{owner_id}' in {flow_id}")
    if receipts[-1].handle is None:
        raise UnverifiedEnvelopeError(receipts[-1].error or "store refused")
    return receipts[-1].handle


def recertify(
    world: World,
    user_id: str,
    owner_id: str,
    attribute: str,
    value: Optional[str] = None,
) -> TransactionRecord:
    user = world.users[user_id]
    owner = world.owners[owner_id]
    owner_key = user.keyring.owner_xpub(user.owner_indices[owner_id])
    record = owner.recertify(owner_key, attribute, world.clock.now, value)
    if value is not None:
        user.documents.setdefault(owner_id, {})[attribute] = value
    world.bus.note(
        owner_id, "recertified", detail=attribute, payload=record.txn_pubkey
    )
    return record
