from idchain.actors.comm_server import CommunicationServer, RouteEntry
from idchain.actors.flows import (
    FlowResult,
    LoginResult,
    idp_login,
    idp_signup,
    recertify,
    register_user_with_data_owner,
    sp_login_flow,
    store_encrypted_identity,
)
from idchain.actors.idp import (
    IdentityProvider,
    OfflineBehavior,
    OwnerListing,
    StoredDocument,
    UserProfile,
)
from idchain.actors.messages import RequestedClaim, VerificationOutcome
from idchain.actors.owner import DataOwner, IdentityDocument
from idchain.actors.sp import ServiceProvider, SpDecision
from idchain.actors.user import ConsentRule, UserAgent, verify_condition
from idchain.actors.world import World
