"""Declarative scenario files.

A scenario is a YAML document pinned to a schema version. It declares the
actors of one world and an ordered list of steps, each a single-key mapping
from the step kind to its parameters, optionally with an `expect` block:

    version: 1
    name: happy_path
    seed: 42
    consortia:
      - {channel_id: gov, quorum: 1, owners: {dmv: government}}
    idps: [idp]
    sps:
      - {sp_id: shop, claims: [{name: name, threshold: 0.9}]}
    users:
      - user_id: alice
        seed: 616c696365000000000000000000000000000000000000000000000000000000
        consent: {shop: {attributes: [name], owners: [dmv]}}
    steps:
      - register: {user: alice, owner: dmv, attributes: {name: Alice}}
      - signup: {user: alice, idp: idp, password: correct horse}
      - login: {user: alice, idp: idp, expect: {success: true}}
      - sp_login: {user: alice, sp: shop, idp: idp, expect: {granted: true}}
"""

from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from pydantic import model_validator

from idchain.actors import ConsentRule, OfflineBehavior, RequestedClaim
from idchain.core.config import settings
from idchain.exceptions import ScenarioParseError
from idchain.hdkeys import Mode
from idchain.netsim import FaultConfig
from idchain.trust import SourceClass, SourceWeightTable, TrustParameters


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# Actors


class ConsortiumSpec(_Strict):
    channel_id: str
    quorum: int = Field(default=1, ge=1)
    owners: dict[str, SourceClass]
    comm_server_id: Optional[str] = None


class ServiceProviderSpec(_Strict):
    sp_id: str
    claims: list[RequestedClaim]


class UserSpec(_Strict):
    user_id: str
    seed: str
    consent: dict[str, ConsentRule] = {}

    @field_validator("seed")
    @classmethod
    def check_seed(cls, value: str) -> str:
        try:
            seed = bytes.fromhex(value)
        except ValueError:
            raise ValueError("seed must be hex") from None
        if not 16 <= len(seed) <= 64:
            raise ValueError(f"seed must be 16 to 64 bytes, got {len(seed)}")
        return value.lower()

    @property
    def seed_bytes(self) -> bytes:
        return bytes.fromhex(self.seed)


# Expectations


class SignupExpect(_Strict):
    success: bool = True
    error: Optional[Literal["username_taken", "password_policy"]] = None


class LoginExpect(_Strict):
    success: Optional[bool] = None
    failed_stage: Optional[int] = Field(default=None, ge=1, le=3)


class ScoreRatio(_Strict):
    """This flow's score for `attribute` equals `ratio` times the labelled flow's."""

    flow: str
    attribute: str
    ratio: float = Field(gt=0)


class FlowExpect(_Strict):
    granted: Optional[bool] = None
    aborted: Optional[bool] = None
    scores: dict[str, float] = {}
    tolerance: float = Field(default=1e-9, ge=0)
    score_ratio: list[ScoreRatio] = []
    ledger_records: Optional[int] = Field(default=None, ge=0)
    steps: Optional[list[int]] = None
    outcomes: dict[str, Literal["verified", "mismatch", "failed"]] = {}
    recommendations: dict[str, list[list[str]]] = {}


class StoreExpect(_Strict):
    success: bool = True


class TraceExpect(_Strict):
    records: Optional[int] = Field(default=None, ge=0)
    data_access: Optional[int] = Field(default=None, ge=0)
    owners: dict[str, int] = {}
    matches_brute_force: bool = True


class VerifyExpect(_Strict):
    ok: bool = True


# Steps


class RegisterStep(_Strict):
    user: str
    owner: str
    attributes: dict[str, str]


class SignupStep(_Strict):
    user: str
    idp: str
    username: Optional[str] = None
    password: str
    expect: SignupExpect = SignupExpect()


class LoginStep(_Strict):
    user: str
    idp: str
    username: Optional[str] = None
    password: Optional[str] = None
    totp_code: Optional[str] = None
    login_index: Optional[int] = Field(default=None, ge=0)
    expect: LoginExpect = LoginExpect()


class SpLoginStep(_Strict):
    user: str
    sp: str
    idp: str
    label: Optional[str] = None
    owners: Optional[list[str]] = None
    stored: bool = False
    offline_behavior: Optional[OfflineBehavior] = None
    expect: FlowExpect = FlowExpect()


class StoreIdentityStep(_Strict):
    user: str
    flow: str
    owner: str
    expect: StoreExpect = StoreExpect()


class AdvanceClockStep(_Strict):
    seconds: int = Field(ge=0)


class RecertifyStep(_Strict):
    user: str
    owner: str
    attribute: str
    value: Optional[str] = None


class TraceStep(_Strict):
    user: str
    owner: Optional[str] = None
    gap: Optional[int] = Field(default=None, ge=1)
    expect: TraceExpect = TraceExpect()


class VerifyChainStep(_Strict):
    channel: str
    expect: VerifyExpect = VerifyExpect()


class SetOnlineStep(_Strict):
    actor: str
    online: bool


StepParams = Union[
    RegisterStep,
    SignupStep,
    LoginStep,
    SpLoginStep,
    StoreIdentityStep,
    AdvanceClockStep,
    RecertifyStep,
    TraceStep,
    VerifyChainStep,
    SetOnlineStep,
]

STEP_KINDS = (
    "register",
    "signup",
    "login",
    "sp_login",
    "store_identity",
    "advance_clock",
    "recertify",
    "trace",
    "verify_chain",
    "set_online",
)


class ScenarioStep(_Strict):
    """Exactly one of the fields is set."""

    register: Optional[RegisterStep] = None
    signup: Optional[SignupStep] = None
    login: Optional[LoginStep] = None
    sp_login: Optional[SpLoginStep] = None
    store_identity: Optional[StoreIdentityStep] = None
    advance_clock: Optional[AdvanceClockStep] = None
    recertify: Optional[RecertifyStep] = None
    trace: Optional[TraceStep] = None
    verify_chain: Optional[VerifyChainStep] = None
    set_online: Optional[SetOnlineStep] = None

    @model_validator(mode="after")
    def check_single_kind(self) -> "ScenarioStep":
        kinds = [kind for kind in STEP_KINDS if getattr(self, kind) is not None]
        if len(kinds) != 1:
            raise ValueError(
                f"each step needs exactly one of {', '.join(STEP_KINDS)}"
            )
        return self

    @property
    def kind(self) -> str:
        return next(kind for kind in STEP_KINDS if getattr(self, kind) is not None)

    @property
    def params(self) -> StepParams:
        return getattr(self, self.kind)


class ScenarioFile(_Strict):
    version: int
    name: str
    description: str = ""
    seed: int = 0
    start_time: int = Field(default=1_700_000_000, ge=0)
    mode: Optional[Mode] = None
    offline_behavior: OfflineBehavior = OfflineBehavior.BLOCK
    literal_login: bool = False
    trust: Optional[TrustParameters] = None
    weights: Optional[dict[SourceClass, float]] = None
    consortia: list[ConsortiumSpec] = []
    idps: list[str] = []
    sps: list[ServiceProviderSpec] = []
    users: list[UserSpec] = []
    faults: FaultConfig = FaultConfig()
    steps: list[ScenarioStep]

    @field_validator("version")
    @classmethod
    def check_version(cls, value: int) -> int:
        if value != settings.SCENARIO_SCHEMA_VERSION:
            raise ValueError(
                f"unsupported scenario version {value}, "
                f"expected {settings.SCENARIO_SCHEMA_VERSION}"
            )
        return value

    @property
    def weight_table(self) -> Optional[SourceWeightTable]:
        if self.weights is None:
            return None
        return SourceWeightTable(weights=self.weights)

    def owner_ids(self) -> set[str]:
        return {owner for c in self.consortia for owner in c.owners}

    def attribute_values(self) -> list[str]:
        """Every attribute value the scenario hands to a data owner."""
        values = []
        for step in self.steps:
            if step.register is not None:
                values.extend(step.register.attributes.values())
            elif step.recertify is not None and step.recertify.value is not None:
                values.append(step.recertify.value)
        return sorted(set(values))


# Loading


def _line_for(node: Optional[yaml.Node], loc: tuple) -> Optional[int]:
    """1-based line of the deepest YAML node along a validation error location."""
    if node is None:
        return None
    line = node.start_mark.line + 1
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            child = next(
                (value for key, value in node.value if key.value == str(part)), None
            )
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int):
            child = node.value[part] if part < len(node.value) else None
        else:
            child = None
        if child is None:
            break
        node = child
        line = node.start_mark.line + 1
    return line


def _check_references(scenario: ScenarioFile, root: yaml.Node) -> None:
    users = {u.user_id for u in scenario.users}
    owners = scenario.owner_ids()
    idps = set(scenario.idps)
    sps = {s.sp_id for s in scenario.sps}
    channels = {c.channel_id for c in scenario.consortia}
    comm_servers = {
        c.comm_server_id or f"{c.channel_id}-comm" for c in scenario.consortia
    }
    actors = users | owners | idps | sps | comm_servers
    labels: set[str] = set()

    declared = list(users) + list(owners) + list(idps) + list(sps)
    if len(declared) != len(set(declared)):
        raise ScenarioParseError("actor ids must be unique", _line_for(root, ()))

    for index, step in enumerate(scenario.steps):
        params = step.params
        line = _line_for(root, ("steps", index))
        checks = [
            ("user", users),
            ("owner", owners),
            ("idp", idps),
            ("sp", sps),
            ("channel", channels),
            ("actor", actors),
        ]
        for field, known in checks:
            value = getattr(params, field, None)
            if value is not None and value not in known:
                raise ScenarioParseError(f"undefined {field} '{value}'", line)
        for owner in getattr(params, "owners", None) or []:
            if owner not in owners:
                raise ScenarioParseError(f"undefined owner '{owner}'", line)
        if step.sp_login is not None:
            for ratio in step.sp_login.expect.score_ratio:
                if ratio.flow not in labels:
                    raise ScenarioParseError(f"undefined flow '{ratio.flow}'", line)
            if step.sp_login.label is not None:
                if step.sp_login.label in labels:
                    raise ScenarioParseError(
                        f"duplicate flow label '{step.sp_login.label}'", line
                    )
                labels.add(step.sp_login.label)
        if step.store_identity is not None and step.store_identity.flow not in labels:
            raise ScenarioParseError(
                f"undefined flow '{step.store_identity.flow}'", line
            )


def parse_scenario(text: str) -> ScenarioFile:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ScenarioParseError(
            f"invalid YAML: {getattr(e, 'problem', None) or e}",
            mark.line + 1 if mark is not None else None,
        ) from e
    if not isinstance(data, dict):
        raise ScenarioParseError("scenario must be a mapping", 1)

    try:
        scenario = ScenarioFile.model_validate(data)
    except ValidationError as e:
        error = e.errors()[0]
        location = ".".join(str(part) for part in error["loc"])
        raise ScenarioParseError(
            f"{location}: {error['msg']}", _line_for(root, error["loc"])
        ) from e
    _check_references(scenario, root)
    return scenario


def load_scenario(path: Union[str, Path]) -> ScenarioFile:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ScenarioParseError(f"cannot read scenario {path}: {e}") from e
    return parse_scenario(text)
