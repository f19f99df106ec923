import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Optional, Union

import yaml
from pydantic import BaseModel

from idchain.actors import (
    FlowResult,
    World,
    idp_login,
    idp_signup,
    recertify,
    register_user_with_data_owner,
    sp_login_flow,
    store_encrypted_identity,
)
from idchain.core.config import settings
from idchain.exceptions import (
    ExpectationError,
    IdChainError,
    PasswordPolicyError,
    ScenarioError,
    ScenarioParseError,
    UnverifiedEnvelopeError,
    UsernameTakenError,
)
from idchain.hdkeys import ExtendedPublicKey, Mode
from idchain.hdkeys.curve import scalar_to_bytes
from idchain.ledger import FileLedgerStore, TransactionRecord, dumps
from idchain.scenario.report import AuditReport, audit_report
from idchain.scenario.schema import (
    AdvanceClockStep,
    LoginStep,
    RecertifyStep,
    RegisterStep,
    ScenarioFile,
    SetOnlineStep,
    SignupStep,
    SpLoginStep,
    StoreIdentityStep,
    TraceStep,
    VerifyChainStep,
    parse_scenario,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

EXIT_OK = 0
EXIT_EXPECTATION = 1
EXIT_PARSE = 2


class StepOutcome(BaseModel):
    index: int
    kind: str
    detail: dict[str, Any] = {}


class RunResult(BaseModel):
    scenario: str
    seed: int
    mode: Optional[str] = None
    literal_login: bool = False
    exit_code: int
    failed_step: Optional[int] = None
    error: Optional[str] = None
    steps: list[StepOutcome] = []
    output_dir: Optional[Path] = None
    report: Optional[AuditReport] = None

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


def _expect(condition: bool, message: str, index: int) -> None:
    if not condition:
        raise ExpectationError(message, index)


def _json_bytes(data: Any) -> bytes:
    return (json.dumps(data, indent=2, sort_keys=True) + "\n").encode("utf-8")


class ScenarioRunner:
    """Builds the world a scenario declares and executes its steps in order.

    `seed`, `mode` and `literal_login` override the scenario's own values.
    Steps are numbered from 1 in errors and outputs.
    """

    def __init__(
        self,
        scenario: ScenarioFile,
        seed: Optional[int] = None,
        mode: Optional[Union[Mode, str]] = None,
        literal_login: Optional[bool] = None,
        source_text: Optional[str] = None,
    ):
        self.scenario = scenario
        self.source_text = source_text
        self.seed = seed if seed is not None else scenario.seed
        self.mode = Mode(mode) if mode is not None else scenario.mode
        self.literal_login = (
            literal_login
            if literal_login is not None
            else scenario.literal_login
        )
        self.world = self._build_world()
        self.flows: dict[str, FlowResult] = {}
        self.outcomes: list[StepOutcome] = []
        self.failed_step: Optional[int] = None
        self.error: Optional[str] = None

    def __repr__(self) -> str:
        return (
            f"<ScenarioRunner(scenario={self.scenario.name}, seed={self.seed}, "
            f"steps={len(self.scenario.steps)})>"
        )

    def _build_world(self) -> World:
        scenario = self.scenario
        faults = scenario.faults.model_copy(deep=True)
        offline = sorted(faults.offline_actors)
        faults.offline_actors = set()
        world = World(
            seed=self.seed,
            mode=self.mode,
            faults=faults,
            start_time=scenario.start_time,
            weights=scenario.weight_table,
            trust=scenario.trust,
            offline_behavior=scenario.offline_behavior,
            literal_login=self.literal_login,
        )
        for spec in scenario.consortia:
            world.add_consortium(
                spec.channel_id, spec.owners, spec.quorum, spec.comm_server_id
            )
        for idp_id in scenario.idps:
            world.add_idp(idp_id)
        for spec in scenario.sps:
            world.add_sp(spec.sp_id, spec.claims)
        for spec in scenario.users:
            world.add_user(spec.user_id, spec.seed_bytes, spec.consent)
        for actor_id in offline:
            world.set_online(actor_id, False)
        return world

    # Execution

    def run(self) -> int:
        """Execute every step; returns the exit code."""
        logger.info(
            f"Running scenario '{self.scenario.name}' with seed {self.seed} "
            f"({len(self.scenario.steps)} steps)"
        )
        for index, step in enumerate(self.scenario.steps, start=1):
            handler = getattr(self, f"_run_{step.kind}")
            try:
                detail = handler(index, step.params)
            except ExpectationError as e:
                return self._fail(index, e)
            except IdChainError as e:
                return self._fail(
                    index, ExpectationError(f"{type(e).__name__}: {e}", index)
                )
            self.outcomes.append(
                StepOutcome(index=index, kind=step.kind, detail=detail or {})
            )
            logger.debug(f"Step {index} ({step.kind}) passed")
        logger.info(f"Scenario '{self.scenario.name}' passed")
        return EXIT_OK

    def _fail(self, index: int, error: ExpectationError) -> int:
        self.failed_step = index
        self.error = str(error)
        logger.warning(f"Scenario '{self.scenario.name}' failed: {self.error}")
        return EXIT_EXPECTATION

    def _run_register(self, index: int, step: RegisterStep) -> dict:
        register_user_with_data_owner(
            self.world, step.user, step.owner, step.attributes
        )
        return {"user": step.user, "owner": step.owner}

    def _run_signup(self, index: int, step: SignupStep) -> dict:
        error = None
        try:
            username = step.username or step.user
            idp_signup(self.world, step.user, step.idp, username, step.password)
        except UsernameTakenError:
            error = "username_taken"
        except PasswordPolicyError:
            error = "password_policy"
        success = error is None
        _expect(
            success == step.expect.success,
            f"signup of '{step.user}' at '{step.idp}' "
            f"{'succeeded' if success else f'failed ({error})'}",
            index,
        )
        if step.expect.error is not None:
            _expect(
                error == step.expect.error,
                f"expected signup error {step.expect.error}, got {error}",
                index,
            )
        return {"success": success, "error": error}

    def _run_login(self, index: int, step: LoginStep) -> dict:
        result = idp_login(
            self.world,
            step.user,
            step.idp,
            password=step.password,
            totp_code=step.totp_code,
            login_index=step.login_index,
            username=step.username,
        )
        expect = step.expect
        outcome = (
            "succeeded"
            if result.success
            else f"failed at stage {result.failed_stage}: {result.detail}"
        )
        if expect.success is not None:
            _expect(
                result.success == expect.success,
                f"login of '{step.user}' {outcome}",
                index,
            )
        if expect.failed_stage is not None:
            _expect(
                result.failed_stage == expect.failed_stage,
                f"expected login to fail at stage {expect.failed_stage}, "
                f"got {result.failed_stage}",
                index,
            )
        return result.model_dump(mode="json", exclude={"session"})

    def _run_sp_login(self, index: int, step: SpLoginStep) -> dict:
        result = sp_login_flow(
            self.world,
            step.user,
            step.sp,
            step.idp,
            owners=step.owners,
            stored=step.stored,
            offline_behavior=step.offline_behavior,
        )
        if step.label is not None:
            self.flows[step.label] = result
        self._check_flow(index, step, result)
        return {
            "flow_id": result.flow_id,
            "granted": result.granted,
            "aborted": result.aborted,
            "owners_contacted": result.owners_contacted,
            "outcomes": result.outcomes,
            "scores": {a.attribute_name: a.score.value for a in result.assertions},
            "ledger_records": result.ledger_records,
        }

    def _check_flow(self, index: int, step: SpLoginStep, result: FlowResult) -> None:
        expect = step.expect
        if expect.granted is not None:
            _expect(
                result.granted == expect.granted,
                f"flow {result.flow_id} was "
                f"{'granted' if result.granted else 'denied'}"
                + (f" ({result.aborted})" if result.aborted else ""),
                index,
            )
        if expect.aborted is not None:
            _expect(
                (result.aborted is not None) == expect.aborted,
                f"flow {result.flow_id} aborted: {result.aborted}",
                index,
            )
        for attribute, wanted in expect.scores.items():
            score = result.score(attribute)
            _expect(
                score is not None and abs(score - wanted) <= expect.tolerance,
                f"score of '{attribute}' is {score}, expected {wanted}",
                index,
            )
        for ratio in expect.score_ratio:
            score = result.score(ratio.attribute)
            other = self.flows[ratio.flow].score(ratio.attribute)
            _expect(
                score is not None
                and other is not None
                and abs(score - ratio.ratio * other) <= expect.tolerance,
                f"score of '{ratio.attribute}' is {score}, expected {ratio.ratio} "
                f"times {other} from flow '{ratio.flow}'",
                index,
            )
        if expect.ledger_records is not None:
            _expect(
                result.ledger_records == expect.ledger_records,
                f"flow wrote {result.ledger_records} ledger records, "
                f"expected {expect.ledger_records}",
                index,
            )
        if expect.steps is not None:
            steps = self.world.bus.transcript.steps(result.flow_id)
            _expect(
                steps == expect.steps,
                f"flow steps {steps}, expected {expect.steps}",
                index,
            )
        for owner_id, outcome in expect.outcomes.items():
            _expect(
                result.outcomes.get(owner_id) == outcome,
                f"outcome at '{owner_id}' is {result.outcomes.get(owner_id)}, "
                f"expected {outcome}",
                index,
            )
        for claim, wanted in expect.recommendations.items():
            got = [list(r.owner_ids) for r in result.recommendations.get(claim, [])]
            _expect(
                got == wanted,
                f"recommendations for '{claim}' are {got}, expected {wanted}",
                index,
            )

    def _run_store_identity(self, index: int, step: StoreIdentityStep) -> dict:
        flow = self.flows[step.flow]
        handle, error = None, None
        try:
            handle = store_encrypted_identity(
                self.world, step.user, flow.flow_id, step.owner
            )
        except UnverifiedEnvelopeError as e:
            error = str(e)
        _expect(
            (handle is not None) == step.expect.success,
            f"store of '{step.owner}' envelope from {flow.flow_id} "
            + (f"returned {handle}" if handle else f"was refused: {error}"),
            index,
        )
        return {"handle": handle, "error": error}

    def _run_advance_clock(self, index: int, step: AdvanceClockStep) -> dict:
        return {"now": self.world.advance_clock(step.seconds)}

    def _run_recertify(self, index: int, step: RecertifyStep) -> dict:
        recertify(self.world, step.user, step.owner, step.attribute, step.value)
        return {"owner": step.owner, "attribute": step.attribute}

    def _run_set_online(self, index: int, step: SetOnlineStep) -> dict:
        self.world.set_online(step.actor, step.online)
        return {"actor": step.actor, "online": step.online}

    def _run_verify_chain(self, index: int, step: VerifyChainStep) -> dict:
        ledger = self.world.consortia[step.channel].ledger
        ok = ledger.verify_chain()
        _expect(
            ok == step.expect.ok,
            f"chain '{step.channel}' verification {'passed' if ok else 'failed'}",
            index,
        )
        return {"channel": step.channel, "ok": ok, "height": ledger.height}

    def _owner_xpub(self, index: int, user_id: str, owner_id: str) -> ExtendedPublicKey:
        user = self.world.users[user_id]
        if owner_id not in user.owner_indices:
            raise ExpectationError(
                f"'{user_id}' never registered with '{owner_id}'", index
            )
        return user.keyring.owner_xpub(user.owner_indices[owner_id])

    def _run_trace(self, index: int, step: TraceStep) -> dict:
        user = self.world.users[step.user]
        traced: list[TransactionRecord] = []
        scanned: list[TransactionRecord] = []
        if step.owner is not None:
            owner_key = self._owner_xpub(index, step.user, step.owner)
            ledger = self.world.consortium_of(step.owner).ledger
            traced = ledger.trace_by_parent_key(owner_key, step.gap)
            bound = sum(1 for _ in ledger.records()) + 1
            scanned = ledger.brute_force_scan(owner_key, bound)
            strays = [r for r in traced if r.data_owner_id != step.owner]
            _expect(
                not strays,
                f"trace of '{step.owner}' returned {len(strays)} foreign records",
                index,
            )
        else:
            for consortium in self.world.consortia.values():
                ledger = consortium.ledger
                bound = sum(1 for _ in ledger.records()) + 1
                traced.extend(
                    ledger.trace_by_parent_key(user.keyring.data_access_root, step.gap)
                )
                for owner_id in user.owner_indices:
                    owner_key = self._owner_xpub(index, step.user, owner_id)
                    scanned.extend(ledger.brute_force_scan(owner_key, bound))

        matches = sorted(r.txn_pubkey for r in traced) == sorted(
            r.txn_pubkey for r in scanned
        )
        per_owner: dict[str, int] = {}
        for record in traced:
            per_owner[record.data_owner_id] = per_owner.get(record.data_owner_id, 0) + 1
        data_access = sum(1 for r in traced if r.data_access is not None)

        expect = step.expect
        _expect(
            matches == expect.matches_brute_force,
            f"trace found {len(traced)} records, brute-force scan {len(scanned)}",
            index,
        )
        if expect.records is not None:
            _expect(
                len(traced) == expect.records,
                f"trace found {len(traced)} records, expected {expect.records}",
                index,
            )
        if expect.data_access is not None:
            _expect(
                data_access == expect.data_access,
                f"trace found {data_access} data access records, "
                f"expected {expect.data_access}",
                index,
            )
        for owner_id, count in expect.owners.items():
            _expect(
                per_owner.get(owner_id, 0) == count,
                f"trace found {per_owner.get(owner_id, 0)} records at '{owner_id}', "
                f"expected {count}",
                index,
            )
        return {
            "records": len(traced),
            "data_access": data_access,
            "per_owner": dict(sorted(per_owner.items())),
            "matches_brute_force": matches,
        }

    # Outputs

    def user_keys(self) -> dict[str, dict[str, ExtendedPublicKey]]:
        return {
            user_id: {
                owner_id: user.keyring.owner_xpub(owner_index)
                for owner_id, owner_index in sorted(user.owner_indices.items())
            }
            for user_id, user in sorted(self.world.users.items())
        }

    def private_scalars(self) -> list[bytes]:
        """Every user private scalar the run touched."""
        scalars = []
        for user in self.world.users.values():
            keyring = user.keyring
            keys = [keyring.data_access_root, keyring.data_authorization_root]
            keys += [keyring.owner_key(i) for i in user.owner_indices.values()]
            keys += [keyring.idp_key(i) for i in user.idp_indices.values()]
            scalars.extend(scalar_to_bytes(key.scalar) for key in keys)
        return scalars

    def state_blobs(self) -> dict[str, bytes]:
        world = self.world
        actors = {
            **world.users,
            **world.owners,
            **world.comm_servers,
            **world.idps,
            **world.sps,
        }
        return {
            actor_id: _json_bytes(actor.export_state())
            for actor_id, actor in sorted(actors.items())
        }

    def pending_digests(self) -> list[str]:
        return sorted(
            hashlib.sha256(record.txn_pubkey).hexdigest()
            for consortium in self.world.consortia.values()
            for record in consortium.ledger.pending
        )

    def report(self) -> AuditReport:
        world = self.world
        return audit_report(
            world.bus.transcript,
            {cid: dumps(c.ledger) for cid, c in sorted(world.consortia.items())},
            self.user_keys(),
            value_terms=[v.encode("utf-8") for v in self.scenario.attribute_values()],
            key_terms=self.private_scalars(),
            state_blobs=self.state_blobs(),
            owner_state=list(world.owners),
            pending_digests=self.pending_digests(),
        )

    def result(self, exit_code: int, output_dir: Optional[Path] = None) -> RunResult:
        return RunResult(
            scenario=self.scenario.name,
            seed=self.seed,
            mode=self.mode.value if self.mode is not None else None,
            literal_login=self.literal_login,
            exit_code=exit_code,
            failed_step=self.failed_step,
            error=self.error,
            steps=self.outcomes,
            output_dir=output_dir,
            report=self.report(),
        )

    def write(self, output_dir: Union[str, Path], result: RunResult) -> Path:
        """Write transcript, ledgers, actor state and the audit report."""
        root = Path(output_dir)
        root.mkdir(parents=True, exist_ok=True)
        world = self.world

        world.bus.transcript.write(root / "transcript.jsonl")
        store = FileLedgerStore(root / "ledger")
        for _, consortium in sorted(world.consortia.items()):
            store.save(consortium.ledger)

        state_dir = root / "state"
        state_dir.mkdir(exist_ok=True)
        for actor_id, blob in self.state_blobs().items():
            (state_dir / f"{actor_id}.json").write_bytes(blob)

        users = {
            user_id: {owner_id: key.to_base58() for owner_id, key in keys.items()}
            for user_id, keys in self.user_keys().items()
        }
        (root / "users.json").write_bytes(_json_bytes(users))
        (root / "run.json").write_bytes(
            _json_bytes(
                {
                    "scenario": result.scenario,
                    "seed": result.seed,
                    "mode": result.mode,
                    "literal_login": result.literal_login,
                    "exit_code": result.exit_code,
                    "failed_step": result.failed_step,
                    "error": result.error,
                    "owners": sorted(world.owners),
                    "attribute_values": self.scenario.attribute_values(),
                    "pending_records": self.pending_digests(),
                }
            )
        )
        (root / "steps.json").write_bytes(
            _json_bytes([outcome.model_dump(mode="json") for outcome in result.steps])
        )
        source = self.source_text or yaml.safe_dump(
            self.scenario.model_dump(mode="json", exclude_defaults=True),
            sort_keys=False,
        )
        (root / "scenario.yaml").write_text(source, encoding="utf-8")
        if result.report is not None:
            (root / "report.json").write_bytes(_json_bytes(result.report.summary()))
        logger.info(f"Wrote run outputs to {root}")
        return root


def run_scenario(
    path: Union[str, Path],
    output_dir: Union[str, Path, None] = None,
    seed: Optional[int] = None,
    mode: Optional[Union[Mode, str]] = None,
    literal_login: Optional[bool] = None,
) -> RunResult:
    """Load, execute and persist one scenario.

    Exit codes: 0 when every expectation holds, 1 on the first failed step, 2
    when the scenario cannot be read or parsed or the outputs cannot be written.
    Nothing is written for a scenario that does not parse.
    """
    try:
        source_text = Path(path).read_text(encoding="utf-8")
        scenario = parse_scenario(source_text)
    except (ScenarioParseError, OSError, UnicodeDecodeError) as e:
        logger.error(f"Cannot load scenario {path}: {e}")
        return RunResult(
            scenario=str(path),
            seed=seed or 0,
            exit_code=EXIT_PARSE,
            error=str(e),
        )

    runner = ScenarioRunner(scenario, seed, mode, literal_login, source_text)
    exit_code = runner.run()
    root = Path(output_dir or settings.OUTPUT_DIR)
    try:
        result = runner.result(exit_code, root)
    except ScenarioError as e:
        logger.error(f"Audit failed: {e}")
        return RunResult(
            scenario=scenario.name,
            seed=runner.seed,
            exit_code=EXIT_EXPECTATION,
            error=str(e),
        )
    try:
        runner.write(root, result)
    except OSError as e:
        logger.error(f"Cannot write outputs to {root}: {e}")
        return result.model_copy(update={"exit_code": EXIT_PARSE, "error": str(e)})
    return result
