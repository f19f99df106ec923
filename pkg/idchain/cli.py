import logging
import os
import shutil

import click

from idchain.core.config import settings
from idchain.exceptions import IdChainError, KeyFormatError, ScenarioError
from idchain.hdkeys import ExtendedPublicKey
from idchain.ledger import load
from idchain.scenario import (
    EXIT_EXPECTATION,
    EXIT_OK,
    EXIT_PARSE,
    audit_report_from_dir,
    run_scenario,
)

SCENARIO_TEMPLATE_DIR = os.path.join(
    os.path.dirname(__file__), "templates", "scenarios"
)


@click.group()
@click.option("--debug", is_flag=True, help="Debug mode")
@click.pass_context
def cli(ctx, debug):
    ctx.ensure_object(dict)
    ctx.obj["debug"] = debug
    if debug:
        logging.basicConfig(level=logging.DEBUG)
        logging.getLogger().setLevel(logging.DEBUG)


@cli.command(help="Run a scenario file")
@click.argument(
    "scenario", type=click.Path(file_okay=True, dir_okay=False, resolve_path=True)
)
@click.option(
    "--out",
    "output_dir",
    default=None,
    help=f"Output directory [default: {settings.OUTPUT_DIR}]",
    type=click.Path(file_okay=False, dir_okay=True, writable=True, resolve_path=True),
)
@click.option("--seed", type=int, default=None, help="Override the scenario seed")
@click.option(
    "--mode",
    type=click.Choice(["additive", "multiplicative"]),
    default=None,
    help="Override the key derivation mode",
)
@click.option(
    "--literal-login",
    "--paper-literal-login",
    "literal_login",
    is_flag=True,
    help="Stage-3 login presents the bare public key instead of signing a challenge",
)
@click.pass_context
def run(ctx, scenario, output_dir, seed, mode, literal_login):
    if ctx.obj["debug"]:
        click.echo(f"Debug mode: {ctx.obj['debug']}")

    click.secho(f"Running scenario: {scenario}", fg="blue")
    # An absent flag keeps the scenario's own setting
    result = run_scenario(scenario, output_dir, seed, mode, literal_login or None)

    if result.exit_code == EXIT_PARSE:
        click.secho(f"Cannot run scenario: {result.error}", err=True, fg="red")
        ctx.exit(EXIT_PARSE)
    if result.report is not None and not result.report.privacy.clean:
        for finding in result.report.privacy.findings:
            click.secho(f"Privacy scan: {finding}", err=True, fg="yellow")
    if result.exit_code == EXIT_EXPECTATION:
        click.secho(f"Scenario failed: {result.error}", err=True, fg="red")
        ctx.exit(EXIT_EXPECTATION)

    click.secho(
        f"Scenario '{result.scenario}' passed {len(result.steps)} steps "
        f"(seed {result.seed})",
        fg="green",
    )
    click.secho(f"Wrote outputs to {result.output_dir}", fg="blue")
    ctx.exit(EXIT_OK)


@cli.command(help="Verify the hash chain and endorsements of a ledger file")
@click.argument(
    "ledger_file", type=click.Path(file_okay=True, dir_okay=False, resolve_path=True)
)
@click.pass_context
def verify(ctx, ledger_file):
    try:
        ledger = load(ledger_file)
    except (IdChainError, OSError) as e:
        click.secho(f"Cannot read ledger: {e}", err=True, fg="red")
        ctx.exit(EXIT_PARSE)

    if not ledger.verify_chain():
        click.secho(
            f"Chain verification FAILED for '{ledger.config.channel_id}'",
            err=True,
            fg="red",
        )
        ctx.exit(EXIT_EXPECTATION)
    records = sum(1 for _ in ledger.records())
    click.secho(
        f"Chain '{ledger.config.channel_id}' OK: height {ledger.height}, "
        f"{records} records",
        fg="green",
    )
    ctx.exit(EXIT_OK)


@cli.command(help="List ledger records derived from an owner key")
@click.argument(
    "ledger_file", type=click.Path(file_okay=True, dir_okay=False, resolve_path=True)
)
@click.option("--key", required=True, help="Extended public key (base58 or hex)")
@click.option("--gap", type=click.IntRange(min=1), default=None, help="Gap limit")
@click.pass_context
def trace(ctx, ledger_file, key, gap):
    try:
        ledger = load(ledger_file)
    except (IdChainError, OSError) as e:
        click.secho(f"Cannot read ledger: {e}", err=True, fg="red")
        ctx.exit(EXIT_PARSE)
    try:
        try:
            parent = ExtendedPublicKey.from_base58(key)
        except KeyFormatError:
            parent = ExtendedPublicKey.from_hex(key)
    except KeyFormatError as e:
        click.secho(f"Invalid key: {e}", err=True, fg="red")
        ctx.exit(EXIT_PARSE)

    records = ledger.trace_by_parent_key(parent, gap)
    for record in records:
        click.echo(
            f"{record.timestamp}\t{record.kind.value}\t{record.data_owner_id}\t"
            f"{','.join(record.attribute_names)}\t{record.txn_pubkey.hex()}"
        )
    click.secho(f"Traced {len(records)} records", fg="green")
    ctx.exit(EXIT_OK)


@cli.command(help="Audit report for a scenario run directory")
@click.argument(
    "run_dir", type=click.Path(file_okay=False, dir_okay=True, resolve_path=True)
)
@click.option("--gap", type=click.IntRange(min=1), default=None, help="Gap limit")
@click.pass_context
def report(ctx, run_dir, gap):
    try:
        audit = audit_report_from_dir(run_dir, gap)
    except ScenarioError as e:
        click.secho(f"Cannot build report: {e}", err=True, fg="red")
        ctx.exit(EXIT_PARSE)

    for chain in audit.chains:
        if chain.ok:
            click.secho(
                f"Chain '{chain.channel_id}': OK, height {chain.height}, "
                f"{chain.records} records ({chain.data_access} data access)",
                fg="green",
            )
        else:
            click.secho(
                f"Chain '{chain.channel_id}': FAILED ({chain.error})",
                err=True,
                fg="red",
            )
    for user in audit.users:
        owners = ", ".join(f"{o}={n}" for o, n in user.per_owner.items()) or "none"
        click.echo(
            f"User '{user.user_id}': {user.records} records "
            f"({user.data_access} data access, "
            f"{user.recertification} recertification); "
            f"per owner: {owners}; brute-force match: {user.matches_brute_force}"
        )
    if audit.privacy.clean:
        click.secho(
            f"Privacy scan clean ({len(audit.privacy.blobs)} files)", fg="green"
        )
    else:
        for finding in audit.privacy.findings:
            click.secho(f"Privacy scan: {finding}", err=True, fg="red")
    ctx.exit(EXIT_OK if audit.ok else EXIT_EXPECTATION)


@cli.group(help="Bundled example scenarios")
def scenarios():
    pass


@scenarios.command(name="list", help="List bundled scenarios")
def list_scenarios():
    for file in sorted(os.listdir(SCENARIO_TEMPLATE_DIR)):
        if file.endswith(".yaml"):
            click.echo(file[: -len(".yaml")])


@scenarios.command(name="copy", help="Copy bundled scenarios to a directory")
@click.argument("names", nargs=-1)
@click.option(
    "--dir",
    "target_dir",
    default="./scenarios",
    help="Directory to copy scenarios to",
    show_default=True,
    type=click.Path(file_okay=False, dir_okay=True, writable=True, resolve_path=True),
)
@click.option("--overwrite", is_flag=True, help="Overwrite existing files")
@click.pass_context
def copy_scenarios(ctx, names, target_dir, overwrite):
    available = sorted(
        f[: -len(".yaml")]
        for f in os.listdir(SCENARIO_TEMPLATE_DIR)
        if f.endswith(".yaml")
    )
    unknown = [name for name in names if name not in available]
    if unknown:
        click.secho(f"Unknown scenarios: {', '.join(unknown)}", err=True, fg="red")
        raise click.Abort()

    if not os.path.exists(target_dir):
        os.makedirs(target_dir)
        click.secho(f"Created directory: {target_dir}", fg="blue")
    for name in names or available:
        target = os.path.join(target_dir, f"{name}.yaml")
        # if file exists, log a warning and skip
        if os.path.exists(target) and not overwrite:
            click.secho(f"File already exists: {target}", err=True, fg="yellow")
            continue
        shutil.copy(os.path.join(SCENARIO_TEMPLATE_DIR, f"{name}.yaml"), target)
        click.secho(f"Copied {name}.yaml to {target_dir}", fg="blue")
    click.secho("Finished copying scenarios", fg="green")
