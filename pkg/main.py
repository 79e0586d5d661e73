"""Main program of the PRI command line.

Sub-commands:

    run <scenario.json> [--mode detect|prevent] [--report out.json] [--wire-log out.bin]
    audit --policy <rules> --corpus <file> [--csv out.csv]
    agent register --workspace <dir> --user <name> [--key-seed N]
    agent export-key --workspace <dir> --user <name> --counter N --out <file>
    viewer fetch --workspace <dir> --user <name>

Exit codes: 0 ok, 2 invariant violation, 3 scenario or input error.
"""

import argparse
import logging
import sys

from rich.console import Console
from rich.table import Table

from pri_agent import AgentError, SessionKey, UserKey, export_session_key, register_user
from pri_harness import ComponentCrash, HarnessError, RunReport, Workspace, name_id, run_scenario
from pri_logging import configure_logging
from pri_matcher import compile_policy
from pri_policy import AuditReport, PolicyError, audit_static
from pri_settings import SettingsError, load_settings
from pri_viewer import Viewer, render_matches
from rule_record import RuleError, read_rule_file

logger = logging.getLogger(__name__)

EXIT_OK: int = 0
EXIT_VIOLATION: int = 2
EXIT_INPUT: int = 3

console: Console = Console()


def print_run_report(report: RunReport) -> None:
    table: Table = Table(title=f"Scenario {report.scenario.name} ({report.mode})")
    table.add_column("Session", style="cyan")
    table.add_column("Status")
    table.add_column("Records", justify="right")
    table.add_column("Forwarded", justify="right")
    table.add_column("Matches", justify="right")
    for name, result in report.sessions.items():
        row: dict = result.to_dict()
        table.add_row(name, row["status"], str(row["records"]), str(row["forwarded"]), str(row["match_count"]))
    console.print(table)
    console.print(f"Alerts at SIM sink: {len(report.alerts)}")
    for name in report.attestation_rejected:
        console.print(f"[yellow]AttestationRejected[/yellow] for user {name}")
    for failure in report.invariant_failures:
        console.print(f"[red]Invariant violated:[/red] {failure}")
    for violation in report.violations:
        console.print(f"[red]Confidentiality violation:[/red] {violation}")


def print_audit_report(report: AuditReport) -> None:
    table: Table = Table(title="Rule audit")
    table.add_column("Rule", style="cyan", no_wrap=True)
    table.add_column("Static rate", justify="right")
    table.add_column("Dynamic rate", justify="right")
    table.add_column("Flags")
    for entry in report:
        row: dict = entry.to_dict()
        flags: list[str] = [flag for flag in ("static_abnormal", "dynamic_abnormal") if row[flag]]
        table.add_row(
            row["rule_id"],
            "-" if row["static_rate"] is None else f"{row['static_rate']:.3g}",
            "-" if row["dynamic_rate"] is None else f"{row['dynamic_rate']:.3g}",
            ", ".join(flags) or "ok",
        )
    console.print(table)


def command_run(args: argparse.Namespace) -> int:
    try:
        report: RunReport = run_scenario(args.scenario, args.mode, args.workdir, load_settings(args.settings))
    except ComponentCrash as e:
        console.print(f"[red]{e}[/red]")
        return EXIT_VIOLATION
    print_run_report(report)
    if args.report:
        report.write(args.report)
    if args.wire_log:
        report.wire_log.write(args.wire_log)
    return report.exit_code


def command_audit(args: argparse.Namespace) -> int:
    settings = load_settings(args.settings)
    rules = read_rule_file(args.policy)
    with open(args.corpus, "rb") as file:
        corpus: bytes = file.read()
    report: AuditReport = audit_static(
        compile_policy(rules), corpus, args.theta or settings.theta_static, settings.min_corpus_length
    )
    print_audit_report(report)
    if args.csv:
        report.to_csv(args.csv)
    return EXIT_OK


def command_agent_register(args: argparse.Namespace) -> int:
    workspace: Workspace = Workspace(args.workspace, load_settings(args.settings))
    user_id: bytes = name_id("user", args.user)
    user: UserKey = UserKey.generate(user_id) if args.key_seed is None else UserKey.from_seed(user_id, args.key_seed)
    server, network = workspace.start()
    with network:
        register_user(network, f"agent:{args.user}", workspace.platform().root_public, server.measurement, user)
    workspace.save_user(args.user, user)
    console.print(f"User {args.user} registered as {user_id.hex()}")
    return EXIT_OK


def command_agent_export_key(args: argparse.Namespace) -> int:
    workspace: Workspace = Workspace(args.workspace, load_settings(args.settings))
    user: UserKey = workspace.load_user(args.user)
    frame: bytes = export_session_key(user, SessionKey.generate(user.user_id), args.counter).to_frame()
    with open(args.out, "wb") as file:
        file.write(frame)
    console.print(f"Key delivery of {len(frame)} bytes written to {args.out}")
    return EXIT_OK


def command_viewer_fetch(args: argparse.Namespace) -> int:
    workspace: Workspace = Workspace(args.workspace, load_settings(args.settings))
    user: UserKey = workspace.load_user(args.user)
    _, network = workspace.start()
    with network:
        render_matches(Viewer(user, network, f"viewer:{args.user}").fetch(), console)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser: argparse.ArgumentParser = argparse.ArgumentParser(
        prog="pri", description="Privacy-preserving inspection of encrypted traffic (simulated)."
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=False, help="log debug messages")
    parser.add_argument("--settings", metavar="<file>", default=None, help="settings JSON file")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="play a scenario end to end")
    run.add_argument("scenario", metavar="<scenario.json>")
    run.add_argument("--mode", choices=["detect", "prevent"], default=None)
    run.add_argument("--report", metavar="<out.json>", default=None)
    run.add_argument("--wire-log", metavar="<out.bin>", default=None)
    run.add_argument("--workdir", metavar="<dir>", default=None, help="keep the store and SIM database here")
    run.set_defaults(handler=command_run)

    audit = commands.add_parser("audit", help="static rule-abuse audit of a rule file")
    audit.add_argument("--policy", metavar="<rules>", required=True)
    audit.add_argument("--corpus", metavar="<file>", required=True)
    audit.add_argument("--theta", type=float, default=None, help="flag threshold in matches per byte")
    audit.add_argument("--csv", metavar="<out.csv>", default=None)
    audit.set_defaults(handler=command_audit)

    agent = commands.add_parser("agent", help="client agent operations").add_subparsers(dest="action", required=True)
    register = agent.add_parser("register", help="attest the workspace enclave and register a user key")
    register.add_argument("--workspace", metavar="<dir>", required=True)
    register.add_argument("--user", metavar="<name>", required=True)
    register.add_argument("--key-seed", type=int, default=None)
    register.set_defaults(handler=command_agent_register)
    export = agent.add_parser("export-key", help="write a KeyDelivery frame for a fresh session")
    export.add_argument("--workspace", metavar="<dir>", required=True)
    export.add_argument("--user", metavar="<name>", required=True)
    export.add_argument("--counter", type=int, required=True)
    export.add_argument("--out", metavar="<file>", required=True)
    export.set_defaults(handler=command_agent_export_key)

    viewer = commands.add_parser("viewer", help="match viewer").add_subparsers(dest="action", required=True)
    fetch = viewer.add_parser("fetch", help="show a user's matched traffic")
    fetch.add_argument("--workspace", metavar="<dir>", required=True)
    fetch.add_argument("--user", metavar="<name>", required=True)
    fetch.set_defaults(handler=command_viewer_fetch)
    return parser


def main(argv: list[str] | None = None) -> int:
    args: argparse.Namespace = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except (HarnessError, AgentError, RuleError, PolicyError, SettingsError, OSError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
