"""
Operator entry point.

    python cli.py run --suite scenarios --mode enforced
    python cli.py run --scenario scenarios/attack/otp_forward.json --mode passthrough --report out.jsonl
    python cli.py audit verify --store ~/.aura/audit/benign-set-alarm-enforced.jsonl
    python cli.py registry issue --developer acme --bundle calc --category CALCULATOR --permissions PAYMENT
    python cli.py boot --tamper-stage bootloader
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from dotenv import load_dotenv

from agent_kernel import MODE, MODES
from approval_helpers import ApprovalProvider, InteractiveApproval, ScriptedApproval
from audit import AuditError, AuditLog
from exec_control import OPTIMISTIC, WINDOW
from firewall import BLACKLIST_PATH, CLOUD_VERIFICATION, FirewallError, load_blacklist
from judge_iface import FixtureJudge, JudgeRegistry, JudgeRole
from registry import (
    AgentDid,
    AppCategory,
    CapabilityBoundary,
    DeveloperKey,
    GlobalAgentRegistry,
    RegistryError,
    SemanticPermission,
)
from simulator import SCENARIO_ROOT, STEP_BUDGET, RunSettings, ScenarioInvalid, SuiteMetrics, load_suite, run_scenario
from trusted_platform import (
    BOOT_CHAIN,
    DEFAULT_SEED,
    MEASUREMENTS_PATH,
    KernelUnavailable,
    PlatformError,
    TrustedPlatform,
    boot_platform,
    hash_bytes,
    public_key_bytes,
    signing_key_from_rng,
)

load_dotenv()

logger = logging.getLogger(__name__)

AURA_HOME = Path(os.getenv("AURA_HOME", str(Path.home() / ".aura"))).expanduser()
USER_ACCOUNT = os.getenv("AURA_USER_ACCOUNT", "owner")

EXIT_OK = 0
EXIT_EXPECTATION = 1
EXIT_KERNEL = 3


@dataclass(frozen=True)
class RunConfig:
    mode: str = MODE
    optimistic: bool = OPTIMISTIC
    window: int = WINDOW
    seed: int = DEFAULT_SEED
    approval: str = "scenario"
    blacklist_path: str = str(BLACKLIST_PATH)
    scenario_paths: tuple[str, ...] = field(default=(str(SCENARIO_ROOT),))
    cloud_verification: str = CLOUD_VERIFICATION
    step_budget: int = STEP_BUDGET
    tamper_stage: str | None = None
    measurements_path: str = str(MEASUREMENTS_PATH)
    judge_fixtures: str | None = None

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        paths = tuple(args.scenario or ()) + tuple(args.suite or ())
        return cls(
            mode=args.mode,
            optimistic=args.optimistic,
            window=args.window,
            seed=args.seed,
            approval=args.approval,
            blacklist_path=args.blacklist,
            scenario_paths=paths or (str(SCENARIO_ROOT),),
            cloud_verification=args.cloud_verification,
            step_budget=args.step_budget,
            tamper_stage=args.tamper_stage,
            measurements_path=args.measurements,
            judge_fixtures=args.judge_fixtures,
        )

    def to_json(self) -> dict[str, Any]:
        data = asdict(self)
        data["scenario_paths"] = list(self.scenario_paths)
        return data


def _add_store_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED, help="Device seed (default: AURA_SEED or 7).")


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Agent kernel device simulator")
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run scenarios against a freshly booted device")
    run.add_argument("--scenario", action="append", help="Scenario file (repeatable).")
    run.add_argument("--suite", action="append", help="Directory of scenario files (repeatable).")
    run.add_argument("--mode", choices=MODES, default=MODE, help="Kernel mode (default: %(default)s).")
    run.add_argument("--optimistic", action="store_true", default=OPTIMISTIC, help="Enable trust-token fast paths.")
    run.add_argument("--window", type=int, default=WINDOW, help="Optimistic verdict window (default: %(default)s).")
    run.add_argument(
        "--approval",
        default="scenario",
        help="scenario (each scenario's scripted decisions), scripted:<file>, or interactive.",
    )
    run.add_argument("--blacklist", default=str(BLACKLIST_PATH), help="Intent blacklist file.")
    run.add_argument(
        "--cloud-verification",
        choices=("always", "sensitive", "never"),
        default=CLOUD_VERIFICATION,
        help="When the cloud intent stage runs (default: %(default)s).",
    )
    run.add_argument("--step-budget", type=int, default=STEP_BUDGET, help="Steps before a run times out.")
    run.add_argument("--tamper-stage", choices=BOOT_CHAIN, help="Flip one byte of a boot image before booting.")
    run.add_argument("--measurements", default=str(MEASUREMENTS_PATH), help="Expected measurement table.")
    run.add_argument("--judge-fixtures", help="Replay INTENT_JUDGE and ACTION_JUDGE verdicts from a fixture file.")
    run.add_argument("--report", help="Also write one JSON report per line to this file.")
    _add_store_args(run)

    audit = sub.add_parser("audit", help="Inspect, verify, export or erase an audit store")
    audit.add_argument("action", choices=("show", "verify", "export", "erase"))
    audit.add_argument("--store", required=True, help="Audit store file (see AURA_HOME/audit).")
    audit.add_argument("--session", help="Session id (hex) for show/erase.")
    audit.add_argument("--scope", choices=("session", "agent", "all"), default="session", help="Erase scope.")
    audit.add_argument("--target", help="Agent fingerprint (hex) for --scope agent.")
    audit.add_argument("--first", type=int, default=1, help="First record to export.")
    audit.add_argument("--last", type=int, help="Last record to export (default: head).")
    _add_store_args(audit)

    registry = sub.add_parser("registry", help="Manage the registry record file")
    registry.add_argument("action", choices=("enroll", "issue", "revoke", "show"))
    registry.add_argument("--developer", help="Developer id.")
    registry.add_argument("--bundle", help="App bundle name for issue.")
    registry.add_argument("--category", help="App category for issue.")
    registry.add_argument("--permissions", default="", help="Comma-separated semantic permissions.")
    registry.add_argument("--allowlist", default="", help="Comma-separated egress hosts.")
    registry.add_argument("--serial", type=int, help="AIC serial for revoke.")
    registry.add_argument("--reason", default="revoked by operator", help="Revocation reason.")
    _add_store_args(registry)

    boot = sub.add_parser("boot", help="Boot the platform and print the measured chain")
    boot.add_argument("--tamper-stage", choices=BOOT_CHAIN)
    boot.add_argument("--measurements", default=str(MEASUREMENTS_PATH))
    _add_store_args(boot)

    args = parser.parse_args(argv)
    args.parser = parser
    return args


def make_approval(spec: str) -> ApprovalProvider | None:
    """None means each scenario answers from its own scripted decisions."""
    if spec == "scenario":
        return None
    if spec == "interactive":
        return InteractiveApproval()
    if spec.startswith("scripted:"):
        return ScriptedApproval.from_file(spec.split(":", 1)[1])
    raise ValueError(f"Unknown approval mode {spec!r}")


def make_judges(fixtures: str | None) -> JudgeRegistry:
    judges = JudgeRegistry.with_rule_defaults()
    if fixtures:
        replay = FixtureJudge.from_file(fixtures)
        judges.register(JudgeRole.INTENT_JUDGE, replay)
        judges.register(JudgeRole.ACTION_JUDGE, replay)
    return judges


def audit_store_path(scenario_id: str, mode: str) -> Path:
    return AURA_HOME / "audit" / f"{scenario_id}-{mode}.jsonl"


def registry_path() -> Path:
    return AURA_HOME / "registry.jsonl"


def cmd_run(args: argparse.Namespace) -> int:
    config = RunConfig.from_args(args)
    missing = [p for p in (*config.scenario_paths, config.measurements_path) if not Path(p).exists()]
    if missing:
        args.parser.error(f"path not found: {', '.join(missing)}")
    try:
        scenarios = load_suite(config.scenario_paths)
        approval = make_approval(config.approval)
        blacklist = load_blacklist(config.blacklist_path)
        judges = make_judges(config.judge_fixtures)
        registry_file = registry_path()
        if registry_file.exists():
            GlobalAgentRegistry.from_record_file(registry_file, config.seed, read_only=True)
    except (ScenarioInvalid, FirewallError, RegistryError, ValueError, RuntimeError) as e:
        args.parser.error(str(e))
    if not scenarios:
        args.parser.error("no scenarios found")

    reports = []
    report_file = open(args.report, "w", encoding="utf-8") if args.report else None
    try:
        for scenario in scenarios:
            store = audit_store_path(scenario.id, config.mode)
            store.unlink(missing_ok=True)
            settings = RunSettings(
                mode=config.mode,
                seed=config.seed,
                optimistic=config.optimistic,
                window=config.window,
                cloud_verification=config.cloud_verification,
                step_budget=config.step_budget,
                tamper_stage=config.tamper_stage,
                measurements_path=config.measurements_path,
                audit_path=str(store),
                registry_path=str(registry_file) if registry_file.exists() else None,
                echo={"run": config.to_json()},
            )
            report = run_scenario(
                scenario, config.mode, config.seed, settings=settings, approval=approval, judges=judges,
                blacklist=blacklist,
            )
            reports.append(report)
            print(report.to_line())
            if report_file is not None:
                report_file.write(report.to_line() + "\n")
            logger.info("%s: %s (expected %s)", scenario.id, report.verdict, scenario.expected.verdict)
    except KernelUnavailable as e:
        logger.error("Kernel unavailable: %s", e)
        print(f"kernel unavailable: {e}", file=sys.stderr)
        return EXIT_KERNEL
    finally:
        if report_file is not None:
            report_file.close()

    metrics = SuiteMetrics(config.mode, reports)
    for line in metrics.summary_lines():
        print(line)
    return EXIT_OK if metrics.all_expected_met else EXIT_EXPECTATION


def cmd_audit(args: argparse.Namespace) -> int:
    platform, outcome = boot_platform(args.seed)
    try:
        log = AuditLog.open(args.store, platform)
        if args.action == "verify":
            verdict = log.verify()
            print(verdict)
            return EXIT_OK if verdict.intact else EXIT_EXPECTATION
        if args.action == "export":
            digest = log.export(args.first, args.last)
            print(json.dumps(digest.to_json(), sort_keys=True))
            return EXIT_OK
        if args.action == "show":
            sessions = [bytes.fromhex(args.session)] if args.session else log.sessions()
            for session in sessions:
                for line in log.summarize(session):
                    print(line)
            return EXIT_OK
        target = b""
        if args.scope == "session":
            if not args.session:
                args.parser.error("audit erase --scope session needs --session")
            target = bytes.fromhex(args.session)
        elif args.scope == "agent":
            if not args.target:
                args.parser.error("audit erase --scope agent needs --target")
            target = bytes.fromhex(args.target)
        tombstone = log.erase(args.scope, target)
        print(f"tombstone #{tombstone.record_id} written; chain {log.verify()}")
        return EXIT_OK
    except (AuditError, ValueError) as e:
        print(f"audit {args.action} failed: {e}", file=sys.stderr)
        return EXIT_EXPECTATION


def _split(raw: str) -> list[str]:
    return [item.strip() for item in raw.split(",") if item.strip()]


def cmd_registry(args: argparse.Namespace) -> int:
    registry = GlobalAgentRegistry.from_record_file(registry_path(), args.seed)
    try:
        if args.action == "enroll":
            if not args.developer:
                args.parser.error("registry enroll needs --developer")
            key = DeveloperKey.derive(args.developer, args.seed)
            registry.enroll_developer(args.developer, key.public_key)
            print(f"enrolled {args.developer} {key.public_key.hex()}")
        elif args.action == "issue":
            if not (args.developer and args.bundle and args.category):
                args.parser.error("registry issue needs --developer, --bundle and --category")
            s_max = CapabilityBoundary(
                frozenset(SemanticPermission(p) for p in _split(args.permissions)),
                frozenset(_split(args.allowlist)),
            )
            bundle = hash_bytes(f"aura-bundle:{args.developer}:{args.bundle}".encode("utf-8"))
            did = AgentDid(args.developer, bundle, USER_ACCOUNT)
            agent_key = signing_key_from_rng(TrustedPlatform(args.seed).derive_rng(f"cli-agent:{did.render()}"))
            aic = registry.issue_aic(
                did,
                public_key_bytes(agent_key),
                s_max,
                DeveloperKey.derive(args.developer, args.seed).sign_manifest(did, s_max),
                AppCategory(args.category),
            )
            print(f"issued serial {aic.serial} for {did.render()}")
        elif args.action == "revoke":
            if args.serial is None:
                args.parser.error("registry revoke needs --serial")
            rev = registry.revoke_aic(args.serial, args.reason)
            print(f"revoked serial {args.serial}; revocation epoch {rev.epoch}")
        else:
            for line in registry.show():
                print(line)
        return EXIT_OK
    except (RegistryError, ValueError) as e:
        print(f"registry {args.action} failed: {e}", file=sys.stderr)
        return EXIT_EXPECTATION


def cmd_boot(args: argparse.Namespace) -> int:
    try:
        platform, outcome = boot_platform(args.seed, args.tamper_stage, args.measurements)
    except (OSError, PlatformError, ValueError) as e:
        print(f"boot failed: {e}", file=sys.stderr)
        return EXIT_KERNEL
    if not outcome.online:
        print(f"FAIL_CLOSED at {outcome.failed_stage}")
        return EXIT_KERNEL
    for measurement in platform.measurements:
        print(f"{measurement.stage_name} {measurement.digest.hex()}")
    print(f"device key {platform.device_public_key.hex()}")
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s [%(levelname)s] %(message)s",
    )
    handlers = {"run": cmd_run, "audit": cmd_audit, "registry": cmd_registry, "boot": cmd_boot}
    return handlers[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
