"""
Agent Kernel facade.

Owns one instance of every defense layer over a booted platform and routes the system
agent's traffic through them. In passthrough mode the firewall, cognition and execution
decisions are switched off while identity and audit keep running, which reproduces the
unprotected baseline on the same device.
"""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import asdict, dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from dotenv import load_dotenv

from approval_helpers import APPROVE, DENY, ApprovalPrompt, ApprovalProvider, UnavailableApproval, ask_or_fail_closed
from audit import KERNEL_ACTOR, NO_SESSION, AuditEvent, AuditLog, AuditRecord, Severity
from cognition import USER, VERIFIED_SA, MemoryCell, MemorySource, MemoryStore, PlannedAction, Trajectory
from critical_nodes import CriticalNodeRegistry
from exec_control import OPTIMISTIC, WINDOW, Decision, ExecutionController, Outcome, PermissionRequest
from firewall import (
    CLOUD_VERIFICATION,
    REINFORCE_PROMPT,
    SYSTEM_PROMPT,
    AcceptedObservation,
    GateAction,
    GateDecision,
    GazetteerRecognizer,
    IntentVerdict,
    ObservationEnvelope,
    Recognizer,
    SensitiveEntity,
    build_context,
    cloud_stage_enabled,
    detect_sensitive,
    filter_intent,
    gate_sensitive,
    load_blacklist,
    redact,
    render_flat,
    seal_observation,
    verify_envelope,
)
from judge_iface import ACT, JudgeQuery, JudgeRegistry, JudgeRole, JudgeUnavailable
from kernel_session import AgentKernelSessions, Role, SessionError, SessionToken, TargetUnavailable, TaskSpec
from registry import AgentDid, AgentIdentityCard, CapabilityBoundary, DeveloperKey, GlobalAgentRegistry, RevokedPrincipal
from trusted_platform import ProcessIdentity, TrustedPlatform

load_dotenv()

logger = logging.getLogger(__name__)

ENFORCED = "enforced"
PASSTHROUGH = "passthrough"
MODES = (ENFORCED, PASSTHROUGH)

MODE = os.getenv("AURA_MODE", ENFORCED)
MISBEHAVIOUR_LIMIT = int(os.getenv("AURA_MISBEHAVIOUR_LIMIT", "3"))


@dataclass(frozen=True)
class KernelOptions:
    mode: str = MODE
    optimistic: bool = OPTIMISTIC
    window: int = WINDOW
    cloud_verification: str = CLOUD_VERIFICATION
    misbehaviour_limit: int = MISBEHAVIOUR_LIMIT

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"Unknown kernel mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.cloud_verification not in ("always", "sensitive", "never"):
            raise ValueError(f"Unknown cloud verification mode {self.cloud_verification!r}")

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class Admission:
    allowed: bool
    cell: MemoryCell | None = None
    trajectory: Trajectory | None = None
    verdict: IntentVerdict | None = None


@dataclass(frozen=True)
class ObservationResult:
    cell: MemoryCell | None = None
    accepted: AcceptedObservation | None = None
    text: str = ""
    halted: bool = False
    reason: str = ""


class AgentKernel:
    def __init__(
        self,
        platform: TrustedPlatform,
        registry: GlobalAgentRegistry,
        options: KernelOptions | None = None,
        *,
        judges: JudgeRegistry | None = None,
        blacklist: frozenset[str] | None = None,
        critical: CriticalNodeRegistry | None = None,
        recognizer: Recognizer | None = None,
        audit_path: str | None = None,
    ) -> None:
        platform.require_online()
        self.platform = platform
        self.registry = registry
        self.options = options or KernelOptions()
        self._step = 0
        self._clock_lock = threading.Lock()
        # Vault creation order is part of the deterministic replay: audit secret, then memory secret.
        self.audit = AuditLog(platform, audit_path)
        self.memory = MemoryStore(platform)
        self.sessions = AgentKernelSessions(
            platform,
            registry.latest_revocations,
            registry.root_public_key,
            clock=self.now,
            audit=self.audit,
        )
        self.audit.attach_session_check(self._session_live)
        self.judges = judges or JudgeRegistry.with_rule_defaults()
        self.blacklist = load_blacklist() if blacklist is None else blacklist
        self.critical = critical or CriticalNodeRegistry.load()
        self.recognizer = recognizer or GazetteerRecognizer()
        self._misbehaving: list[SessionToken] = []
        self.exec = ExecutionController(
            self.audit,
            self.memory,
            self.judges,
            optimistic=self.options.optimistic,
            window=self.options.window,
            misbehaviour_limit=self.options.misbehaviour_limit,
            on_misbehaviour=self._misbehaving.append,
        )

    @property
    def enforced(self) -> bool:
        return self.options.mode == ENFORCED

    def now(self) -> int:
        return self._step

    def tick(self) -> int:
        with self._clock_lock:
            self._step += 1
            return self._step

    def _session_live(self, session: bytes) -> bool:
        try:
            return self.sessions.session(session).live
        except SessionError:
            return False

    def record_config(self, config: Mapping[str, Any]) -> AuditRecord:
        payload = {"summary": f"run configuration ({self.options.mode})", **self.options.to_json(), **config}
        return self.audit.append(AuditEvent.CONFIG, NO_SESSION, KERNEL_ACTOR, payload)

    # Identity

    def provision(
        self,
        proc: ProcessIdentity,
        developer: DeveloperKey,
        s_max: CapabilityBoundary,
        category: str,
        user_account: str,
    ) -> AgentIdentityCard:
        """Install-time flow: vault keypair for the process, GAR issuance, local binding."""
        did = AgentDid(developer.dev_id, proc.code_fingerprint, user_account)
        handle, public_key = self.platform.generate_keypair(proc)
        try:
            aic = self.registry.issue_aic(did, public_key, s_max, developer.sign_manifest(did, s_max), category)
        except RevokedPrincipal:
            logger.warning("Provisioning refused for revoked principal %s", did)
            self.audit.append(
                AuditEvent.AUTH,
                NO_SESSION,
                KERNEL_ACTOR,
                {
                    "summary": f"rejected {did.render()} (revoked)",
                    "outcome": "rejected",
                    "reason": "revoked",
                    "blocked": True,
                    "layer": "identity",
                    "stage": "provisioning",
                },
                Severity.WARN,
            )
            raise
        self.sessions.bind_principal(aic, handle)
        return aic

    def challenge(self, proc: ProcessIdentity) -> bytes:
        return self.sessions.challenge(proc)

    def present(
        self, proc: ProcessIdentity, aic: AgentIdentityCard, proof: bytes, role: Role = Role.AA
    ) -> SessionToken:
        return self.sessions.authenticate_agent(proc, aic, proof, role)

    def authenticate(self, proc: ProcessIdentity, aic: AgentIdentityCard, role: Role = Role.AA) -> SessionToken:
        nonce = self.sessions.challenge(proc)
        proof = self.sessions.prove_possession(proc, aic, nonce)
        return self.sessions.authenticate_agent(proc, aic, proof, role)

    def restart(self, old: ProcessIdentity, new: ProcessIdentity) -> None:
        """Process restart: end the old sessions, then move its vault keys to the new pid."""
        self.sessions.terminate(old)
        self.sessions.rebind(old, new)

    def invoke(self, sa: SessionToken, target: AgentDid, task: TaskSpec) -> SessionToken:
        return self.sessions.invoke_agent(sa.token_id, target, task, sa.bound_process)

    def seal_observation(
        self, token: SessionToken, caller: ProcessIdentity, payload: str, resource_id: str
    ) -> ObservationEnvelope:
        return seal_observation(self.sessions, token.token_id, caller, payload, self.now(), resource_id)

    # Perception

    def _block(self, token: SessionToken, summary: str, layer: str, stage: str, **extra: Any) -> None:
        logger.warning("Blocked at %s/%s: %s", layer, stage, summary)
        self.audit.append(
            AuditEvent.ALERT,
            token.token_id,
            token.actor,
            {"summary": summary, "blocked": True, "layer": layer, "stage": stage, **extra},
            Severity.WARN,
        )

    def _record_gate(
        self, token: SessionToken, subject: str, entities: Sequence[SensitiveEntity], gate: GateDecision
    ) -> None:
        if not entities:
            return
        kinds = sorted({e.kind.value for e in entities})
        self.audit.append(
            AuditEvent.DECISION,
            token.token_id,
            token.actor,
            {
                "summary": f"sensitive {subject}: {gate.action.value} ({', '.join(kinds)})",
                "outcome": gate.action.value,
                "kinds": kinds,
                "subject": subject,
                "layer": "perception",
                "stage": "sensitive-gate",
            },
        )

    def admit_instruction(
        self,
        sa: SessionToken,
        text: str,
        plan_categories: Iterable[str] = (),
        approval: ApprovalProvider | None = None,
    ) -> Admission:
        if not self.enforced:
            self.audit.append(AuditEvent.USER_INSTRUCTION, sa.token_id, sa.actor, {"summary": text[:80], "text": text})
            cell = self.memory.store(text, USER)
            return Admission(True, cell, Trajectory(text))

        entities = detect_sensitive(text, self.recognizer)
        gate = gate_sensitive(text, entities, approval or UnavailableApproval(), subject="instruction")
        logged = redact(text, entities)
        self.audit.append(AuditEvent.USER_INSTRUCTION, sa.token_id, sa.actor, {"summary": logged[:80], "text": logged})
        self._record_gate(sa, "instruction", entities, gate)
        if gate.action is GateAction.TERMINATED:
            self._block(sa, "sensitive instruction withheld", "perception", "sensitive-gate")
            return Admission(False)
        if gate.action is GateAction.REDACTED and gate.text is not None:
            text = gate.text

        sensitive = cloud_stage_enabled(self.options.cloud_verification, entities, plan_categories)
        verdict = filter_intent(text, self.blacklist, self.judges, sensitive=sensitive)
        if verdict.degraded:
            self.audit.append(
                AuditEvent.ALERT,
                sa.token_id,
                sa.actor,
                {"summary": "intent judge unavailable; instruction allowed", "degraded": True},
                Severity.WARN,
            )
        if not verdict.allowed:
            self._block(sa, f"instruction rejected ({verdict.matched})", "perception", f"intent-{verdict.stage}")
            return Admission(False, verdict=verdict)
        cell = self.memory.store(text, USER)
        return Admission(True, cell, Trajectory(text), verdict)

    def admit_observation(
        self,
        sa: SessionToken,
        env: ObservationEnvelope,
        traj: Trajectory,
        accepted: Sequence[AcceptedObservation],
        approval: ApprovalProvider,
        plan_categories: Iterable[str] = (),
    ) -> ObservationResult:
        """Verify, gate and tag one observation before it may reach the system agent."""
        if not self.enforced:
            cell = self.memory.store(env.payload, MemorySource.external(env.origin))
            self._response(sa, f"observation {env.resource_id}", resource=env.resource_id)
            return ObservationResult(cell, text=env.payload)

        verdict = verify_envelope(env, self.sessions)
        if not verdict.accepted or verdict.observation is None:
            self._block(
                sa,
                f"observation {env.resource_id} rejected ({verdict.reason})",
                "perception",
                "envelope",
                reason=verdict.reason,
            )
            return ObservationResult(reason=f"envelope: {verdict.reason}")

        observation = verdict.observation
        entities = detect_sensitive(env.payload, self.recognizer)
        gate = gate_sensitive(env.payload, entities, approval, subject=env.resource_id)
        self._record_gate(sa, env.resource_id, entities, gate)
        if gate.action is GateAction.TERMINATED:
            self._block(sa, f"sensitive observation {env.resource_id} withheld", "perception", "sensitive-gate")
            return ObservationResult(halted=True, reason="sensitive data withheld by the user")
        if gate.action is GateAction.REDACTED and gate.text is not None:
            observation = replace(observation, envelope=replace(env, payload=gate.text))

        payload = observation.envelope.payload
        cell = self.memory.store(payload, MemorySource.external(env.origin))
        self._response(
            sa, f"observation {env.resource_id} from {env.origin}", resource=env.resource_id, cell=cell.cell_id
        )

        if cloud_stage_enabled(self.options.cloud_verification, entities, plan_categories):
            context = build_context(
                SYSTEM_PROMPT, traj.user_instruction, [*accepted, observation], traj.history(), REINFORCE_PROMPT
            )
            intent = filter_intent(traj.user_instruction, self.blacklist, self.judges, context, sensitive=True)
            if not intent.allowed:
                summary = f"task rejected after {env.resource_id} ({intent.matched})"
                self._block(sa, summary, "perception", "intent-cloud")
                return ObservationResult(cell, observation, payload, halted=True, reason="intent rejected")
        return ObservationResult(cell, observation, payload)

    def _response(self, token: SessionToken, summary: str, **extra: Any) -> AuditRecord:
        return self.audit.append(AuditEvent.AA_RESPONSE, token.token_id, token.actor, {"summary": summary, **extra})

    def plan(
        self,
        sa: SessionToken,
        traj: Trajectory,
        accepted: Sequence[AcceptedObservation],
        raw_observations: Sequence[str],
    ) -> list[tuple[str, dict[str, str]]]:
        """Ask the planner for directives over the context the current mode builds."""
        if self.enforced:
            context = build_context(SYSTEM_PROMPT, traj.user_instruction, accepted, traj.history(), REINFORCE_PROMPT)
        else:
            context = render_flat(traj.user_instruction, raw_observations, traj.history())
        try:
            verdict = self.judges.judge(JudgeQuery(JudgeRole.PLANNER, context))
        except JudgeUnavailable as e:
            logger.warning("Planner unavailable (%s); no directives", e)
            return []
        directives = [(api, dict(params)) for api, params in verdict.findings] if verdict.decision == ACT else []
        self.audit.append(
            AuditEvent.SA_REASONING,
            sa.token_id,
            sa.actor,
            {"summary": f"planned {len(directives)} directive(s)", "directives": [api for api, _ in directives]},
        )
        return directives

    def derive_param(self, source: MemoryCell | None, content: str) -> MemoryCell:
        if source is None:
            return self.memory.store(content, VERIFIED_SA)
        return self.memory.derive([source.cell_id], content)

    # Execution

    def dispatch(
        self,
        sa: SessionToken,
        token: SessionToken | None,
        action: PlannedAction,
        traj: Trajectory,
        approval: ApprovalProvider,
        initiator: str = "SA",
    ) -> Decision:
        """Every app effect passes here first and gets exactly one recorded Decision."""
        if not self.enforced:
            return self.exec.record_decision(
                sa, Decision(Outcome.DIRECT_PASS, "kernel passthrough", "none", "passthrough"), action
            )
        if token is None:
            raise TargetUnavailable(f"No authenticated agent to carry out {action.api}")
        privilege = self.exec.check_privilege(token, PermissionRequest.for_action(action), approval)
        if not privilege.granted:
            decision = self.exec.record_decision(
                token, Decision(Outcome.BLOCKED, privilege.reason, "execution", "privilege"), action
            )
            self._revoke_misbehaving()
            return decision
        if action.critical:
            return self.exec.execute_optimistic(token, action, traj, approval, initiator)
        return self.exec.record_decision(
            token, Decision(Outcome.DIRECT_PASS, "not a critical node", "execution", "benign"), action
        )

    def _revoke_misbehaving(self) -> None:
        while self._misbehaving:
            token = self._misbehaving.pop(0)
            aic = self.sessions.aic_for(token.token_id)
            rev = self.registry.revoke_aic(aic.serial, "repeated capability violations")
            self.sessions.sweep_revocations(rev)

    def confirm_escalation(
        self, token: SessionToken, action: PlannedAction, reason: str, approval: ApprovalProvider
    ) -> bool:
        prompt = ApprovalPrompt(kind="escalate", subject=action.api, summary=f"App agent is unsure: {reason}")
        confirmed = ask_or_fail_closed(approval, prompt, DENY) == APPROVE
        self.audit.append(
            AuditEvent.SA_REASONING,
            token.token_id,
            token.actor,
            {"summary": f"escalation for {action.api} {'confirmed' if confirmed else 'declined'}", "reason": reason},
            Severity.INFO if confirmed else Severity.WARN,
        )
        return confirmed

    def report_refusal(self, token: SessionToken, action: PlannedAction, reason: str) -> Decision:
        """An app agent's own guardrail refused the effect: a hard stop for the task."""
        logger.warning("App agent %s refused %s: %s", token.principal, action.api, reason)
        return self.exec.record_decision(
            token, Decision(Outcome.BLOCKED, reason, "execution", "aa-guard"), action
        )

    def record_effect(self, token: SessionToken, action: PlannedAction, mutating: bool) -> AuditRecord:
        return self._response(token, f"{action.api} completed", api=action.api, effect=mutating)

    def close(self) -> None:
        self.exec.close()


__all__ = [
    "ENFORCED",
    "MODES",
    "PASSTHROUGH",
    "Admission",
    "AgentKernel",
    "KernelOptions",
    "ObservationResult",
]
