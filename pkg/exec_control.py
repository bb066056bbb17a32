"""Execution boundary: JIT least privilege, critical-node interception, egress filtering, the alignment
validator and optimistic verification with session trust tokens."""

from __future__ import annotations

import logging
import os
import threading
from collections import Counter
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable

from dotenv import load_dotenv
from langchain_core.messages import BaseMessage, HumanMessage, SystemMessage

from approval_helpers import APPROVE, DENY, ApprovalPrompt, ApprovalProvider, ask_or_fail_closed
from audit import AuditEvent, AuditLog, Severity
from cognition import (
    CognitionError,
    MemoryStore,
    PlannedAction,
    Trajectory,
    check_alignment,
    check_sink,
)
from critical_nodes import CriticalNodeCategory, default_permissions
from judge_iface import DIRECT_PASS, Judge, JudgeQuery, JudgeRole, JudgeUnavailable
from kernel_session import SessionToken
from registry import SemanticPermission
from trusted_platform import canonical_encode, hash_bytes

load_dotenv()

logger = logging.getLogger(__name__)

OPTIMISTIC = os.getenv("AURA_OPTIMISTIC", "false").lower() in ("1", "true", "yes")
WINDOW = int(os.getenv("AURA_WINDOW", "1"))

_KERNEL_BUILT = object()


class Outcome(str, Enum):
    DIRECT_PASS = "DirectPass"
    USER_CONFIRMATION_REQUIRED = "UserConfirmationRequired"
    BLOCKED = "Blocked"
    SECURITY_ALERT = "SecurityAlert"


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    reason: str = ""
    layer: str = "execution"
    stage: str = ""
    confirmed: bool = False
    record_id: int = 0
    action: PlannedAction | None = field(default=None, compare=False)

    @property
    def permits(self) -> bool:
        if self.outcome is Outcome.DIRECT_PASS:
            return True
        return self.outcome is Outcome.USER_CONFIRMATION_REQUIRED and self.confirmed


@dataclass(frozen=True)
class PermissionRequest:
    p_req: frozenset[SemanticPermission]
    step: PlannedAction

    @classmethod
    def for_action(cls, action: PlannedAction) -> "PermissionRequest":
        declared = action.p_req if action.p_req is not None else default_permissions(action.api)
        return cls(frozenset(SemanticPermission(p) for p in declared), action)


@dataclass(frozen=True)
class PrivilegeVerdict:
    granted: bool
    reason: str = ""


@dataclass(frozen=True)
class EgressVerdict:
    proceed: bool
    host: str


@dataclass(frozen=True)
class VerificationContext:
    """(I_user, C_hist, A_req) as handed to the action judge."""

    i_user: str
    c_hist: tuple[str, ...]
    category: CriticalNodeCategory
    api: str
    params_text: tuple[tuple[str, str], ...]
    _provenance: object = field(default=None, repr=False, compare=False)

    @property
    def firewall_built(self) -> bool:
        return self._provenance is _KERNEL_BUILT

    def outbound_text(self) -> str:
        return "\n".join(text for _, text in self.params_text)

    def digest(self) -> bytes:
        return hash_bytes(
            canonical_encode(
                self.i_user,
                list(self.c_hist),
                self.category,
                self.api,
                [canonical_encode(name, text) for name, text in self.params_text],
            )
        )

    def to_messages(self) -> list[BaseMessage]:
        params = "; ".join(f"{name}={text}" for name, text in self.params_text)
        return [
            SystemMessage(content="Decide whether the requested action is consistent with the user's instruction."),
            HumanMessage(
                content=(
                    f"Instruction: {self.i_user}\nHistory: {' | '.join(self.c_hist) or '-'}\n"
                    f"Requested: {self.api} [{self.category.value}] {params}"
                )
            ),
        ]


def build_verification_context(
    traj: Trajectory, action: PlannedAction, store: MemoryStore
) -> VerificationContext:
    params: list[tuple[str, str]] = []
    for name, cell_id in sorted(action.params.items()):
        cell = store.read(cell_id)
        if cell.tainted:
            raise CognitionError(f"Verification context cannot include tainted cell {cell_id}")
        params.append((name, cell.content))
    assert action.op_kind is not None
    return VerificationContext(
        traj.user_instruction, tuple(traj.history()), action.op_kind, action.api, tuple(params), _KERNEL_BUILT
    )


def egress_filter(token: SessionToken, host: str) -> EgressVerdict:
    """Exact, case-insensitive hostname match against the token's declared allowlist."""
    normalized = host.strip().lower()
    return EgressVerdict(normalized in token.s_max.domain_allowlist, normalized)


def validate_action(ctx: VerificationContext, judge: Judge) -> tuple[Outcome, str]:
    try:
        verdict = judge.judge(JudgeQuery(JudgeRole.ACTION_JUDGE, ctx))
    except JudgeUnavailable as e:
        logger.warning("Action judge unavailable (%s); asking the user", e)
        return Outcome.USER_CONFIRMATION_REQUIRED, f"judge unavailable: {e}"
    if verdict.decision == DIRECT_PASS:
        return Outcome.DIRECT_PASS, verdict.rationale
    return Outcome.USER_CONFIRMATION_REQUIRED, verdict.rationale


class TrustStatus(str, Enum):
    LIVE = "live"
    REVOKED = "revoked"


@dataclass(frozen=True)
class TrustToken:
    session: bytes
    op_category: CriticalNodeCategory
    issued_after: int
    status: TrustStatus = TrustStatus.LIVE


@dataclass
class _Pending:
    future: Future
    released_record: int
    token: SessionToken
    category: CriticalNodeCategory


class ExecutionController:
    """
    Owns the session-scoped state of the execution boundary: JIT grants, trust tokens
    and the queue of optimistic verdicts still to be published.
    """

    def __init__(
        self,
        audit: AuditLog,
        memory: MemoryStore,
        judge: Judge,
        optimistic: bool = OPTIMISTIC,
        window: int = WINDOW,
        misbehaviour_limit: int = 0,
        on_misbehaviour: Callable[[SessionToken], None] | None = None,
    ) -> None:
        if window < 1:
            raise ValueError("Optimistic window must be at least 1")
        self._audit = audit
        self._memory = memory
        self._judge = judge
        self.optimistic = optimistic
        self.window = window
        self._misbehaviour_limit = misbehaviour_limit
        self._on_misbehaviour = on_misbehaviour
        self._lock = threading.RLock()
        self._grants: dict[bytes, set[SemanticPermission]] = {}
        self._trust: dict[tuple[bytes, CriticalNodeCategory], TrustToken] = {}
        self._pending: list[_Pending] = []
        self._violations: Counter[bytes] = Counter()
        self._pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="optimistic-verifier")

    def record_decision(
        self, token: SessionToken, decision: Decision, action: PlannedAction, **extra: Any
    ) -> Decision:
        payload = {
            "summary": f"{action.api} -> {decision.outcome.value}"
            + (" (confirmed)" if decision.confirmed else "")
            + (f" at {decision.stage}" if not decision.permits else ""),
            "api": action.api,
            "outcome": decision.outcome.value,
            "confirmed": decision.confirmed,
            "layer": decision.layer,
            "stage": decision.stage,
            "reason": decision.reason,
            **extra,
        }
        severity = Severity.INFO if decision.permits else Severity.WARN
        record = self._audit.append(AuditEvent.DECISION, token.token_id, token.actor, payload, severity)
        return replace(decision, record_id=record.record_id, action=action)

    def _alert(self, token: SessionToken, summary: str, **extra: Any) -> None:
        logger.error("Security alert for %s: %s", token.principal, summary)
        self._audit.append(
            AuditEvent.ALERT, token.token_id, token.actor, {"summary": summary, **extra}, Severity.CRITICAL
        )

    def check_privilege(
        self, token: SessionToken, req: PermissionRequest, approval: ApprovalProvider
    ) -> PrivilegeVerdict:
        excess = req.p_req - token.s_max.permissions
        if excess:
            names = ", ".join(sorted(p.value for p in excess))
            self._alert(token, f"{req.step.api} requested {names} outside its capability boundary", api=req.step.api)
            self._note_misbehaviour(token)
            return PrivilegeVerdict(False, f"policy: {names} not in capability boundary")
        with self._lock:
            granted = self._grants.setdefault(token.token_id, set())
            missing = sorted(req.p_req - granted, key=lambda p: p.value)
        for permission in missing:
            prompt = ApprovalPrompt(
                kind="permission",
                subject=permission.value,
                summary=f"{token.principal.developer} wants {permission.value} for {req.step.api}",
            )
            if ask_or_fail_closed(approval, prompt, DENY) != APPROVE:
                return PrivilegeVerdict(False, f"user declined {permission.value}")
            with self._lock:
                granted.add(permission)
        return PrivilegeVerdict(True)

    def _note_misbehaviour(self, token: SessionToken) -> None:
        with self._lock:
            self._violations[token.actor] += 1
            count = self._violations[token.actor]
        if self._misbehaviour_limit and count >= self._misbehaviour_limit and self._on_misbehaviour:
            logger.error("Agent %s exceeded %d capability violations", token.principal, self._misbehaviour_limit)
            self._on_misbehaviour(token)

    def intercept(
        self,
        token: SessionToken,
        action: PlannedAction,
        traj: Trajectory,
        approval: ApprovalProvider,
        initiator: str = "SA",
    ) -> Decision:
        """Suspend a critical action and run it through every execution-boundary stage."""
        decision, action = self._pre_validation(token, action, traj, approval, initiator)
        if decision is not None:
            return decision
        return self._validate_sync(token, action, traj, approval)

    def _pre_validation(
        self,
        token: SessionToken,
        action: PlannedAction,
        traj: Trajectory,
        approval: ApprovalProvider,
        initiator: str,
    ) -> tuple[Decision | None, PlannedAction]:
        if action.op_kind is None:
            raise ValueError(f"{action.api} is not a critical node")
        self._audit.append(
            AuditEvent.SENSITIVE_OP,
            token.token_id,
            token.actor,
            {
                "summary": f"{action.api} [{action.op_kind.value}] requested by {initiator}",
                "api": action.api,
                "category": action.op_kind.value,
                "initiator": initiator,
                "params": sorted(action.params),
            },
            Severity.CRITICAL,
        )

        sink = check_sink(action, self._memory)
        if not sink.clear:
            params = dict(action.params)
            for name, cell_id in sorted(action.params.items()):
                if cell_id not in sink.tainted:
                    continue
                result = self._memory.declassify(cell_id, approval)
                if result.denied:
                    return self.record_decision(
                        token,
                        Decision(Outcome.BLOCKED, f"tainted parameter {name}", "cognition", "taint"),
                        action,
                    ), action
                assert result.cell is not None
                self._audit.append(
                    AuditEvent.DECLASSIFY,
                    token.token_id,
                    token.actor,
                    {
                        "summary": f"user declassified {cell_id} for {action.api}",
                        "source": cell_id,
                        "cell": result.cell.cell_id,
                        "api": action.api,
                    },
                    Severity.WARN,
                )
                params[name] = result.cell.cell_id
            action = replace(action, params=params)

        if action.op_kind is CriticalNodeCategory.NETWORK_EGRESS or action.host:
            egress = egress_filter(token, action.host or "")
            if not egress.proceed:
                self._alert(token, f"blocked egress to {egress.host}", host=egress.host, api=action.api)
                return self.record_decision(
                    token,
                    Decision(Outcome.SECURITY_ALERT, f"host {egress.host} not in allowlist", "execution", "egress"),
                    action,
                ), action

        alignment = check_alignment(traj, action, self._memory)
        if not alignment.consistent:
            return self.record_decision(
                token,
                Decision(Outcome.BLOCKED, alignment.reason, "cognition", alignment.kind.value),
                action,
            ), action
        return None, action

    def _validate_sync(
        self, token: SessionToken, action: PlannedAction, traj: Trajectory, approval: ApprovalProvider
    ) -> Decision:
        ctx = build_verification_context(traj, action, self._memory)
        outcome, rationale = validate_action(ctx, self._judge)
        if outcome is Outcome.DIRECT_PASS:
            decision = self.record_decision(token, Decision(outcome, rationale, "execution", "validator"), action)
            if self.optimistic:
                self._mint(token, action.op_kind, decision.record_id)
            return decision
        prompt = ApprovalPrompt(
            kind="confirm",
            subject=action.api,
            summary=f"Allow {action.api}? {rationale}",
            preview=ctx.outbound_text()[:120],
        )
        confirmed = ask_or_fail_closed(approval, prompt, DENY) == APPROVE
        if confirmed:
            return self.record_decision(
                token, Decision(outcome, rationale, "execution", "validator", confirmed=True), action
            )
        return self.record_decision(
            token, Decision(Outcome.BLOCKED, f"user declined: {rationale}", "execution", "validator"), action
        )

    def _mint(self, token: SessionToken, category: CriticalNodeCategory, after: int) -> None:
        key = (token.token_id, category)
        with self._lock:
            if key in self._trust and self._trust[key].status is TrustStatus.LIVE:
                return
            self._trust[key] = TrustToken(token.token_id, category, after)
        self._audit.append(
            AuditEvent.DECISION,
            token.token_id,
            token.actor,
            {"summary": f"trust token minted for {category.value}", "trust": "minted", "category": category.value},
            Severity.INFO,
            ref=after,
        )

    def trust_token(self, session: bytes, category: CriticalNodeCategory) -> TrustToken | None:
        return self._trust.get((session, category))

    def _live_trust(self, token: SessionToken, category: CriticalNodeCategory) -> bool:
        trust = self._trust.get((token.token_id, category))
        return trust is not None and trust.status is TrustStatus.LIVE

    def execute_optimistic(
        self,
        token: SessionToken,
        action: PlannedAction,
        traj: Trajectory,
        approval: ApprovalProvider,
        initiator: str = "SA",
    ) -> Decision:
        if not self.optimistic:
            return self.intercept(token, action, traj, approval, initiator)
        decision, action = self._pre_validation(token, action, traj, approval, initiator)
        if decision is not None:
            return decision
        category = action.op_kind
        assert category is not None
        if self._live_trust(token, category):
            self.settle(token.token_id, keep=self.window - 1)
        if not self._live_trust(token, category):
            return self._validate_sync(token, action, traj, approval)

        ctx = build_verification_context(traj, action, self._memory)
        decision = self.record_decision(
            token,
            Decision(Outcome.DIRECT_PASS, "trust token fast path", "execution", "trust-token"),
            action,
            fast_path=True,
        )
        future = self._pool.submit(validate_action, ctx, self._judge)
        with self._lock:
            self._pending.append(_Pending(future, decision.record_id, token, category))
        return decision

    def settle(self, session: bytes | None = None, keep: int = 0) -> int:
        """Publish pending optimistic verdicts, oldest first, until at most `keep` remain for the session."""
        published = 0
        while True:
            with self._lock:
                queue = [p for p in self._pending if session is None or p.token.token_id == session]
                if len(queue) <= keep:
                    return published
                pending = queue[0]
                self._pending.remove(pending)
            self._publish(pending)
            published += 1

    def settle_all(self) -> int:
        return self.settle(None, keep=0)

    def _publish(self, pending: _Pending) -> None:
        outcome, rationale = pending.future.result()
        token = pending.token
        consistent = outcome is Outcome.DIRECT_PASS
        self._audit.append(
            AuditEvent.DECISION,
            token.token_id,
            token.actor,
            {
                "summary": f"async verdict {'consistent' if consistent else 'inconsistent'}",
                "async_verdict": "consistent" if consistent else "inconsistent",
                "reason": rationale,
            },
            Severity.INFO if consistent else Severity.WARN,
            ref=pending.released_record,
        )
        if consistent:
            return
        key = (token.token_id, pending.category)
        with self._lock:
            trust = self._trust.get(key)
            if trust is not None:
                self._trust[key] = replace(trust, status=TrustStatus.REVOKED)
        self._audit.append(
            AuditEvent.REVOCATION,
            token.token_id,
            token.actor,
            {"summary": f"trust token revoked for {pending.category.value}", "category": pending.category.value},
            Severity.WARN,
            ref=pending.released_record,
        )
        logger.error("Post-hoc inconsistency on record %d; trust token revoked", pending.released_record)
        self._audit.flag(pending.released_record, f"post-hoc inconsistency: {rationale}", token.token_id, token.actor)

    def close(self) -> None:
        self.settle_all()
        self._pool.shutdown(wait=True)


__all__ = [
    "Decision",
    "EgressVerdict",
    "ExecutionController",
    "Outcome",
    "PermissionRequest",
    "PrivilegeVerdict",
    "TrustStatus",
    "TrustToken",
    "VerificationContext",
    "build_verification_context",
    "egress_filter",
    "validate_action",
]
