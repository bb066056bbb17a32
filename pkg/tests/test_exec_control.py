"""Execution boundary: least privilege, egress, taint sinks, the validator and optimistic verification."""

import random
import threading

import pytest

from approval_helpers import ScriptedApproval, UnavailableApproval
from audit import AuditEvent
from cognition import USER, MemorySource, PlannedAction, Trajectory
from critical_nodes import CriticalNodeCategory as C
from exec_control import ExecutionController, Outcome, PermissionRequest, TrustStatus, egress_filter
from judge_iface import DIRECT_PASS, USER_CONFIRMATION, FailingJudge, JudgeRole, JudgeVerdict
from kernel_session import TokenInvalidated
from registry import AppCategory, SemanticPermission as P


def _cells(device, **values):
    return {name: device.kernel.memory.store(value, USER).cell_id for name, value in values.items()}


def _decisions(device):
    audit = device.kernel.audit
    return [audit.payload(r.record_id) for r in audit.records() if r.event is AuditEvent.DECISION]


class SequenceJudge:
    """Action-judge verdicts in a fixed order; counts every call."""

    def __init__(self, decisions):
        self._decisions = list(decisions)
        self._lock = threading.Lock()
        self.calls = 0

    def judge(self, query):
        assert query.role is JudgeRole.ACTION_JUDGE
        with self._lock:
            decision = self._decisions[self.calls]
            self.calls += 1
        return JudgeVerdict(decision, f"scripted #{self.calls}")


def test_excess_permission_is_an_alert_and_repeat_offenders_are_revoked(device):
    _, sa_aic, sa = device.install_sa()
    proc, aic, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    traj = Trajectory("Send mom a message")
    action = PlannedAction("wallet.transfer", C.FINANCIAL, _cells(device, amount="900"), "transfer")
    approval = ScriptedApproval({"*": "approve"})

    for _ in range(device.kernel.options.misbehaviour_limit):
        decision = device.kernel.dispatch(sa, token, action, traj, approval)
        assert decision.outcome is Outcome.BLOCKED
        assert decision.stage == "privilege"
    alerts = [r for r in device.kernel.audit.records() if r.event is AuditEvent.ALERT]
    assert len(alerts) == device.kernel.options.misbehaviour_limit
    assert aic.serial in device.registry.latest_revocations().revoked_serials
    with pytest.raises(TokenInvalidated):
        device.kernel.sessions.validate_call(token.token_id, proc)
    assert approval.asked == []


def test_grants_are_asked_once_per_session(device):
    _, _, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    action = PlannedAction("messaging.send_message", C.PRIVACY_ACCESS, {}, "message")
    approval = ScriptedApproval({"permission:SEND_MESSAGE": "approve"})
    request = PermissionRequest.for_action(action)
    assert device.kernel.exec.check_privilege(token, request, approval).granted
    assert device.kernel.exec.check_privilege(token, request, approval).granted
    assert [p.prompt_id for p in approval.asked] == ["permission:SEND_MESSAGE"]


def test_declined_grant_blocks(device):
    _, _, sa = device.install_sa()
    _, _, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    action = PlannedAction("messaging.send_message", C.PRIVACY_ACCESS, {}, "message")
    decision = device.kernel.dispatch(sa, token, action, Trajectory("message"), ScriptedApproval({"*": "deny"}))
    assert decision.outcome is Outcome.BLOCKED
    assert "declined" in decision.reason


def test_egress_matches_allowlist_exactly(device):
    allowlist = ("api.booking.com", "mail.example.com")
    _, _, token = device.install("trips", AppCategory.BOOKING, (P.NETWORK_EGRESS,), allowlist)
    rng = random.Random(9)
    lookalikes = [
        "api.booking.com.evil.example",
        "xapi.booking.com",
        "booking.com",
        "mail.example.co",
        "login.evil-sheets.example",
        "api-booking.com",
        "",
    ]
    for _ in range(1000):
        if rng.random() < 0.5:
            base = rng.choice(allowlist)
            host = "".join(ch.upper() if rng.random() < 0.3 else ch for ch in base)
            host = " " * rng.randint(0, 1) + host + " " * rng.randint(0, 1)
        else:
            host = rng.choice(lookalikes)
        verdict = egress_filter(token, host)
        assert verdict.proceed == (host.strip().lower() in allowlist)


def test_egress_outside_allowlist_raises_security_alert(device):
    _, _, sa = device.install_sa()
    _, _, token = device.install("mail", AppCategory.MAIL, (P.NETWORK_EGRESS,), ("mail.example.com",))
    traj = Trajectory("Open the link in my mail")
    action = PlannedAction(
        "mail.open_link", C.NETWORK_EGRESS, _cells(device, host="login.evil.example"), "open link", host="login.evil.example"
    )
    decision = device.kernel.dispatch(sa, token, action, traj, ScriptedApproval({"*": "approve"}))
    assert decision.outcome is Outcome.SECURITY_ALERT
    assert (decision.layer, decision.stage) == ("execution", "egress")


def _memo_action(device, content_cell):
    title = device.kernel.memory.store("groceries", USER).cell_id
    return PlannedAction("notes.write_memo", C.DATA_PERSISTENCE, {"title": title, "content": content_cell}, "memo groceries")


def test_tainted_parameter_needs_declassification(device):
    _, _, sa = device.install_sa()
    _, _, token = device.install("notes", AppCategory.NOTES, (P.WRITE_STORAGE,))
    traj = Trajectory("Write a memo titled groceries with the list from my mail")
    dirty = device.kernel.memory.store("milk and eggs", MemorySource.external("mail"))

    denied = device.kernel.dispatch(
        sa, token, _memo_action(device, dirty.cell_id), traj, ScriptedApproval({"permission:*": "approve", "declassify:*": "deny"})
    )
    assert denied.outcome is Outcome.BLOCKED
    assert (denied.layer, denied.stage) == ("cognition", "taint")

    approved = device.kernel.dispatch(
        sa, token, _memo_action(device, dirty.cell_id), traj, ScriptedApproval({"*": "approve"})
    )
    assert approved.permits
    assert any(r.event is AuditEvent.DECLASSIFY for r in device.kernel.audit.records())
    assert approved.action.params["content"] != dirty.cell_id


def test_missing_justification_blocks(device):
    _, _, sa = device.install_sa()
    _, _, token = device.install("notes", AppCategory.NOTES, (P.WRITE_STORAGE,))
    action = PlannedAction("notes.write_memo", C.DATA_PERSISTENCE, _cells(device, title="groceries"), "")
    decision = device.kernel.dispatch(sa, token, action, Trajectory("memo groceries"), ScriptedApproval({"*": "approve"}))
    assert decision.outcome is Outcome.BLOCKED
    assert decision.stage == "missing_justification"


@pytest.mark.parametrize("answer, permits", [("approve", True), ("deny", False)])
def test_financial_actions_need_confirmation(device, answer, permits):
    _, _, sa = device.install_sa()
    _, _, token = device.install("wallet", AppCategory.WALLET, (P.PAYMENT,))
    traj = Trajectory("Pay 42.50 for the train ticket")
    action = PlannedAction("wallet.pay", C.FINANCIAL, _cells(device, amount="42.50"), "pay train ticket")
    approval = ScriptedApproval({"permission:*": "approve", "confirm:wallet.pay": answer})
    decision = device.kernel.dispatch(sa, token, action, traj, approval)
    assert decision.permits is permits
    assert decision.stage == "validator"
    assert "confirm:wallet.pay" in [p.prompt_id for p in approval.asked]


def test_unavailable_judge_and_user_fail_closed(make_device):
    from judge_iface import JudgeRegistry

    judges = JudgeRegistry.with_rule_defaults()
    judges.register(JudgeRole.ACTION_JUDGE, FailingJudge())
    device = make_device(judges=judges)
    _, _, token = device.install("notes", AppCategory.NOTES, (P.WRITE_STORAGE,))
    traj = Trajectory("memo groceries")
    decision = device.kernel.exec.intercept(token, _memo_action(device, _cells(device, c="milk")["c"]), traj, UnavailableApproval())
    assert decision.outcome is Outcome.BLOCKED
    assert decision.stage == "validator"


def test_optimistic_fast_path_and_post_hoc_revocation(device):
    """pass, pass, inconsistent, then the next call goes back to synchronous validation."""
    _, _, token = device.install("notes", AppCategory.NOTES, (P.WRITE_STORAGE,))
    judge = SequenceJudge([DIRECT_PASS, DIRECT_PASS, USER_CONFIRMATION, DIRECT_PASS])
    controller = ExecutionController(device.kernel.audit, device.kernel.memory, judge, optimistic=True, window=1)
    traj = Trajectory("Write a memo titled groceries with milk")
    approval = ScriptedApproval({"*": "approve"})

    def call():
        return controller.execute_optimistic(token, _memo_action(device, _cells(device, c="milk")["c"]), traj, approval)

    first = call()
    assert first.stage == "validator"
    assert controller.trust_token(token.token_id, C.DATA_PERSISTENCE).status is TrustStatus.LIVE
    second = call()
    third = call()
    assert (second.stage, third.stage) == ("trust-token", "trust-token")
    fourth = call()
    assert fourth.stage == "validator"
    assert judge.calls == 4
    controller.close()

    records = device.kernel.audit.records()
    flags = [r for r in records if r.event is AuditEvent.ALERT and r.ref == third.record_id]
    assert len(flags) == 1
    assert any(r.event is AuditEvent.REVOCATION and r.ref == third.record_id for r in records)
    verdicts = [p["async_verdict"] for p in _decisions(device) if "async_verdict" in p]
    assert verdicts == ["consistent", "inconsistent"]
    assert controller.trust_token(token.token_id, C.DATA_PERSISTENCE).status is TrustStatus.LIVE


def test_window_must_be_positive(device):
    with pytest.raises(ValueError):
        ExecutionController(device.kernel.audit, device.kernel.memory, FailingJudge(), window=0)
