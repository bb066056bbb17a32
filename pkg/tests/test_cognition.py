"""Taint-tracked memory and trajectory alignment."""

import random
from dataclasses import replace

import pytest

from approval_helpers import ScriptedApproval
from cognition import (
    USER,
    VERIFIED_SA,
    Alignment,
    CognitionError,
    IntegrityError,
    MemorySource,
    MemoryStore,
    PlannedAction,
    Trajectory,
    check_alignment,
    check_sink,
)
from critical_nodes import CriticalNodeCategory


@pytest.fixture
def store(platform):
    return MemoryStore(platform)


def test_taint_matches_reachability_oracle(store):
    """Over a random derivation graph a cell is tainted iff an external source reaches it undeclassified."""
    rng = random.Random(5)
    approve = ScriptedApproval({"declassify:*": "approve"})
    oracle: dict[str, bool] = {}
    ids: list[str] = []
    for i in range(10_000):
        roll = rng.random()
        if not oracle or roll < 0.2:
            source = rng.choice([USER, VERIFIED_SA, MemorySource.external(f"app-{i % 7}")])
            cell = store.store(f"v{i}", source)
            oracle[cell.cell_id] = source.kind.value == "EXTERNAL"
        elif roll < 0.25:
            tainted = [cid for cid, t in oracle.items() if t]
            if not tainted:
                continue
            cell = store.declassify(rng.choice(tainted), approve).cell
            oracle[cell.cell_id] = False
        else:
            parents = rng.sample(ids, k=min(len(ids), rng.randint(1, 3)))
            cell = store.derive(parents, f"d{i}")
            oracle[cell.cell_id] = any(oracle[p] for p in parents)
        assert cell.tainted == oracle[cell.cell_id]
        ids.append(cell.cell_id)
    assert store.taint_audit() == []


def test_declassify_denied_keeps_taint(store):
    cell = store.store("otp 123456", MemorySource.external("sms"))
    result = store.declassify(cell.cell_id, ScriptedApproval({"declassify:*": "deny"}))
    assert result.denied
    assert store.read(cell.cell_id).tainted


def test_declassify_needs_a_tainted_cell(store):
    cell = store.store("hello", USER)
    with pytest.raises(CognitionError):
        store.declassify(cell.cell_id, ScriptedApproval({"*": "approve"}))


def test_tampered_cell_fails_integrity(store):
    cell = store.store("pay 10", USER)
    store._cells[cell.cell_id] = replace(cell, content="pay 1000")
    with pytest.raises(IntegrityError):
        store.read(cell.cell_id)
    assert store.taint_audit() == [cell.cell_id]


def test_flipped_tag_is_caught(store):
    cell = store.store("from a stranger", MemorySource.external("mail"))
    store._cells[cell.cell_id] = replace(cell, tag=store.store("x", USER).tag)
    with pytest.raises(IntegrityError):
        store.read(cell.cell_id)


def test_persist_and_reload(platform, store, tmp_path):
    base = store.store("hello", USER)
    store.derive([base.cell_id], "hello again")
    path = tmp_path / "memory.txt"
    store.persist(path)

    assert store.load(path) == 2
    lines = path.read_text().splitlines()
    lines[0] = lines[0][:-2] + ("00" if lines[0][-2:] != "00" else "11")
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(IntegrityError):
        store.load(path)


def test_sink_names_tainted_params(store):
    clean = store.store("mom", USER)
    dirty = store.store("attacker", MemorySource.external("mail"))
    action = PlannedAction(
        "messaging.send_message",
        CriticalNodeCategory.PRIVACY_ACCESS,
        {"to": clean.cell_id, "body": dirty.cell_id},
        "message mom",
    )
    assert check_sink(action, store).tainted == (dirty.cell_id,)


def test_alignment_outcomes(store):
    traj = Trajectory("Send mom a message saying I'll be late")
    body = store.derive([store.store(traj.user_instruction, USER).cell_id], "I'll be late")
    send = PlannedAction(
        "messaging.send_message", CriticalNodeCategory.PRIVACY_ACCESS, {"body": body.cell_id}, "message mom"
    )
    assert check_alignment(traj, send, store).consistent

    unjustified = replace(send, justification="")
    assert check_alignment(traj, unjustified, store).kind is Alignment.MISSING_JUSTIFICATION

    amount = store.store("900", VERIFIED_SA)
    transfer = PlannedAction(
        "wallet.transfer", CriticalNodeCategory.FINANCIAL, {"amount": amount.cell_id}, "premium subscription"
    )
    assert check_alignment(traj, transfer, store).kind is Alignment.DRIFT


def test_moved_goal_is_drift(store):
    traj = Trajectory("Set an alarm for 7")
    traj.user_instruction = "Transfer everything"
    action = PlannedAction("clock.set_alarm", CriticalNodeCategory.DATA_PERSISTENCE, {}, "alarm")
    verdict = check_alignment(traj, action, store)
    assert verdict.kind is Alignment.DRIFT
    assert "goal anchor" in verdict.reason
