"""Hash-chained accountability log."""

import json
import random
from dataclasses import replace

import pytest

from audit import (
    KERNEL_ACTOR,
    AuditError,
    AuditEvent,
    AuditLog,
    Severity,
    StoreUnavailable,
    UnknownSession,
    merkle_root,
    tombstone_payload,
    verify_chain,
    verify_export,
)
from trusted_platform import BootStatus, KernelUnavailable, boot_platform, hash_bytes, verify_signature

ALICE = b"\xa1" * 16
BOB = b"\xb0" * 16
ACTOR = hash_bytes(b"agent")


def _fill(log, n=30):
    events = [AuditEvent.USER_INSTRUCTION, AuditEvent.SA_REASONING, AuditEvent.AA_RESPONSE, AuditEvent.DECISION]
    for i in range(n):
        session = ALICE if i % 2 else BOB
        log.append(events[i % len(events)], session, ACTOR, {"summary": f"event {i}", "i": i})
    return log


@pytest.fixture
def log(platform):
    return _fill(AuditLog(platform))


def _mutations(records, rng):
    i = rng.randrange(len(records))
    record = records[i]
    kind = rng.randrange(7)
    mutated = list(records)
    if kind == 0:
        digest = bytearray(record.payload_digest)
        digest[rng.randrange(len(digest))] ^= 1 << rng.randrange(8)
        mutated[i] = replace(record, payload_digest=bytes(digest))
    elif kind == 1:
        other = [s for s in Severity if s is not record.severity]
        mutated[i] = replace(record, severity=rng.choice(other))
    elif kind == 2:
        other = [e for e in AuditEvent if e is not record.event]
        mutated[i] = replace(record, event=rng.choice(other))
    elif kind == 3:
        mutated[i] = replace(record, ref=record.ref + 1)
    elif kind == 4:
        del mutated[i]
    elif kind == 5 and i + 1 < len(records):
        mutated[i], mutated[i + 1] = mutated[i + 1], mutated[i]
    else:
        mutated[i] = replace(record, actor=hash_bytes(record.actor))
    return mutated


def test_any_single_mutation_breaks_the_chain(log):
    records = log.records()
    assert verify_chain(records, log.head()).intact
    rng = random.Random(2)
    for _ in range(1000):
        assert not verify_chain(_mutations(records, rng), log.head()).intact


def test_break_is_located(log):
    records = log.records()
    records[11] = replace(records[11], ref=99)
    verdict = verify_chain(records)
    assert verdict.broken_at == 12
    assert str(verdict) == "broken at record 12"


def test_truncated_tail_is_detected(log):
    assert not verify_chain(log.records()[:-1], log.head()).intact


def test_payloads_round_trip_and_resist_swaps(log):
    assert log.payload(3) == {"summary": "event 2", "i": 2}
    first, second = log.get(1), log.get(2)
    log._records[0] = replace(first, ciphertext=second.ciphertext)
    with pytest.raises(AuditError):
        log.payload(1)


def test_export_verifies_independently(platform, log):
    digest = log.export(5, 20)
    records = log.records()
    assert verify_export(digest, records, platform.device_public_key)
    assert digest.aic_fingerprints == frozenset({ACTOR})
    records[9] = replace(records[9], this_hash=b"\x00" * 32)
    assert not verify_export(digest, records, platform.device_public_key)
    with pytest.raises(AuditError):
        log.export(0, 5)
    assert json.loads(json.dumps(digest.to_json()))["first"] == 5


def test_erase_session_keeps_chain_and_signs_tombstone(platform, log):
    tombstone = log.erase("session", ALICE)
    assert log.verify().intact
    erased = [r for r in log.records() if r.session == ALICE and r.event is not AuditEvent.TOMBSTONE]
    assert erased and all(r.erased for r in erased)
    assert all(not r.erased for r in log.records() if r.session == BOB)

    payload = log.payload(tombstone.record_id)
    assert payload["erased"] == [r.record_id for r in erased]
    root = merkle_root([r.this_hash for r in erased])
    assert payload["erased_root"] == root.hex()
    assert verify_signature(
        platform.device_public_key,
        tombstone_payload("session", ALICE, root),
        bytes.fromhex(payload["signature"]),
    )
    lines = log.summarize(ALICE)
    assert lines[0].endswith("1 event(s)")
    assert "TOMBSTONE" in lines[1]


def test_summary_lines_follow_record_order(platform):
    log = AuditLog(platform)
    log.append(AuditEvent.USER_INSTRUCTION, ALICE, ACTOR, {"summary": "book a table"})
    log.append(AuditEvent.DECISION, BOB, ACTOR, {"summary": "other session"})
    log.append(AuditEvent.SENSITIVE_OP, ALICE, ACTOR, {"summary": "payment"}, Severity.INFO)
    log.append(AuditEvent.AA_RESPONSE, ALICE, ACTOR, {"summary": "confirmed"})

    lines = log.summarize(ALICE)
    assert lines[0].endswith("3 event(s)")
    assert [line[2:].split()[0] for line in lines[1:]] == ["#1", "#3", "#4"]
    assert lines[2].startswith("! #3")
    assert "CRITICAL" in lines[2]
    assert all(line.startswith("  #") for line in (lines[1], lines[3]))


def test_summary_of_live_session_without_records(platform):
    log = AuditLog(platform, session_live=lambda session: session == ALICE)
    assert log.summarize(ALICE) == [f"Session {ALICE.hex()[:16]}: 0 event(s)"]
    with pytest.raises(UnknownSession):
        log.summarize(BOB)


def test_erase_rejects_unknown_scope(log):
    with pytest.raises(AuditError):
        log.erase("everything")


def test_reopen_with_same_device(tmp_path):
    path = tmp_path / "audit.jsonl"
    platform, _ = boot_platform(21)
    original = _fill(AuditLog(platform, path), 8)

    again, _ = boot_platform(21)
    reopened = AuditLog.open(path, again)
    assert reopened.records() == original.records()
    assert reopened.verify().intact
    assert reopened.payload(8) == {"summary": "event 7", "i": 7}

    stranger, _ = boot_platform(22)
    with pytest.raises(AuditError):
        AuditLog.open(path, stranger)
    with pytest.raises(AuditError):
        AuditLog.open(tmp_path / "missing.jsonl", again)


def test_edited_store_fails_verification(tmp_path):
    path = tmp_path / "audit.jsonl"
    platform, _ = boot_platform(21)
    _fill(AuditLog(platform, path), 6)
    lines = path.read_text().splitlines()
    record = json.loads(lines[3])
    record["severity"] = "CRITICAL" if record["severity"] != "CRITICAL" else "INFO"
    lines[3] = json.dumps(record)
    path.write_text("\n".join(lines) + "\n")

    again, _ = boot_platform(21)
    assert str(AuditLog.open(path, again).verify()) == "broken at record 3"


def test_dead_sessions_cannot_log_session_events(platform):
    log = AuditLog(platform, session_live=lambda session: False)
    with pytest.raises(AuditError):
        log.append(AuditEvent.DECISION, ALICE, ACTOR, {"summary": "late"})
    assert log.append(AuditEvent.AUTH, ALICE, ACTOR, {"summary": "auth"}).record_id == 1


def test_sensitive_ops_are_always_critical(platform):
    log = AuditLog(platform)
    record = log.append(AuditEvent.SENSITIVE_OP, ALICE, KERNEL_ACTOR, {"summary": "pay"}, Severity.INFO)
    assert record.severity is Severity.CRITICAL


def test_unwritable_store_fails_closed(tmp_path, platform):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(StoreUnavailable):
        AuditLog(platform, blocker / "audit.jsonl")
    assert platform.status is BootStatus.FAIL_CLOSED
    with pytest.raises(KernelUnavailable):
        AuditLog(platform)


def test_merkle_root_shapes():
    a, b, c = (hash_bytes(x) for x in (b"a", b"b", b"c"))
    assert merkle_root([]) == hash_bytes(b"")
    assert merkle_root([a]) == a
    assert merkle_root([a, b, c]) == hash_bytes(hash_bytes(a + b) + hash_bytes(c + c))
