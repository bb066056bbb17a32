"""
Accountability log: hash-chained, AIC-attributed records with encrypted payloads.

Store layout (JSON lines):
    line 1   header  {"format", "genesis", "device"}
    line 2.. record  {"id", "session", "actor", "event", "severity", "payload_digest",
                      "ref", "prev_hash", "this_hash", "ciphertext"}

Chain fields stay in the clear so the chain verifies without the key; payloads are
AES-GCM sealed under a vault-held secret. An erased record keeps its chain fields and
loses its ciphertext.

Merkle roots: leaves are this_hash values in id order; each level pairs neighbours as
hash(left || right), duplicating the last node when a level is odd. One leaf is its own
root; the empty tree's root is hash(b"").
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

from trusted_platform import (
    PLATFORM,
    KeyHandle,
    PlatformError,
    TrustedPlatform,
    canonical_encode,
    hash_bytes,
    verify_signature,
)

logger = logging.getLogger(__name__)

STORE_FORMAT = "aura-audit/1"
GENESIS = hash_bytes(b"aura-audit-genesis")
KERNEL_ACTOR = hash_bytes(b"aura-kernel")
NO_SESSION = b""


class AuditEvent(str, Enum):
    USER_INSTRUCTION = "USER_INSTRUCTION"
    SA_REASONING = "SA_REASONING"
    AA_RESPONSE = "AA_RESPONSE"
    SENSITIVE_OP = "SENSITIVE_OP"
    DECISION = "DECISION"
    DECLASSIFY = "DECLASSIFY"
    ALERT = "ALERT"
    AUTH = "AUTH"
    REVOCATION = "REVOCATION"
    CONFIG = "CONFIG"
    TOMBSTONE = "TOMBSTONE"


class Severity(str, Enum):
    INFO = "INFO"
    WARN = "WARN"
    CRITICAL = "CRITICAL"


# Events accepted without a live session.
SESSIONLESS_EVENTS = frozenset(
    {AuditEvent.AUTH, AuditEvent.REVOCATION, AuditEvent.CONFIG, AuditEvent.TOMBSTONE}
)


class AuditError(RuntimeError):
    """Base error for the accountability log."""


class StoreUnavailable(AuditError):
    pass


class BrokenChain(AuditError):
    pass


class UnknownSession(AuditError):
    pass


@dataclass(frozen=True)
class AuditRecord:
    record_id: int
    session: bytes
    actor: bytes
    event: AuditEvent
    severity: Severity
    payload_digest: bytes
    ref: int
    prev_hash: bytes
    this_hash: bytes
    ciphertext: bytes | None = None

    def chained_fields(self) -> bytes:
        return record_hash_input(
            self.record_id,
            self.session,
            self.actor,
            self.event,
            self.severity,
            self.payload_digest,
            self.ref,
            self.prev_hash,
        )

    @property
    def erased(self) -> bool:
        return self.ciphertext is None

    def to_json(self) -> dict[str, Any]:
        return {
            "id": self.record_id,
            "session": self.session.hex(),
            "actor": self.actor.hex(),
            "event": self.event.value,
            "severity": self.severity.value,
            "payload_digest": self.payload_digest.hex(),
            "ref": self.ref,
            "prev_hash": self.prev_hash.hex(),
            "this_hash": self.this_hash.hex(),
            "ciphertext": self.ciphertext.hex() if self.ciphertext is not None else None,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "AuditRecord":
        ciphertext = data.get("ciphertext")
        return cls(
            record_id=int(data["id"]),
            session=bytes.fromhex(data["session"]),
            actor=bytes.fromhex(data["actor"]),
            event=AuditEvent(data["event"]),
            severity=Severity(data["severity"]),
            payload_digest=bytes.fromhex(data["payload_digest"]),
            ref=int(data.get("ref", 0)),
            prev_hash=bytes.fromhex(data["prev_hash"]),
            this_hash=bytes.fromhex(data["this_hash"]),
            ciphertext=bytes.fromhex(ciphertext) if ciphertext is not None else None,
        )


def record_hash_input(
    record_id: int,
    session: bytes,
    actor: bytes,
    event: AuditEvent,
    severity: Severity,
    payload_digest: bytes,
    ref: int,
    prev_hash: bytes,
) -> bytes:
    return canonical_encode(record_id, session, actor, event, severity, payload_digest, ref, prev_hash)


@dataclass(frozen=True)
class ChainVerdict:
    intact: bool
    broken_at: int | None = None

    def __str__(self) -> str:
        return "intact" if self.intact else f"broken at record {self.broken_at}"


def verify_chain(records: Sequence[AuditRecord], head: bytes | None = None) -> ChainVerdict:
    """Recompute every link from genesis. With `head`, a truncated tail is also detected."""
    expected_prev = GENESIS
    expected_id = 1
    for record in records:
        if (
            record.record_id != expected_id
            or record.prev_hash != expected_prev
            or hash_bytes(record.chained_fields()) != record.this_hash
        ):
            return ChainVerdict(False, record.record_id)
        expected_prev = record.this_hash
        expected_id += 1
    if head is not None and expected_prev != head:
        return ChainVerdict(False, expected_id)
    return ChainVerdict(True)


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    if not leaves:
        return hash_bytes(b"")
    level = list(leaves)
    while len(level) > 1:
        if len(level) % 2:
            level.append(level[-1])
        level = [hash_bytes(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
    return level[0]


@dataclass(frozen=True)
class ExportDigest:
    merkle_root: bytes
    record_range: tuple[int, int]
    aic_fingerprints: frozenset[bytes]
    signature: bytes

    def signed_payload(self) -> bytes:
        return export_payload(self.merkle_root, self.record_range, self.aic_fingerprints)

    def to_json(self) -> dict[str, Any]:
        return {
            "merkle_root": self.merkle_root.hex(),
            "first": self.record_range[0],
            "last": self.record_range[1],
            "aic_fingerprints": sorted(fp.hex() for fp in self.aic_fingerprints),
            "signature": self.signature.hex(),
        }


def export_payload(root: bytes, record_range: tuple[int, int], fingerprints: Iterable[bytes]) -> bytes:
    return canonical_encode("aura-export", root, record_range[0], record_range[1], sorted(fingerprints))


def verify_export(digest: ExportDigest, records: Sequence[AuditRecord], device_public_key: bytes) -> bool:
    """Independent check of an export against the records it claims to cover."""
    first, last = digest.record_range
    selected = [r for r in records if first <= r.record_id <= last]
    if len(selected) != last - first + 1:
        return False
    if merkle_root([r.this_hash for r in selected]) != digest.merkle_root:
        return False
    if frozenset(r.actor for r in selected) != digest.aic_fingerprints:
        return False
    return verify_signature(device_public_key, digest.signed_payload(), digest.signature)


def tombstone_payload(scope: str, target: bytes, erased_root: bytes) -> bytes:
    return canonical_encode("aura-tombstone", scope, target, erased_root)


def load_records(lines: Iterable[str]) -> tuple[dict[str, Any], list[AuditRecord]]:
    """Parse a serialized store into its header and records."""
    header: dict[str, Any] | None = None
    records: list[AuditRecord] = []
    for line in lines:
        if not line.strip():
            continue
        data = json.loads(line)
        if header is None:
            header = data
            continue
        records.append(AuditRecord.from_json(data))
    if header is None or header.get("format") != STORE_FORMAT:
        raise AuditError("Not an audit store")
    return header, records


class AuditLog:
    """Single serialized appender over the encrypted store."""

    def __init__(
        self,
        platform: TrustedPlatform,
        path: Path | str | None = None,
        session_live: Callable[[bytes], bool] | None = None,
    ) -> None:
        platform.require_online()
        self._platform = platform
        self._key: KeyHandle = platform.vault.generate_secret(PLATFORM)
        self._path = Path(path) if path else None
        self._session_live = session_live
        self._lock = threading.RLock()
        self._records: list[AuditRecord] = []
        self._head = GENESIS
        self._device = hash_bytes(platform.device_public_key)
        if self._path is not None:
            self._load_or_create()

    @classmethod
    def open(cls, path: Path | str, platform: TrustedPlatform) -> "AuditLog":
        if not Path(path).exists():
            raise AuditError(f"No audit store at {path}")
        return cls(platform, path)

    def _load_or_create(self) -> None:
        assert self._path is not None
        if self._path.exists() and self._path.stat().st_size > 0:
            header, records = load_records(self._path.read_text(encoding="utf-8").splitlines())
            if header.get("device") != self._device.hex():
                raise AuditError(f"Audit store {self._path} was written by another device key")
            self._records = records
            self._head = records[-1].this_hash if records else GENESIS
            logger.info("Opened audit store %s with %d records", self._path, len(records))
            return
        self._rewrite()

    def attach_session_check(self, session_live: Callable[[bytes], bool]) -> None:
        self._session_live = session_live

    def _header(self) -> dict[str, Any]:
        return {"format": STORE_FORMAT, "genesis": GENESIS.hex(), "device": self._device.hex()}

    def _rewrite(self) -> None:
        if self._path is None:
            return
        try:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            lines = [json.dumps(self._header(), sort_keys=True)]
            lines += [json.dumps(r.to_json(), sort_keys=True) for r in self._records]
            self._path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        except OSError as e:
            self._fail(e)

    def _persist(self, record: AuditRecord) -> None:
        if self._path is None:
            return
        try:
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
                fh.flush()
        except OSError as e:
            self._fail(e)

    def _fail(self, exc: Exception) -> None:
        self._platform.enter_fail_closed(f"audit store unavailable: {exc}")
        raise StoreUnavailable(f"Cannot persist audit record: {exc}") from exc

    def append(
        self,
        event: AuditEvent | str,
        session: bytes,
        actor: bytes,
        payload: dict[str, Any],
        severity: Severity | str = Severity.INFO,
        ref: int = 0,
    ) -> AuditRecord:
        event = AuditEvent(event)
        severity = Severity(severity)
        if event is AuditEvent.SENSITIVE_OP:
            severity = Severity.CRITICAL
        if (
            session != NO_SESSION
            and event not in SESSIONLESS_EVENTS
            and self._session_live is not None
            and not self._session_live(session)
        ):
            raise AuditError(f"{event.value} record for a session that is not live")
        plaintext = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
        digest = hash_bytes(plaintext)
        with self._lock:
            self._platform.require_online()
            record_id = len(self._records) + 1
            this_hash = hash_bytes(
                record_hash_input(record_id, session, actor, event, severity, digest, ref, self._head)
            )
            aad = canonical_encode(record_id, digest)
            ciphertext = self._platform.vault.vault_seal(self._key, PLATFORM, plaintext, aad)
            record = AuditRecord(
                record_id, session, actor, event, severity, digest, ref, self._head, this_hash, ciphertext
            )
            self._persist(record)
            self._records.append(record)
            self._head = this_hash
        logger.debug("audit #%d %s %s", record_id, event.value, severity.value)
        return record

    def flag(self, record_id: int, reason: str, session: bytes, actor: bytes = KERNEL_ACTOR) -> AuditRecord:
        """Post-hoc correction: an ALERT pointing back at an executed record."""
        return self.append(
            AuditEvent.ALERT,
            session,
            actor,
            {"summary": f"flagged #{record_id}: {reason}", "kind": "post-hoc", "reason": reason, "flagged": record_id},
            Severity.CRITICAL,
            ref=record_id,
        )

    def records(self) -> list[AuditRecord]:
        with self._lock:
            return list(self._records)

    def head(self) -> bytes:
        return self._head

    def get(self, record_id: int) -> AuditRecord:
        if not 1 <= record_id <= len(self._records):
            raise AuditError(f"No audit record {record_id}")
        return self._records[record_id - 1]

    def payload(self, record_id: int) -> dict[str, Any] | None:
        record = self.get(record_id)
        if record.ciphertext is None:
            return None
        aad = canonical_encode(record.record_id, record.payload_digest)
        try:
            plaintext = self._platform.vault.vault_open(self._key, PLATFORM, record.ciphertext, aad)
        except PlatformError as e:
            raise AuditError(f"Payload of record {record_id} failed authentication") from e
        if hash_bytes(plaintext) != record.payload_digest:
            raise AuditError(f"Payload of record {record_id} does not match its digest")
        return json.loads(plaintext)

    def verify(self) -> ChainVerdict:
        with self._lock:
            return verify_chain(self._records, self._head)

    def export(self, first: int = 1, last: int | None = None) -> ExportDigest:
        with self._lock:
            last = len(self._records) if last is None else last
            if not 1 <= first <= last <= len(self._records):
                raise AuditError(f"Export range {first}..{last} outside the log")
            verdict = verify_chain(self._records[:last])
            if not verdict.intact:
                raise BrokenChain(f"Cannot export: chain {verdict}")
            selected = self._records[first - 1 : last]
        root = merkle_root([r.this_hash for r in selected])
        fingerprints = frozenset(r.actor for r in selected)
        signature = self._platform.device_sign(export_payload(root, (first, last), fingerprints))
        logger.info("Exported records %d..%d, root %s", first, last, root.hex()[:16])
        return ExportDigest(root, (first, last), fingerprints, signature)

    def actor_names(self) -> dict[bytes, str]:
        """Actor fingerprint -> DID, resolved from authentication records."""
        names = {KERNEL_ACTOR: "kernel"}
        for record in self.records():
            if record.event is AuditEvent.AUTH and not record.erased:
                payload = self.payload(record.record_id) or {}
                if payload.get("did") and payload.get("outcome") == "authenticated":
                    names.setdefault(record.actor, payload["did"])
        return names

    def summarize(self, session: bytes) -> list[str]:
        """Transparency report for one session: one line per surviving record."""
        records = [r for r in self.records() if r.session == session]
        if not records and not (self._session_live is not None and self._session_live(session)):
            raise UnknownSession(f"No audit records for session {session.hex()}")
        names = self.actor_names()
        flagged = {r.ref for r in self.records() if r.event is AuditEvent.ALERT and r.ref}
        visible = [r for r in records if not r.erased or r.event is AuditEvent.TOMBSTONE]
        lines = [f"Session {session.hex()[:16]}: {len(visible)} event(s)"]
        for record in visible:
            payload = self.payload(record.record_id) or {}
            marker = "!" if record.severity is Severity.CRITICAL else " "
            actor = names.get(record.actor, record.actor.hex()[:12])
            detail = payload.get("summary", "")
            line = f"{marker} #{record.record_id} {actor} {record.event.value} {record.severity.value}"
            if detail:
                line += f" - {detail}"
            if record.record_id in flagged:
                line += " [flagged]"
            lines.append(line)
        return lines

    def sessions(self) -> list[bytes]:
        seen: dict[bytes, None] = {}
        for record in self.records():
            if record.session != NO_SESSION:
                seen.setdefault(record.session)
        return list(seen)

    def erase(self, scope: str, target: bytes = b"") -> AuditRecord:
        """Destroy payloads in scope and append a signed tombstone covering them."""
        if scope not in ("session", "agent", "all"):
            raise AuditError(f"Unknown erase scope {scope!r}")
        with self._lock:
            if scope == "session":
                selected = [r for r in self._records if r.session == target]
            elif scope == "agent":
                selected = [r for r in self._records if r.actor == target]
            else:
                selected = list(self._records)
            selected = [r for r in selected if r.event is not AuditEvent.TOMBSTONE]
            erased_ids = {r.record_id for r in selected}
            self._records = [
                replace(r, ciphertext=None) if r.record_id in erased_ids else r for r in self._records
            ]
            self._rewrite()
        erased_root = merkle_root([r.this_hash for r in selected])
        signature = self._platform.device_sign(tombstone_payload(scope, target, erased_root))
        logger.info("Erased %d audit payloads (scope %s)", len(erased_ids), scope)
        return self.append(
            AuditEvent.TOMBSTONE,
            target if scope == "session" else NO_SESSION,
            KERNEL_ACTOR,
            {
                "summary": f"erased {len(erased_ids)} record(s) ({scope})",
                "scope": scope,
                "target": target.hex(),
                "erased": sorted(erased_ids),
                "erased_root": erased_root.hex(),
                "signature": signature.hex(),
            },
            Severity.WARN,
        )


__all__ = [
    "GENESIS",
    "KERNEL_ACTOR",
    "NO_SESSION",
    "AuditError",
    "AuditEvent",
    "AuditLog",
    "AuditRecord",
    "BrokenChain",
    "ChainVerdict",
    "ExportDigest",
    "Severity",
    "StoreUnavailable",
    "UnknownSession",
    "export_payload",
    "load_records",
    "merkle_root",
    "tombstone_payload",
    "verify_chain",
    "verify_export",
]
