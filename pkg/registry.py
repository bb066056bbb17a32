"""Global Agent Registry: developer enrollment, AIC issuance, manifest vetting and revocation."""

from __future__ import annotations

import json
import logging
import random
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable

from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from trusted_platform import (
    canonical_decode,
    canonical_encode,
    decode_int,
    decode_sequence,
    hash_bytes,
    public_key_bytes,
    signing_key_from_rng,
    verify_signature,
)

logger = logging.getLogger(__name__)

_NAME_PATTERN = re.compile(r"^[A-Za-z0-9._-]+$")


class SemanticPermission(str, Enum):
    READ_CONTACTS = "READ_CONTACTS"
    ACCESS_FINE_LOCATION = "ACCESS_FINE_LOCATION"
    RECORD_AUDIO = "RECORD_AUDIO"
    SEND_MESSAGE = "SEND_MESSAGE"
    PAYMENT = "PAYMENT"
    WRITE_STORAGE = "WRITE_STORAGE"
    INSTALL_PACKAGES = "INSTALL_PACKAGES"
    MODIFY_SETTINGS = "MODIFY_SETTINGS"
    NETWORK_EGRESS = "NETWORK_EGRESS"
    READ_NOTES = "READ_NOTES"
    READ_CALENDAR = "READ_CALENDAR"


class AppCategory(str, Enum):
    CALCULATOR = "CALCULATOR"
    MESSAGING = "MESSAGING"
    MAIL = "MAIL"
    BOOKING = "BOOKING"
    WALLET = "WALLET"
    NOTES = "NOTES"
    CLOCK = "CLOCK"
    CALENDAR = "CALENDAR"
    CONTACTS = "CONTACTS"
    NAVIGATION = "NAVIGATION"
    SOCIAL = "SOCIAL"
    VOICE_RECORDER = "VOICE_RECORDER"
    APP_STORE = "APP_STORE"
    UTILITY = "UTILITY"
    SYSTEM_ASSISTANT = "SYSTEM_ASSISTANT"


P = SemanticPermission

# Platform policy: the permissions an app of each category may ever declare.
COMPATIBILITY_MATRIX: dict[AppCategory, frozenset[SemanticPermission]] = {
    AppCategory.CALCULATOR: frozenset(),
    AppCategory.MESSAGING: frozenset({P.SEND_MESSAGE, P.READ_CONTACTS, P.NETWORK_EGRESS}),
    AppCategory.MAIL: frozenset({P.SEND_MESSAGE, P.READ_CONTACTS, P.NETWORK_EGRESS, P.WRITE_STORAGE}),
    AppCategory.BOOKING: frozenset({P.NETWORK_EGRESS, P.READ_CALENDAR, P.PAYMENT}),
    AppCategory.WALLET: frozenset({P.PAYMENT, P.NETWORK_EGRESS}),
    AppCategory.NOTES: frozenset({P.READ_NOTES, P.WRITE_STORAGE}),
    AppCategory.CLOCK: frozenset({P.WRITE_STORAGE, P.MODIFY_SETTINGS}),
    AppCategory.CALENDAR: frozenset({P.READ_CALENDAR, P.WRITE_STORAGE}),
    AppCategory.CONTACTS: frozenset({P.READ_CONTACTS, P.WRITE_STORAGE}),
    AppCategory.NAVIGATION: frozenset({P.ACCESS_FINE_LOCATION, P.NETWORK_EGRESS}),
    AppCategory.SOCIAL: frozenset({P.NETWORK_EGRESS, P.WRITE_STORAGE, P.READ_CONTACTS}),
    AppCategory.VOICE_RECORDER: frozenset({P.RECORD_AUDIO, P.WRITE_STORAGE}),
    AppCategory.APP_STORE: frozenset({P.INSTALL_PACKAGES, P.NETWORK_EGRESS}),
    AppCategory.UTILITY: frozenset({P.WRITE_STORAGE}),
    AppCategory.SYSTEM_ASSISTANT: frozenset(
        {P.MODIFY_SETTINGS, P.READ_CONTACTS, P.READ_CALENDAR, P.READ_NOTES}
    ),
}


class RegistryError(RuntimeError):
    """Base error for registry operations."""


class DuplicateDeveloper(RegistryError):
    pass


class UnknownDeveloper(RegistryError):
    pass


class BadManifestSignature(RegistryError):
    pass


class PolicyViolation(RegistryError):
    def __init__(self, reason: str) -> None:
        super().__init__(f"Policy violation: {reason}")
        self.reason = reason


class UnknownCategory(RegistryError):
    pass


class UnknownSerial(RegistryError):
    pass


class RevokedPrincipal(RegistryError):
    pass


class MalformedCredential(RegistryError):
    pass


@dataclass(frozen=True)
class CapabilityBoundary:
    """S_max: permission ceiling plus the declared egress domains."""

    permissions: frozenset[SemanticPermission] = frozenset()
    domain_allowlist: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        perms = frozenset(SemanticPermission(p) for p in self.permissions)
        hosts = frozenset(h.strip().lower() for h in self.domain_allowlist)
        object.__setattr__(self, "permissions", perms)
        object.__setattr__(self, "domain_allowlist", hosts)
        has_egress = SemanticPermission.NETWORK_EGRESS in perms
        if has_egress != bool(hosts):
            raise PolicyViolation("domain allowlist must be nonempty exactly when NETWORK_EGRESS is declared")

    def encode(self) -> bytes:
        return canonical_encode(
            sorted(p.value for p in self.permissions),
            sorted(self.domain_allowlist),
        )

    @classmethod
    def decode(cls, data: bytes) -> "CapabilityBoundary":
        perms_body, hosts_body = canonical_decode(data)
        try:
            perms = [SemanticPermission(p.decode("utf-8")) for p in decode_sequence(perms_body)]
        except ValueError as exc:
            raise MalformedCredential("unknown permission in capability boundary") from exc
        hosts = [h.decode("utf-8") for h in decode_sequence(hosts_body)]
        return cls(frozenset(perms), frozenset(hosts))


@dataclass(frozen=True)
class AgentDid:
    developer: str
    bundle_fingerprint: bytes
    user_account: str

    def __post_init__(self) -> None:
        for part in (self.developer, self.user_account):
            if not _NAME_PATTERN.match(part):
                raise ValueError(f"Invalid DID component {part!r}")
        if len(self.bundle_fingerprint) != 32:
            raise ValueError("bundle fingerprint must be a 32-byte digest")

    def render(self) -> str:
        return f"did:aura:{self.developer}:{self.bundle_fingerprint.hex()}:{self.user_account}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "AgentDid":
        parts = text.split(":")
        if len(parts) != 5 or parts[:2] != ["did", "aura"]:
            raise ValueError(f"Not an aura DID: {text!r}")
        return cls(parts[2], bytes.fromhex(parts[3]), parts[4])

    def encode(self) -> bytes:
        return canonical_encode(self.developer, self.bundle_fingerprint, self.user_account)


@dataclass(frozen=True)
class DeveloperIdentity:
    dev_id: str
    dev_pubkey: bytes
    status: str = "active"


@dataclass(frozen=True)
class AgentIdentityCard:
    did: AgentDid
    agent_pubkey: bytes
    s_max: CapabilityBoundary
    gar_signature: bytes
    serial: int

    def signed_payload(self) -> bytes:
        return aic_payload(self.did, self.agent_pubkey, self.s_max, self.serial)


def aic_payload(did: AgentDid, agent_pubkey: bytes, s_max: CapabilityBoundary, serial: int) -> bytes:
    return canonical_encode(did.encode(), agent_pubkey, s_max.encode(), serial)


def manifest_payload(did: AgentDid, s_max: CapabilityBoundary) -> bytes:
    return canonical_encode(did.encode(), s_max.encode())


def encode_aic(aic: AgentIdentityCard) -> bytes:
    return canonical_encode(
        aic.did.encode(), aic.agent_pubkey, aic.s_max.encode(), aic.serial, aic.gar_signature
    )


def decode_aic(blob: bytes) -> AgentIdentityCard:
    """Strict decoder: the blob must re-encode to itself."""
    try:
        did_body, pubkey, s_max_body, serial_body, signature = canonical_decode(blob)
        developer, bundle, user = canonical_decode(did_body)
        aic = AgentIdentityCard(
            did=AgentDid(developer.decode("utf-8"), bundle, user.decode("utf-8")),
            agent_pubkey=pubkey,
            s_max=CapabilityBoundary.decode(s_max_body),
            gar_signature=signature,
            serial=decode_int(serial_body),
        )
    except (ValueError, RegistryError, UnicodeDecodeError) as exc:
        raise MalformedCredential(f"Cannot decode AIC: {exc}") from exc
    if encode_aic(aic) != blob:
        raise MalformedCredential("AIC encoding is not canonical")
    return aic


def aic_fingerprint(aic: AgentIdentityCard) -> bytes:
    return hash_bytes(encode_aic(aic))


@dataclass(frozen=True)
class RevocationList:
    revoked_serials: frozenset[int]
    epoch: int
    list_signature: bytes

    def signed_payload(self) -> bytes:
        return revocation_payload(self.revoked_serials, self.epoch)


def revocation_payload(serials: Iterable[int], epoch: int) -> bytes:
    return canonical_encode(sorted(serials), epoch)


@dataclass(frozen=True)
class AicVerdict:
    valid: bool
    reason: str | None = None


def vet_manifest(category: AppCategory | str, s_max: CapabilityBoundary) -> None:
    """Raise PolicyViolation unless s_max fits the category's permitted set."""
    try:
        category = AppCategory(category)
    except ValueError:
        raise UnknownCategory(f"Unknown app category {category!r}") from None
    allowed = COMPATIBILITY_MATRIX[category]
    excess = s_max.permissions - allowed
    if excess:
        names = ", ".join(sorted(p.value for p in excess))
        raise PolicyViolation(f"{category.value} apps may not request {names}")


def verify_aic(aic: AgentIdentityCard, rev: RevocationList, gar_root: bytes) -> AicVerdict:
    if not verify_signature(gar_root, rev.signed_payload(), rev.list_signature):
        return AicVerdict(False, "revocation-list")
    if not verify_signature(gar_root, aic.signed_payload(), aic.gar_signature):
        return AicVerdict(False, "signature")
    if aic.serial in rev.revoked_serials:
        return AicVerdict(False, "revoked")
    return AicVerdict(True)


@dataclass
class DeveloperKey:
    """Simulated hardware-backed developer signing key."""

    dev_id: str
    _key: Ed25519PrivateKey = field(repr=False)

    @classmethod
    def derive(cls, dev_id: str, seed: int) -> "DeveloperKey":
        rng = random.Random(hash_bytes(canonical_encode(seed, "developer", dev_id)))
        return cls(dev_id, signing_key_from_rng(rng))

    @property
    def public_key(self) -> bytes:
        return public_key_bytes(self._key)

    def sign_manifest(self, did: AgentDid, s_max: CapabilityBoundary) -> bytes:
        return self._key.sign(manifest_payload(did, s_max))


@dataclass(frozen=True)
class IssuedCard:
    aic: AgentIdentityCard
    category: AppCategory


class GlobalAgentRegistry:
    """
    Single in-process GAR with an append-only record file.

    Issuance and revocation are serialized under one lock; verify_aic is a pure function.
    """

    def __init__(self, root_key: Ed25519PrivateKey, record_path: Path | str | None = None) -> None:
        self._root_key = root_key
        self.root_public_key = public_key_bytes(root_key)
        self._lock = threading.RLock()
        self._developers: dict[str, DeveloperIdentity] = {}
        self._issued: dict[int, IssuedCard] = {}
        self._revoked: dict[int, str] = {}
        self._epoch = 0
        self._next_serial = 1
        self._record_path = Path(record_path) if record_path else None
        self._replaying = False
        self._revocations = self._publish()

    @classmethod
    def from_seed(cls, seed: int, record_path: Path | str | None = None) -> "GlobalAgentRegistry":
        rng = random.Random(hash_bytes(canonical_encode(seed, "gar-root")))
        registry = cls(signing_key_from_rng(rng), record_path)
        if registry._record_path and registry._record_path.exists():
            registry._replay(registry._record_path)
        return registry

    @classmethod
    def from_record_file(cls, path: Path | str, seed: int, read_only: bool = False) -> "GlobalAgentRegistry":
        """Replay the record file; read_only keeps later issuance out of it."""
        if not read_only:
            return cls.from_seed(seed, path)
        registry = cls.from_seed(seed)
        if Path(path).exists():
            registry._replay(Path(path))
        return registry

    def _replay(self, path: Path) -> None:
        self._replaying = True
        try:
            for line in path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                record = json.loads(line)
                kind = record["kind"]
                if kind == "developer":
                    dev_id, pubkey = canonical_decode(bytes.fromhex(record["body"]))
                    self._developers[dev_id.decode("utf-8")] = DeveloperIdentity(
                        dev_id.decode("utf-8"), pubkey
                    )
                elif kind == "aic":
                    aic = decode_aic(bytes.fromhex(record["body"]))
                    if not verify_signature(self.root_public_key, aic.signed_payload(), aic.gar_signature):
                        raise RegistryError(f"Record file holds an AIC not signed by this root: {aic.serial}")
                    self._issued[aic.serial] = IssuedCard(aic, AppCategory(record["category"]))
                    self._next_serial = max(self._next_serial, aic.serial + 1)
                elif kind == "revocation":
                    self.revoke_aic(int(record["serial"]), record.get("reason", ""))
                else:
                    raise RegistryError(f"Unknown registry record kind {kind!r}")
        finally:
            self._replaying = False
        logger.info(
            "Registry replayed: %d developers, %d AICs, epoch %d",
            len(self._developers),
            len(self._issued),
            self._epoch,
        )

    def _append_record(self, record: dict) -> None:
        if self._record_path is None or self._replaying:
            return
        self._record_path.parent.mkdir(parents=True, exist_ok=True)
        with self._record_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _publish(self) -> RevocationList:
        self._epoch += 1
        serials = frozenset(self._revoked)
        signature = self._root_key.sign(revocation_payload(serials, self._epoch))
        self._revocations = RevocationList(serials, self._epoch, signature)
        return self._revocations

    def enroll_developer(self, dev_id: str, dev_pubkey: bytes) -> DeveloperIdentity:
        with self._lock:
            if dev_id in self._developers:
                raise DuplicateDeveloper(f"Developer {dev_id!r} already enrolled")
            if any(d.dev_pubkey == dev_pubkey and d.status == "active" for d in self._developers.values()):
                raise DuplicateDeveloper("Developer public key already bound to another developer")
            developer = DeveloperIdentity(dev_id, dev_pubkey)
            self._developers[dev_id] = developer
            self._append_record({"kind": "developer", "body": canonical_encode(dev_id, dev_pubkey).hex()})
        logger.info("Enrolled developer %s", dev_id)
        return developer

    def issue_aic(
        self,
        did: AgentDid,
        agent_pubkey: bytes,
        s_max: CapabilityBoundary,
        manifest_sig: bytes,
        category: AppCategory | str,
    ) -> AgentIdentityCard:
        with self._lock:
            developer = self._developers.get(did.developer)
            if developer is None or developer.status != "active":
                raise UnknownDeveloper(f"Developer {did.developer!r} is not enrolled")
            if not verify_signature(developer.dev_pubkey, manifest_payload(did, s_max), manifest_sig):
                raise BadManifestSignature(f"Manifest for {did.render()} is not signed by {did.developer}")
            vet_manifest(category, s_max)
            revoked = [s for s, card in self._issued.items() if card.aic.did == did and s in self._revoked]
            if revoked:
                raise RevokedPrincipal(f"{did.render()} was revoked (serial {revoked[0]}) and is not re-certified")
            serial = self._next_serial
            self._next_serial += 1
            signature = self._root_key.sign(aic_payload(did, agent_pubkey, s_max, serial))
            aic = AgentIdentityCard(did, agent_pubkey, s_max, signature, serial)
            self._issued[serial] = IssuedCard(aic, AppCategory(category))
            self._append_record(
                {"kind": "aic", "category": AppCategory(category).value, "body": encode_aic(aic).hex()}
            )
        logger.info("Issued AIC serial %d for %s", serial, did.render())
        return aic

    def revoke_aic(self, serial: int, reason: str) -> RevocationList:
        with self._lock:
            if serial not in self._issued:
                raise UnknownSerial(f"No AIC with serial {serial}")
            self._revoked.setdefault(serial, reason)
            revocations = self._publish()
            self._append_record({"kind": "revocation", "serial": serial, "reason": reason})
        logger.warning("Revoked AIC serial %d (%s); epoch %d", serial, reason, revocations.epoch)
        return revocations

    def latest_revocations(self) -> RevocationList:
        return self._revocations

    def verify(self, aic: AgentIdentityCard) -> AicVerdict:
        return verify_aic(aic, self._revocations, self.root_public_key)

    def issued(self) -> list[IssuedCard]:
        with self._lock:
            return [self._issued[s] for s in sorted(self._issued)]

    def category_of(self, serial: int) -> AppCategory:
        try:
            return self._issued[serial].category
        except KeyError:
            raise UnknownSerial(f"No AIC with serial {serial}") from None

    def show(self) -> list[str]:
        """Canonical listing: developers, cards, revocation state."""
        with self._lock:
            lines = [f"gar-root {self.root_public_key.hex()}"]
            for dev_id in sorted(self._developers):
                developer = self._developers[dev_id]
                lines.append(f"developer {dev_id} {developer.status} {developer.dev_pubkey.hex()}")
            for serial in sorted(self._issued):
                card = self._issued[serial]
                perms = ",".join(sorted(p.value for p in card.aic.s_max.permissions)) or "-"
                hosts = ",".join(sorted(card.aic.s_max.domain_allowlist)) or "-"
                state = "revoked" if serial in self._revoked else "valid"
                lines.append(
                    f"aic {serial} {state} {card.category.value} {card.aic.did.render()} perms={perms} hosts={hosts}"
                )
            lines.append(f"revocations epoch={self._epoch} serials={sorted(self._revoked)}")
        return lines


__all__ = [
    "COMPATIBILITY_MATRIX",
    "AgentDid",
    "AgentIdentityCard",
    "AicVerdict",
    "AppCategory",
    "BadManifestSignature",
    "CapabilityBoundary",
    "DeveloperIdentity",
    "DeveloperKey",
    "DuplicateDeveloper",
    "GlobalAgentRegistry",
    "MalformedCredential",
    "PolicyViolation",
    "RegistryError",
    "RevocationList",
    "RevokedPrincipal",
    "SemanticPermission",
    "UnknownCategory",
    "UnknownDeveloper",
    "UnknownSerial",
    "aic_fingerprint",
    "decode_aic",
    "encode_aic",
    "manifest_payload",
    "verify_aic",
    "vet_manifest",
]
