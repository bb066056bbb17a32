"""Simulated hardware root of trust: digests, a handle-only key vault, secure boot and attestation."""

from __future__ import annotations

import hashlib
import logging
import os
import random
import struct
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Union

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives import hmac as crypto_hmac
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat
from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

DEFAULT_SEED = int(os.getenv("AURA_SEED", "7"))
MEASUREMENTS_PATH = Path(
    os.getenv("AURA_MEASUREMENTS", str(Path(__file__).parent / "config" / "measurements.txt"))
)

BOOT_CHAIN: tuple[str, ...] = (
    "boot-rom",
    "bootloader",
    "os-image",
    "kernel-module",
    "policy-config",
)

PLATFORM = "platform"
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32


class PlatformError(RuntimeError):
    """Base error for the simulated trusted platform."""


class KernelUnavailable(PlatformError):
    """Raised by every kernel operation once the platform is not online."""


class CallerMismatch(PlatformError):
    pass


class UnknownHandle(PlatformError):
    pass


def hash_bytes(data: bytes) -> bytes:
    """SHA-256 digest used for measurements, audit chains and Merkle trees."""
    return hashlib.sha256(data).digest()


def _encode_field(value: Any) -> bytes:
    if isinstance(value, Enum):
        value = value.value
    if isinstance(value, bool):
        body = b"\x01" if value else b"\x00"
    elif isinstance(value, (bytes, bytearray)):
        body = bytes(value)
    elif isinstance(value, str):
        body = value.encode("utf-8")
    elif isinstance(value, int):
        body = value.to_bytes(8, "big", signed=True)
    elif isinstance(value, (list, tuple)):
        body = struct.pack(">I", len(value)) + b"".join(_encode_field(item) for item in value)
    elif value is None:
        body = b""
    else:
        raise TypeError(f"Cannot canonically encode {type(value).__name__}")
    return struct.pack(">I", len(body)) + body


def canonical_encode(*fields: Any) -> bytes:
    """Length-prefixed concatenation of fields in declared order."""
    return b"".join(_encode_field(field) for field in fields)


def canonical_decode(data: bytes) -> list[bytes]:
    """Split a canonical encoding back into its raw field bodies."""
    fields: list[bytes] = []
    offset = 0
    while offset < len(data):
        if offset + 4 > len(data):
            raise ValueError("Truncated length prefix")
        (length,) = struct.unpack(">I", data[offset : offset + 4])
        offset += 4
        if offset + length > len(data):
            raise ValueError("Field overruns buffer")
        fields.append(data[offset : offset + length])
        offset += length
    return fields


def decode_sequence(body: bytes) -> list[bytes]:
    if len(body) < 4:
        raise ValueError("Truncated sequence count")
    (count,) = struct.unpack(">I", body[:4])
    items = canonical_decode(body[4:])
    if len(items) != count:
        raise ValueError("Sequence count mismatch")
    return items


def decode_int(body: bytes) -> int:
    if len(body) != 8:
        raise ValueError("Integer fields are 8 bytes")
    return int.from_bytes(body, "big", signed=True)


def public_key_bytes(key: Ed25519PrivateKey) -> bytes:
    return key.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)


def verify_signature(public_key: bytes, msg: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, msg)
    except (InvalidSignature, ValueError):
        return False
    return True


def signing_key_from_rng(rng: random.Random) -> Ed25519PrivateKey:
    """Deterministic Ed25519 key for seeded simulations."""
    return Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))


@dataclass(frozen=True)
class ProcessIdentity:
    """OS security context of a process, taken from the process table."""

    pid: int
    uid: int
    code_fingerprint: bytes

    def same_principal(self, other: "ProcessIdentity") -> bool:
        return self.uid == other.uid and self.code_fingerprint == other.code_fingerprint


Owner = Union[ProcessIdentity, str]


@dataclass(frozen=True)
class KeyHandle:
    handle_id: bytes
    owner_binding: Owner

    def __repr__(self) -> str:
        return f"KeyHandle({self.handle_id.hex()})"


@dataclass(frozen=True)
class Measurement:
    stage_name: str
    digest: bytes


@dataclass(frozen=True)
class AttestationToken:
    measurements: tuple[Measurement, ...]
    device_key_fingerprint: bytes
    nonce: bytes
    signature: bytes

    def signed_payload(self) -> bytes:
        return attestation_payload(self.measurements, self.device_key_fingerprint, self.nonce)


def attestation_payload(
    measurements: tuple[Measurement, ...], device_key_fingerprint: bytes, nonce: bytes
) -> bytes:
    chain = [canonical_encode(m.stage_name, m.digest) for m in measurements]
    return canonical_encode(chain, device_key_fingerprint, nonce)


class BootStatus(str, Enum):
    PENDING = "pending"
    ONLINE = "online"
    FAIL_CLOSED = "fail_closed"


@dataclass(frozen=True)
class BootOutcome:
    status: BootStatus
    token: AttestationToken | None = None
    failed_stage: str | None = None

    @property
    def online(self) -> bool:
        return self.status is BootStatus.ONLINE


class KeyVault:
    """
    In-process stand-in for the TEE key store.

    Callers only ever see opaque handles; signing, MACs and sealing happen inside.
    """

    def __init__(self, rng: random.Random) -> None:
        self._rng = rng
        self._lock = threading.Lock()
        self._signing: dict[bytes, tuple[Ed25519PrivateKey, Owner]] = {}
        self._secrets: dict[bytes, tuple[bytes, Owner]] = {}
        self._sealed = False

    def seal(self) -> None:
        with self._lock:
            self._sealed = True
            self._signing.clear()
            self._secrets.clear()

    @property
    def sealed(self) -> bool:
        return self._sealed

    def _fresh_handle_id(self) -> bytes:
        while True:
            handle_id = self._rng.randbytes(16)
            if handle_id not in self._signing and handle_id not in self._secrets:
                return handle_id

    def generate_keypair(self, owner: Owner) -> tuple[KeyHandle, bytes]:
        with self._lock:
            if self._sealed:
                raise KernelUnavailable("Key vault is sealed (boot failed)")
            key = signing_key_from_rng(self._rng)
            handle_id = self._fresh_handle_id()
            self._signing[handle_id] = (key, owner)
        return KeyHandle(handle_id, owner), public_key_bytes(key)

    def generate_secret(self, owner: Owner) -> KeyHandle:
        with self._lock:
            if self._sealed:
                raise KernelUnavailable("Key vault is sealed (boot failed)")
            secret = self._rng.randbytes(32)
            handle_id = self._fresh_handle_id()
            self._secrets[handle_id] = (secret, owner)
        return KeyHandle(handle_id, owner)

    def public_key(self, handle: KeyHandle) -> bytes:
        key, _ = self._lookup_signing(handle)
        return public_key_bytes(key)

    def vault_sign(self, handle: KeyHandle, caller: Owner, msg: bytes) -> bytes:
        key, owner = self._lookup_signing(handle)
        _authorize(owner, caller)
        return key.sign(msg)

    def vault_mac(self, handle: KeyHandle, caller: Owner, data: bytes) -> bytes:
        secret, owner = self._lookup_secret(handle)
        _authorize(owner, caller)
        mac = crypto_hmac.HMAC(secret, hashes.SHA256())
        mac.update(data)
        return mac.finalize()

    def vault_seal(self, handle: KeyHandle, caller: Owner, plaintext: bytes, aad: bytes) -> bytes:
        secret, owner = self._lookup_secret(handle)
        _authorize(owner, caller)
        with self._lock:
            nonce = self._rng.randbytes(12)
        return nonce + AESGCM(secret).encrypt(nonce, plaintext, aad)

    def vault_open(self, handle: KeyHandle, caller: Owner, sealed: bytes, aad: bytes) -> bytes:
        secret, owner = self._lookup_secret(handle)
        _authorize(owner, caller)
        try:
            return AESGCM(secret).decrypt(sealed[:12], sealed[12:], aad)
        except InvalidTag as exc:
            raise PlatformError("Sealed blob failed authentication") from exc

    def rebind(self, handle: KeyHandle, old: ProcessIdentity, new: ProcessIdentity, caller: Owner) -> KeyHandle:
        """Move a handle from an exited process to its successor. Kernel only."""
        if caller != PLATFORM:
            raise CallerMismatch("Only the kernel can rebind a handle")
        if not new.same_principal(old) or new.pid == old.pid:
            raise CallerMismatch("Rebind target is not a successor of the bound process")
        with self._lock:
            for table in (self._signing, self._secrets):
                entry = table.get(handle.handle_id)
                if entry is None:
                    continue
                if entry[1] != old:
                    raise CallerMismatch("Handle is not bound to the exited process")
                table[handle.handle_id] = (entry[0], new)
                return KeyHandle(handle.handle_id, new)
        raise UnknownHandle(f"Unknown key handle {handle.handle_id.hex()}")

    def _lookup_signing(self, handle: KeyHandle) -> tuple[Ed25519PrivateKey, Owner]:
        if self._sealed:
            raise KernelUnavailable("Key vault is sealed (boot failed)")
        try:
            return self._signing[handle.handle_id]
        except KeyError:
            raise UnknownHandle(f"Unknown key handle {handle.handle_id.hex()}") from None

    def _lookup_secret(self, handle: KeyHandle) -> tuple[bytes, Owner]:
        if self._sealed:
            raise KernelUnavailable("Key vault is sealed (boot failed)")
        try:
            return self._secrets[handle.handle_id]
        except KeyError:
            raise UnknownHandle(f"Unknown key handle {handle.handle_id.hex()}") from None


def _authorize(owner: Owner, caller: Owner) -> None:
    if owner == PLATFORM:
        if caller != PLATFORM:
            raise CallerMismatch("Platform keys are usable by the kernel only")
        return
    if caller != owner:
        raise CallerMismatch("Caller is not the process bound to this handle")


class TrustedPlatform:
    """Root of trust for one simulated device."""

    def __init__(self, seed: int = DEFAULT_SEED) -> None:
        self.seed = seed
        self._rng_lock = threading.Lock()
        self._rng = random.Random(seed)
        self.vault = KeyVault(self.derive_rng("vault"))
        self._status = BootStatus.PENDING
        self._fail_reason: str | None = None
        self._measurements: tuple[Measurement, ...] = ()
        self._device_handle: KeyHandle | None = None
        self._device_public_key: bytes | None = None

    def derive_rng(self, label: str) -> random.Random:
        """Independent deterministic stream for a named consumer."""
        return random.Random(hash_bytes(canonical_encode(self.seed, label)))

    def random_bytes(self, n: int) -> bytes:
        with self._rng_lock:
            return self._rng.randbytes(n)

    @property
    def status(self) -> BootStatus:
        return self._status

    @property
    def fail_reason(self) -> str | None:
        return self._fail_reason

    def require_online(self) -> None:
        if self._status is not BootStatus.ONLINE:
            reason = self._fail_reason or "platform has not booted"
            raise KernelUnavailable(f"Agent kernel unavailable: {reason}")

    def secure_boot(
        self, images: Mapping[str, bytes], expected: Mapping[str, bytes]
    ) -> BootOutcome:
        measurements: list[Measurement] = []
        for stage in BOOT_CHAIN:
            image = images.get(stage)
            digest = hash_bytes(image) if image is not None else b""
            if image is None or digest != expected.get(stage):
                logger.error("Secure boot measurement mismatch at stage %s", stage)
                self.enter_fail_closed(f"measurement mismatch at {stage}")
                return BootOutcome(BootStatus.FAIL_CLOSED, failed_stage=stage)
            measurements.append(Measurement(stage, digest))

        self._measurements = tuple(measurements)
        self._device_handle, self._device_public_key = self.vault.generate_keypair(PLATFORM)
        self._status = BootStatus.ONLINE
        logger.info("Secure boot complete; %d stages measured", len(measurements))
        return BootOutcome(BootStatus.ONLINE, token=self.issue_attestation(b"boot"))

    def enter_fail_closed(self, reason: str) -> None:
        if self._status is BootStatus.FAIL_CLOSED:
            return
        logger.error("Platform entering fail-closed mode: %s", reason)
        self._status = BootStatus.FAIL_CLOSED
        self._fail_reason = reason
        self.vault.seal()

    @property
    def measurements(self) -> tuple[Measurement, ...]:
        return self._measurements

    @property
    def device_public_key(self) -> bytes:
        self.require_online()
        assert self._device_public_key is not None
        return self._device_public_key

    def issue_attestation(self, nonce: bytes) -> AttestationToken:
        self.require_online()
        assert self._device_handle is not None and self._device_public_key is not None
        fingerprint = hash_bytes(self._device_public_key)
        payload = attestation_payload(self._measurements, fingerprint, nonce)
        signature = self.vault.vault_sign(self._device_handle, PLATFORM, payload)
        return AttestationToken(self._measurements, fingerprint, nonce, signature)

    def device_sign(self, msg: bytes) -> bytes:
        """Sign with the device attestation key (exports, tombstones)."""
        self.require_online()
        assert self._device_handle is not None
        return self.vault.vault_sign(self._device_handle, PLATFORM, msg)

    def generate_keypair(self, owner: Owner) -> tuple[KeyHandle, bytes]:
        return self.vault.generate_keypair(owner)

    def vault_sign(self, handle: KeyHandle, caller: Owner, msg: bytes) -> bytes:
        return self.vault.vault_sign(handle, caller, msg)

    def rebind_key(self, handle: KeyHandle, old: ProcessIdentity, new: ProcessIdentity) -> KeyHandle:
        self.require_online()
        return self.vault.rebind(handle, old, new, PLATFORM)


def verify_attestation(
    token: AttestationToken,
    nonce: bytes,
    device_public_key: bytes,
    expected: Mapping[str, bytes] | None = None,
) -> bool:
    if token.nonce != nonce:
        return False
    if token.device_key_fingerprint != hash_bytes(device_public_key):
        return False
    if expected is not None:
        if [m.stage_name for m in token.measurements] != list(BOOT_CHAIN):
            return False
        if any(expected.get(m.stage_name) != m.digest for m in token.measurements):
            return False
    return verify_signature(device_public_key, token.signed_payload(), token.signature)


def default_boot_images() -> dict[str, bytes]:
    return {stage: f"aura-image:{stage}:v1".encode("utf-8") for stage in BOOT_CHAIN}


def tamper_image(images: Mapping[str, bytes], stage: str) -> dict[str, bytes]:
    """Copy of images with one byte of the given stage flipped."""
    if stage not in BOOT_CHAIN:
        raise PlatformError(f"Unknown boot stage {stage!r}")
    tampered = dict(images)
    image = bytearray(tampered[stage])
    image[0] ^= 0x01
    tampered[stage] = bytes(image)
    return tampered


def load_expected_measurements(path: Path | str = MEASUREMENTS_PATH) -> dict[str, bytes]:
    """Read the fused measurement table: `stage hexdigest` per line, '#' comments."""
    expected: dict[str, bytes] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        stage, hex_digest = line.split()
        expected[stage] = bytes.fromhex(hex_digest)
    return expected


def write_expected_measurements(path: Path | str, images: Mapping[str, bytes]) -> None:
    lines = ["# stage digest (sha256)"]
    lines += [f"{stage} {hash_bytes(images[stage]).hex()}" for stage in BOOT_CHAIN]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def boot_platform(
    seed: int = DEFAULT_SEED,
    tamper_stage: str | None = None,
    measurements_path: Path | str | None = None,
) -> tuple[TrustedPlatform, BootOutcome]:
    """Boot a fresh platform from the default images, optionally tampering one stage."""
    images = default_boot_images()
    if measurements_path is not None:
        expected = load_expected_measurements(measurements_path)
    else:
        expected = {stage: hash_bytes(image) for stage, image in images.items()}
    if tamper_stage:
        images = tamper_image(images, tamper_stage)
    platform = TrustedPlatform(seed)
    return platform, platform.secure_boot(images, expected)


__all__ = [
    "BOOT_CHAIN",
    "PLATFORM",
    "AttestationToken",
    "BootOutcome",
    "BootStatus",
    "CallerMismatch",
    "KernelUnavailable",
    "KeyHandle",
    "KeyVault",
    "Measurement",
    "PlatformError",
    "ProcessIdentity",
    "TrustedPlatform",
    "UnknownHandle",
    "boot_platform",
    "canonical_decode",
    "canonical_encode",
    "decode_int",
    "decode_sequence",
    "default_boot_images",
    "hash_bytes",
    "load_expected_measurements",
    "signing_key_from_rng",
    "tamper_image",
    "verify_attestation",
    "verify_signature",
    "write_expected_measurements",
]
