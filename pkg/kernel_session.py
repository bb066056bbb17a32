"""Kernel-mediated mutual attestation: session tokens bound to processes, orchestration links, signing."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Protocol

from registry import (
    AgentDid,
    AgentIdentityCard,
    CapabilityBoundary,
    RevocationList,
    aic_fingerprint,
    verify_aic,
)
from trusted_platform import (
    KeyHandle,
    PlatformError,
    ProcessIdentity,
    TrustedPlatform,
    canonical_encode,
    verify_signature,
)

logger = logging.getLogger(__name__)


class SessionError(RuntimeError):
    """Base error for session operations."""


class InvalidAic(SessionError):
    pass


class RevokedAic(SessionError):
    pass


class ProofFailure(SessionError):
    pass


class FingerprintMismatch(SessionError):
    pass


class UnknownToken(SessionError):
    pass


class ProcessMismatch(SessionError):
    pass


class TokenInvalidated(SessionError):
    pass


class NotSystemAgent(SessionError):
    pass


class TargetUnavailable(SessionError):
    pass


class Role(str, Enum):
    SA = "SA"
    AA = "AA"


class TokenStatus(str, Enum):
    LIVE = "live"
    INVALIDATED = "invalidated"


@dataclass(frozen=True)
class SessionToken:
    token_id: bytes
    principal: AgentDid
    role: Role
    bound_process: ProcessIdentity
    s_max: CapabilityBoundary
    issued_at: int
    actor: bytes
    status: TokenStatus = TokenStatus.LIVE
    parent: bytes | None = None

    @property
    def live(self) -> bool:
        return self.status is TokenStatus.LIVE


@dataclass(frozen=True)
class TaskSpec:
    description: str
    api: str = ""
    options: dict = field(default_factory=dict, compare=False, hash=False)


class AuditSink(Protocol):
    def append(self, event: str, session: bytes, actor: bytes, payload: dict, severity: str = ...) -> Any: ...


def proof_payload(nonce: bytes, proc: ProcessIdentity) -> bytes:
    return canonical_encode("aura-auth", nonce, proc.pid, proc.uid, proc.code_fingerprint)


class AgentKernelSessions:
    """
    Token-to-process map plus the kernel's view of bound principals.

    Agents never hold key material: they get a handle at provisioning time and every
    signature passes through the kernel, which checks the caller against the map.
    """

    def __init__(
        self,
        platform: TrustedPlatform,
        revocations: Callable[[], RevocationList],
        gar_root: bytes,
        clock: Callable[[], int] = lambda: 0,
        audit: AuditSink | None = None,
    ) -> None:
        self._platform = platform
        self._revocations = revocations
        self._gar_root = gar_root
        self._clock = clock
        self._audit = audit
        self._rng = platform.derive_rng("session-tokens")
        self._lock = threading.RLock()
        self._tokens: dict[bytes, SessionToken] = {}
        self._issued_ids: set[bytes] = set()
        self._handles: dict[bytes, KeyHandle] = {}
        self._nonces: dict[int, bytes] = {}
        self._aics: dict[bytes, AgentIdentityCard] = {}
        self._exited: set[int] = set()

    def attach_audit(self, audit: AuditSink) -> None:
        self._audit = audit

    def _record(
        self, token: SessionToken, outcome: str, event: str = "AUTH", severity: str = "INFO", **detail: Any
    ) -> None:
        if self._audit is None:
            return
        payload = {
            "summary": f"{outcome} {token.principal.render()}",
            "outcome": outcome,
            "did": token.principal.render(),
            **detail,
        }
        self._audit.append(event, token.token_id, token.actor, payload, severity)

    def _reject(self, aic: AgentIdentityCard, reason: str) -> None:
        logger.warning("Authentication rejected for %s: %s", aic.did, reason)
        if self._audit is None:
            return
        payload = {
            "summary": f"rejected {aic.did.render()} ({reason})",
            "outcome": "rejected",
            "reason": reason,
            "blocked": True,
            "layer": "identity",
            "stage": "authentication",
        }
        self._audit.append("AUTH", b"", aic_fingerprint(aic), payload, "WARN")

    def bind_principal(self, aic: AgentIdentityCard, handle: KeyHandle) -> None:
        """Local binding of an installed agent's AIC to its vault handle."""
        self._platform.require_online()
        with self._lock:
            self._handles[aic.did.encode()] = handle

    def challenge(self, proc: ProcessIdentity) -> bytes:
        self._platform.require_online()
        with self._lock:
            nonce = self._rng.randbytes(32)
            self._nonces[proc.pid] = nonce
        return nonce

    def prove_possession(self, proc: ProcessIdentity, aic: AgentIdentityCard, nonce: bytes) -> bytes:
        """Signature over the kernel nonce, produced through the handle bound to the AIC's DID."""
        self._platform.require_online()
        handle = self._handles.get(aic.did.encode())
        if handle is None:
            raise ProofFailure(f"No key handle bound for {aic.did.render()}")
        try:
            return self._platform.vault_sign(handle, proc, proof_payload(nonce, proc))
        except PlatformError as exc:
            raise ProofFailure(f"Process {proc.pid} cannot use the handle for {aic.did.render()}") from exc

    def authenticate_agent(
        self,
        proc: ProcessIdentity,
        aic: AgentIdentityCard,
        proof: bytes,
        role: Role = Role.AA,
    ) -> SessionToken:
        self._platform.require_online()
        verdict = verify_aic(aic, self._revocations(), self._gar_root)
        if not verdict.valid:
            self._reject(aic, verdict.reason or "")
            if verdict.reason == "revoked":
                raise RevokedAic(f"AIC serial {aic.serial} is revoked")
            raise InvalidAic(f"AIC for {aic.did.render()} failed verification: {verdict.reason}")
        with self._lock:
            nonce = self._nonces.pop(proc.pid, None)
        if aic.did.bundle_fingerprint != proc.code_fingerprint:
            self._reject(aic, "fingerprint")
            raise FingerprintMismatch(
                f"Process {proc.pid} code does not match the bundle named in {aic.did.render()}"
            )
        if nonce is None or not verify_signature(aic.agent_pubkey, proof_payload(nonce, proc), proof):
            self._reject(aic, "proof")
            raise ProofFailure(f"Proof of possession failed for {aic.did.render()}")

        with self._lock:
            for token_id, existing in list(self._tokens.items()):
                if existing.live and existing.principal == aic.did:
                    self._tokens[token_id] = replace(existing, status=TokenStatus.INVALIDATED)
                    logger.info("Invalidated previous token for %s (pid %d)", aic.did, existing.bound_process.pid)
            token_id = self._fresh_token_id()
            token = SessionToken(
                token_id=token_id,
                principal=aic.did,
                role=Role(role),
                bound_process=proc,
                s_max=aic.s_max,
                issued_at=self._clock(),
                actor=aic_fingerprint(aic),
            )
            self._tokens[token_id] = token
            self._aics[token_id] = aic
        logger.info("Authenticated %s as %s (pid %d)", aic.did, token.role.value, proc.pid)
        self._record(token, "authenticated", role=token.role.value, serial=aic.serial)
        return token

    def _fresh_token_id(self) -> bytes:
        while True:
            token_id = self._rng.randbytes(16)
            if token_id not in self._issued_ids:
                self._issued_ids.add(token_id)
                return token_id

    def validate_call(self, token_id: bytes, caller: ProcessIdentity) -> SessionToken:
        self._platform.require_online()
        token = self._tokens.get(token_id)
        if token is None:
            raise UnknownToken("Session token is not known to the kernel")
        if token.bound_process != caller:
            logger.warning("Token for %s presented by foreign pid %d", token.principal, caller.pid)
            raise ProcessMismatch(f"Token is bound to pid {token.bound_process.pid}, not {caller.pid}")
        if not token.live:
            raise TokenInvalidated(f"Session token for {token.principal} is no longer live")
        return token

    def session(self, token_id: bytes) -> SessionToken:
        token = self._tokens.get(token_id)
        if token is None:
            raise UnknownToken("Session token is not known to the kernel")
        return token

    def aic_for(self, token_id: bytes) -> AgentIdentityCard:
        try:
            return self._aics[token_id]
        except KeyError:
            raise UnknownToken("Session token is not known to the kernel") from None

    def live_token_for(self, did: AgentDid) -> SessionToken | None:
        with self._lock:
            for token in self._tokens.values():
                if token.live and token.principal == did:
                    return token
        return None

    def invoke_agent(
        self, sa_token: bytes, target: AgentDid, task: TaskSpec, caller: ProcessIdentity
    ) -> SessionToken:
        parent = self.validate_call(sa_token, caller)
        if parent.role is not Role.SA:
            logger.warning("App agent %s attempted to orchestrate %s", parent.principal, target)
            self._record(parent, "orchestration-denied", severity="WARN", target=target.render())
            raise NotSystemAgent(f"{parent.principal} is not the system agent")
        with self._lock:
            child = self.live_token_for(target)
            if child is None:
                raise TargetUnavailable(f"No live session for {target.render()}")
            linked = replace(child, parent=parent.token_id)
            self._tokens[child.token_id] = linked
        self._record(linked, "invoked", target=target.render(), task=task.description, parent=parent.token_id.hex())
        return linked

    def kernel_sign(self, token_id: bytes, caller: ProcessIdentity, msg: bytes) -> bytes:
        token = self.validate_call(token_id, caller)
        handle = self._handles.get(token.principal.encode())
        if handle is None:
            raise UnknownToken(f"No key handle bound for {token.principal}")
        return self._platform.vault_sign(handle, caller, msg)

    def terminate(self, proc: ProcessIdentity) -> list[SessionToken]:
        """Process death: every token bound to proc is invalidated."""
        ended: list[SessionToken] = []
        with self._lock:
            for token_id, token in list(self._tokens.items()):
                if token.live and token.bound_process == proc:
                    ended.append(replace(token, status=TokenStatus.INVALIDATED))
                    self._tokens[token_id] = ended[-1]
            self._exited.add(proc.pid)
        for token in ended:
            logger.info("Process %d exited; token for %s invalidated", proc.pid, token.principal)
            self._record(token, "terminated", pid=proc.pid)
        return ended

    def rebind(self, old: ProcessIdentity, new: ProcessIdentity) -> list[KeyHandle]:
        """Hand the vault keys of an exited process to its restarted successor."""
        self._platform.require_online()
        with self._lock:
            if old.pid not in self._exited:
                raise ProcessMismatch(f"Process {old.pid} has not exited; its keys stay bound to it")
            moved: list[KeyHandle] = []
            for principal, handle in list(self._handles.items()):
                if handle.owner_binding == old:
                    self._handles[principal] = self._platform.rebind_key(handle, old, new)
                    moved.append(self._handles[principal])
        logger.info("Rebound %d key handle(s) from pid %d to pid %d", len(moved), old.pid, new.pid)
        return moved

    def sweep_revocations(self, rev: RevocationList | None = None) -> list[SessionToken]:
        rev = rev or self._revocations()
        swept: list[SessionToken] = []
        with self._lock:
            for token_id, token in list(self._tokens.items()):
                if token.live and self._aics[token_id].serial in rev.revoked_serials:
                    swept.append(replace(token, status=TokenStatus.INVALIDATED))
                    self._tokens[token_id] = swept[-1]
        for token in swept:
            logger.warning("Token for revoked agent %s invalidated", token.principal)
            self._record(token, "revoked", event="REVOCATION", severity="WARN", epoch=rev.epoch)
        return swept

    def tokens(self) -> list[SessionToken]:
        with self._lock:
            return list(self._tokens.values())


__all__ = [
    "AgentKernelSessions",
    "FingerprintMismatch",
    "InvalidAic",
    "NotSystemAgent",
    "ProcessMismatch",
    "ProofFailure",
    "RevokedAic",
    "Role",
    "SessionError",
    "SessionToken",
    "TargetUnavailable",
    "TaskSpec",
    "TokenInvalidated",
    "TokenStatus",
    "UnknownToken",
    "proof_payload",
]
