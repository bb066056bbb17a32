"""Mutual authentication and the token-to-process binding."""

import pytest

from kernel_session import (
    FingerprintMismatch,
    InvalidAic,
    NotSystemAgent,
    ProcessMismatch,
    ProofFailure,
    RevokedAic,
    TargetUnavailable,
    TaskSpec,
    TokenInvalidated,
    proof_payload,
)
from registry import AgentDid, AgentIdentityCard, AppCategory, SemanticPermission as P, aic_payload
from trusted_platform import KernelUnavailable, public_key_bytes, signing_key_from_rng, verify_signature

APPS = [
    ("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,)),
    ("memo", AppCategory.NOTES, (P.READ_NOTES, P.WRITE_STORAGE)),
    ("alarm", AppCategory.CLOCK, (P.WRITE_STORAGE,)),
    ("agenda", AppCategory.CALENDAR, (P.READ_CALENDAR,)),
]


def test_token_binding_cross_product(device):
    """A token validates for its own process and for no other."""
    installed = [device.install(name, category, perms) for name, category, perms in APPS]
    for _, _, token in installed:
        for proc, _, _ in installed:
            if proc == token.bound_process:
                assert device.kernel.sessions.validate_call(token.token_id, proc) == token
            else:
                with pytest.raises(ProcessMismatch):
                    device.kernel.sessions.validate_call(token.token_id, proc)


def test_reauthentication_invalidates_previous_token(device):
    proc, aic, old = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    restarted = device.processes.restart(proc)
    device.kernel.restart(proc, restarted)
    new = device.kernel.authenticate(restarted, aic)
    assert new.token_id != old.token_id
    with pytest.raises(TokenInvalidated):
        device.kernel.sessions.validate_call(old.token_id, proc)
    with pytest.raises(ProcessMismatch):
        device.kernel.sessions.validate_call(old.token_id, restarted)
    assert device.kernel.sessions.validate_call(new.token_id, restarted).live


def test_same_process_reauthentication_supersedes_token(device):
    proc, aic, old = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    new = device.kernel.authenticate(proc, aic)
    with pytest.raises(TokenInvalidated):
        device.kernel.sessions.validate_call(old.token_id, proc)
    assert device.kernel.sessions.validate_call(new.token_id, proc) == new


def test_restarted_process_needs_rebind(device):
    proc, aic, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    restarted = device.processes.restart(proc)
    with pytest.raises(ProofFailure):
        device.kernel.authenticate(restarted, aic)
    with pytest.raises(ProcessMismatch):
        device.kernel.sessions.rebind(proc, restarted)


def test_sibling_process_cannot_borrow_handle(device):
    proc, aic, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    sibling = device.processes.spawn(proc.code_fingerprint)
    assert sibling.same_principal(proc)
    nonce = device.kernel.challenge(sibling)
    with pytest.raises(ProofFailure):
        device.kernel.sessions.prove_possession(sibling, aic, nonce)
    with pytest.raises(ProcessMismatch):
        device.kernel.sessions.kernel_sign(token.token_id, sibling, b"payload")


def test_process_exit_invalidates_tokens(device):
    proc, _, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    ended = device.kernel.sessions.terminate(proc)
    assert [t.token_id for t in ended] == [token.token_id]
    with pytest.raises(TokenInvalidated):
        device.kernel.sessions.validate_call(token.token_id, proc)


def test_revoked_card_cannot_authenticate(device):
    proc, aic, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    rev = device.registry.revoke_aic(aic.serial, "compromised")
    swept = device.kernel.sessions.sweep_revocations(rev)
    assert [t.token_id for t in swept] == [token.token_id]
    with pytest.raises(RevokedAic):
        device.kernel.authenticate(proc, aic)


def test_foreign_process_cannot_use_handle(device):
    _, victim, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    intruder, _, _ = device.install("memo", AppCategory.NOTES, (P.READ_NOTES,))
    nonce = device.kernel.challenge(intruder)
    with pytest.raises(ProofFailure):
        device.kernel.sessions.prove_possession(intruder, victim, nonce)


def test_self_signed_card_rejected(device):
    proc = device.processes.spawn(b"\x05" * 32)
    key = signing_key_from_rng(device.platform.derive_rng("forger"))
    did = AgentDid("acme", proc.code_fingerprint, "owner")
    _, genuine, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    s_max = genuine.s_max
    public_key = public_key_bytes(key)
    forged = AgentIdentityCard(did, public_key, s_max, key.sign(aic_payload(did, public_key, s_max, 9)), 9)
    nonce = device.kernel.challenge(proc)
    with pytest.raises(InvalidAic):
        device.kernel.present(proc, forged, key.sign(proof_payload(nonce, proc)))


def test_proof_cannot_be_replayed(device):
    proc, aic, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    nonce = device.kernel.challenge(proc)
    proof = device.kernel.sessions.prove_possession(proc, aic, nonce)
    device.kernel.present(proc, aic, proof)
    with pytest.raises(ProofFailure):
        device.kernel.present(proc, aic, proof)


def test_only_the_system_agent_orchestrates(device):
    _, _, sa = device.install_sa()
    _, chat_aic, chat = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    _, memo_aic, _ = device.install("memo", AppCategory.NOTES, (P.READ_NOTES,))

    linked = device.kernel.invoke(sa, chat_aic.did, TaskSpec("send a message"))
    assert linked.parent == sa.token_id
    assert linked.token_id == chat.token_id
    with pytest.raises(NotSystemAgent):
        device.kernel.invoke(chat, memo_aic.did, TaskSpec("read memo"))


def test_kernel_sign_uses_bound_key(device):
    proc, aic, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    signature = device.kernel.sessions.kernel_sign(token.token_id, proc, b"payload")
    assert verify_signature(aic.agent_pubkey, b"payload", signature)
    other, _, _ = device.install("memo", AppCategory.NOTES, (P.READ_NOTES,))
    with pytest.raises(ProcessMismatch):
        device.kernel.sessions.kernel_sign(token.token_id, other, b"payload")


def test_fail_closed_stops_validation(device):
    proc, _, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    device.platform.enter_fail_closed("test")
    with pytest.raises(KernelUnavailable):
        device.kernel.sessions.validate_call(token.token_id, proc)


def test_card_for_other_bundle_is_a_fingerprint_mismatch(device):
    _, aic, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    repackaged = device.processes.spawn(b"\x06" * 32)
    device.kernel.challenge(repackaged)
    with pytest.raises(FingerprintMismatch):
        device.kernel.present(repackaged, aic, b"\x00" * 64)
    rejected = [r for r in device.kernel.audit.records() if r.event.value == "AUTH"][-1]
    assert device.kernel.audit.payload(rejected.record_id)["reason"] == "fingerprint"


def test_stale_system_agent_cannot_invoke(device):
    sa_proc, _, sa = device.install_sa()
    _, chat_aic, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    device.kernel.sessions.terminate(sa_proc)
    with pytest.raises(TokenInvalidated):
        device.kernel.invoke(sa, chat_aic.did, TaskSpec("send a message"))


def test_invoke_needs_a_live_target(device):
    _, _, sa = device.install_sa()
    chat_proc, chat_aic, _ = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    device.kernel.sessions.terminate(chat_proc)
    with pytest.raises(TargetUnavailable):
        device.kernel.invoke(sa, chat_aic.did, TaskSpec("send a message"))


def test_kernel_sign_after_revocation_sweep(device):
    proc, aic, token = device.install("chat", AppCategory.MESSAGING, (P.SEND_MESSAGE,))
    device.kernel.sessions.sweep_revocations(device.registry.revoke_aic(aic.serial, "compromised"))
    with pytest.raises(TokenInvalidated):
        device.kernel.sessions.kernel_sign(token.token_id, proc, b"payload")
