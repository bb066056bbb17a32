"""Secure boot, the handle-only vault and attestation."""

import pytest

from mock_apps import ProcessTable
from trusted_platform import (
    BOOT_CHAIN,
    MEASUREMENTS_PATH,
    PLATFORM,
    BootStatus,
    CallerMismatch,
    KernelUnavailable,
    PlatformError,
    ProcessIdentity,
    TrustedPlatform,
    boot_platform,
    canonical_decode,
    canonical_encode,
    default_boot_images,
    hash_bytes,
    load_expected_measurements,
    tamper_image,
    verify_attestation,
    verify_signature,
    write_expected_measurements,
)


def test_stock_images_match_fused_table():
    expected = load_expected_measurements(MEASUREMENTS_PATH)
    images = default_boot_images()
    assert list(expected) == list(BOOT_CHAIN)
    for stage in BOOT_CHAIN:
        assert expected[stage] == hash_bytes(images[stage])


def test_boot_online_with_fused_table():
    platform, outcome = boot_platform(7, measurements_path=MEASUREMENTS_PATH)
    assert outcome.online
    assert platform.status is BootStatus.ONLINE
    assert [m.stage_name for m in platform.measurements] == list(BOOT_CHAIN)
    assert outcome.token is not None
    assert verify_attestation(
        outcome.token, b"boot", platform.device_public_key, load_expected_measurements(MEASUREMENTS_PATH)
    )


@pytest.mark.parametrize("stage", BOOT_CHAIN)
def test_any_tampered_stage_fails_closed(stage):
    platform, outcome = boot_platform(7, tamper_stage=stage)
    assert not outcome.online
    assert outcome.failed_stage == stage
    assert platform.status is BootStatus.FAIL_CLOSED
    assert platform.vault.sealed
    with pytest.raises(KernelUnavailable):
        platform.issue_attestation(b"nonce")
    with pytest.raises(KernelUnavailable):
        platform.vault.generate_secret(PLATFORM)


def test_tamper_unknown_stage_rejected():
    with pytest.raises(PlatformError):
        tamper_image(default_boot_images(), "firmware")


def test_tamper_flips_exactly_one_byte():
    images = default_boot_images()
    tampered = tamper_image(images, "os-image")
    diff = [a != b for a, b in zip(images["os-image"], tampered["os-image"])]
    assert sum(diff) == 1
    assert tampered["boot-rom"] == images["boot-rom"]


def test_missing_image_fails_closed():
    images = default_boot_images()
    expected = {stage: hash_bytes(image) for stage, image in images.items()}
    del images["kernel-module"]
    platform = TrustedPlatform(1)
    outcome = platform.secure_boot(images, expected)
    assert outcome.failed_stage == "kernel-module"


def test_written_table_round_trips(tmp_path):
    path = tmp_path / "measurements.txt"
    write_expected_measurements(path, default_boot_images())
    assert load_expected_measurements(path) == load_expected_measurements(MEASUREMENTS_PATH)


def test_attestation_rejects_wrong_nonce_and_forged_measurements(platform):
    token = platform.issue_attestation(b"n1")
    key = platform.device_public_key
    assert verify_attestation(token, b"n1", key)
    assert not verify_attestation(token, b"n2", key)
    bogus = {stage: b"\x00" * 32 for stage in BOOT_CHAIN}
    assert not verify_attestation(token, b"n1", key, bogus)


def test_vault_handles_bind_to_exact_process(platform):
    """Every caller other than the bound process is refused, including a sibling of the same app."""
    table = ProcessTable()
    first = table.spawn(b"\x01" * 32)
    sibling = table.spawn(b"\x01" * 32)
    table.spawn(b"\x02" * 32)
    assert sibling.same_principal(first)
    callers = [*table.running(), PLATFORM]
    handles = {proc: platform.vault.generate_keypair(proc) for proc in table.running()}
    for owner, (handle, public_key) in handles.items():
        for caller in callers:
            if caller == owner:
                assert verify_signature(public_key, b"msg", platform.vault.vault_sign(handle, caller, b"msg"))
            else:
                with pytest.raises(CallerMismatch):
                    platform.vault.vault_sign(handle, caller, b"msg")


def test_vault_rebind_is_kernel_only(platform):
    table = ProcessTable()
    old = table.spawn(b"\x01" * 32)
    handle, public_key = platform.vault.generate_keypair(old)
    new = table.restart(old)
    stranger = table.spawn(b"\x02" * 32)

    with pytest.raises(CallerMismatch):
        platform.vault.rebind(handle, old, new, old)
    with pytest.raises(CallerMismatch):
        platform.vault.rebind(handle, old, stranger, PLATFORM)
    with pytest.raises(CallerMismatch):
        platform.vault.rebind(handle, new, new, PLATFORM)

    moved = platform.rebind_key(handle, old, new)
    assert moved.owner_binding == new
    assert verify_signature(public_key, b"msg", platform.vault.vault_sign(moved, new, b"msg"))
    with pytest.raises(CallerMismatch):
        platform.vault.vault_sign(moved, old, b"msg")


def test_platform_keys_refuse_app_callers(platform):
    handle = platform.vault.generate_secret(PLATFORM)
    app = ProcessIdentity(1000, 10000, b"\x01" * 32)
    with pytest.raises(CallerMismatch):
        platform.vault.vault_mac(handle, app, b"data")


def test_sealed_blob_is_authenticated(platform):
    handle = platform.vault.generate_secret(PLATFORM)
    blob = platform.vault.vault_seal(handle, PLATFORM, b"secret", b"aad")
    assert platform.vault.vault_open(handle, PLATFORM, blob, b"aad") == b"secret"
    with pytest.raises(PlatformError):
        platform.vault.vault_open(handle, PLATFORM, blob, b"other")


def test_same_seed_same_device_key():
    first, _ = boot_platform(11)
    second, _ = boot_platform(11)
    other, _ = boot_platform(12)
    assert first.device_public_key == second.device_public_key
    assert first.device_public_key != other.device_public_key


def test_canonical_encoding_is_unambiguous():
    assert canonical_encode("ab", "c") != canonical_encode("a", "bc")
    assert canonical_decode(canonical_encode(b"x", "yz")) == [b"x", b"yz"]
