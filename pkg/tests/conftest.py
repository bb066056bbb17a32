import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from agent_kernel import ENFORCED, AgentKernel, KernelOptions  # noqa: E402
from kernel_session import Role  # noqa: E402
from mock_apps import ProcessTable  # noqa: E402
from registry import (  # noqa: E402
    COMPATIBILITY_MATRIX,
    AppCategory,
    CapabilityBoundary,
    DeveloperKey,
    DuplicateDeveloper,
    GlobalAgentRegistry,
)
from trusted_platform import boot_platform, hash_bytes  # noqa: E402

SEED = 7


class Device:
    """A booted platform with a kernel and a process table, for tests that need live sessions."""

    def __init__(self, seed=SEED, mode=ENFORCED, optimistic=False, window=1, judges=None, audit_path=None):
        self.seed = seed
        self.platform, outcome = boot_platform(seed)
        assert outcome.online
        self.registry = GlobalAgentRegistry.from_seed(seed)
        self.kernel = AgentKernel(
            self.platform,
            self.registry,
            KernelOptions(mode=mode, optimistic=optimistic, window=window, cloud_verification="never"),
            judges=judges,
            audit_path=audit_path,
        )
        self.processes = ProcessTable()

    def developer(self, dev_id):
        key = DeveloperKey.derive(dev_id, self.seed)
        try:
            self.registry.enroll_developer(dev_id, key.public_key)
        except DuplicateDeveloper:
            pass
        return key

    def install(self, name, category, perms=(), hosts=(), developer="acme", role=Role.AA):
        proc = self.processes.spawn(hash_bytes(f"aura-bundle:{developer}:{name}".encode("utf-8")))
        s_max = CapabilityBoundary(frozenset(perms), frozenset(hosts))
        aic = self.kernel.provision(proc, self.developer(developer), s_max, AppCategory(category).value, "owner")
        token = self.kernel.authenticate(proc, aic, role)
        return proc, aic, token

    def install_sa(self):
        return self.install(
            "assistant",
            AppCategory.SYSTEM_ASSISTANT,
            COMPATIBILITY_MATRIX[AppCategory.SYSTEM_ASSISTANT],
            developer="aura-os",
            role=Role.SA,
        )

    def close(self):
        self.kernel.close()


@pytest.fixture
def platform():
    platform, outcome = boot_platform(SEED)
    assert outcome.online
    return platform


@pytest.fixture
def make_device():
    devices = []

    def make(**kwargs):
        devices.append(Device(**kwargs))
        return devices[-1]

    yield make
    for device in devices:
        device.close()


@pytest.fixture
def device(make_device):
    return make_device()


@pytest.fixture
def repo_root() -> Path:
    return Path(__file__).parent.parent
