import pytest

from critical_nodes import CriticalNodeCategory, CriticalNodeRegistry, default_permissions


def test_shipped_table_categories():
    registry = CriticalNodeRegistry.load()
    assert registry.category_of("wallet.pay") is CriticalNodeCategory.FINANCIAL
    assert registry.category_of("mail.open_link") is CriticalNodeCategory.NETWORK_EGRESS
    assert registry.category_of("messaging.read_inbox") is None
    assert registry.apis(CriticalNodeCategory.SYSTEM_INTEGRITY) == ["settings.modify", "system.install_package"]


def test_api_in_two_categories_is_rejected():
    with pytest.raises(RuntimeError):
        CriticalNodeRegistry({"FINANCIAL": ["wallet.pay"], "NETWORK_EGRESS": ["wallet.pay"]})


def test_unknown_category_is_rejected():
    with pytest.raises(RuntimeError):
        CriticalNodeRegistry({"TELEPORT": ["x.y"]})


def test_missing_table(tmp_path):
    with pytest.raises(RuntimeError):
        CriticalNodeRegistry.load(tmp_path / "none.json")


def test_default_permissions():
    assert default_permissions("wallet.transfer") == frozenset({"PAYMENT"})
    assert default_permissions("unknown.api") == frozenset()
