"""Critical-node registry: which mock APIs suspend execution, and the permissions each API needs."""

from __future__ import annotations

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Mapping

from dotenv import load_dotenv

load_dotenv()

logger = logging.getLogger(__name__)

CRITICAL_NODES_PATH = Path(
    os.getenv("AURA_CRITICAL_NODES", str(Path(__file__).parent / "config" / "critical_nodes.json"))
)


class CriticalNodeCategory(str, Enum):
    FINANCIAL = "FINANCIAL"
    DATA_PERSISTENCE = "DATA_PERSISTENCE"
    PRIVACY_ACCESS = "PRIVACY_ACCESS"
    SYSTEM_INTEGRITY = "SYSTEM_INTEGRITY"
    NETWORK_EGRESS = "NETWORK_EGRESS"


HIGH_RISK_CATEGORIES: frozenset[CriticalNodeCategory] = frozenset(
    {CriticalNodeCategory.FINANCIAL, CriticalNodeCategory.SYSTEM_INTEGRITY}
)

# Default P_req per API when a planned step declares none.
API_PERMISSIONS: dict[str, frozenset[str]] = {
    "wallet.pay": frozenset({"PAYMENT"}),
    "wallet.transfer": frozenset({"PAYMENT"}),
    "wallet.subscribe": frozenset({"PAYMENT"}),
    "notes.write_memo": frozenset({"WRITE_STORAGE"}),
    "notes.create_note": frozenset({"WRITE_STORAGE"}),
    "notes.read_memo": frozenset({"READ_NOTES"}),
    "clock.set_alarm": frozenset({"MODIFY_SETTINGS"}),
    "social.post_comment": frozenset({"WRITE_STORAGE"}),
    "social.read_post": frozenset(),
    "contacts.read_contacts": frozenset({"READ_CONTACTS"}),
    "location.get_location": frozenset({"ACCESS_FINE_LOCATION"}),
    "calendar.read_events": frozenset({"READ_CALENDAR"}),
    "messaging.send_message": frozenset({"SEND_MESSAGE"}),
    "messaging.read_inbox": frozenset({"READ_CONTACTS"}),
    "system.install_package": frozenset({"INSTALL_PACKAGES"}),
    "settings.modify": frozenset({"MODIFY_SETTINGS"}),
    "booking.search": frozenset({"NETWORK_EGRESS"}),
    "mail.open_link": frozenset({"NETWORK_EGRESS"}),
    "mail.read_inbox": frozenset({"READ_CONTACTS"}),
}


class CriticalNodeRegistry:
    """category -> mock API names, inverted for lookup."""

    def __init__(self, table: Mapping[str, list[str]]) -> None:
        self._by_api: dict[str, CriticalNodeCategory] = {}
        for category, apis in table.items():
            try:
                cat = CriticalNodeCategory(category)
            except ValueError:
                raise RuntimeError(f"Unknown critical node category {category!r}") from None
            for api in apis:
                if api in self._by_api:
                    raise RuntimeError(f"API {api} listed under two critical node categories")
                self._by_api[api] = cat

    @classmethod
    def load(cls, path: Path | str = CRITICAL_NODES_PATH) -> "CriticalNodeRegistry":
        try:
            table = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise RuntimeError(f"Failed to load critical node registry {path}: {e}") from e
        registry = cls(table)
        logger.debug("Loaded %d critical APIs from %s", len(registry._by_api), path)
        return registry

    def category_of(self, api: str) -> CriticalNodeCategory | None:
        return self._by_api.get(api)

    def is_critical(self, api: str) -> bool:
        return api in self._by_api

    def apis(self, category: CriticalNodeCategory) -> list[str]:
        return sorted(api for api, cat in self._by_api.items() if cat is category)


def default_permissions(api: str) -> frozenset[str]:
    return API_PERMISSIONS.get(api, frozenset())


__all__ = [
    "API_PERMISSIONS",
    "HIGH_RISK_CATEGORIES",
    "CriticalNodeCategory",
    "CriticalNodeRegistry",
    "default_permissions",
]
