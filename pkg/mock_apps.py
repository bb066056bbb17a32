"""Mock device: apps with structured APIs, the OS process table and a recording network endpoint."""

from __future__ import annotations

import copy
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import httpx

from registry import AppCategory
from trusted_platform import ProcessIdentity, hash_bytes

logger = logging.getLogger(__name__)

FIRST_PID = 1000
FIRST_UID = 10000


class MockAppError(RuntimeError):
    """Base error for mock app calls."""


class UnknownApi(MockAppError):
    pass


class MockNetwork:
    """In-process endpoints behind httpx.MockTransport; every delivered body is kept per host."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._delivered: dict[str, list[bytes]] = defaultdict(list)
        self.client = httpx.Client(transport=httpx.MockTransport(self._handle), timeout=5.0)

    def _handle(self, request: httpx.Request) -> httpx.Response:
        body = request.read()
        host = request.url.host
        with self._lock:
            self._delivered[host].append(body)
        logger.debug("Mock endpoint %s received %d byte(s)", host, len(body))
        return httpx.Response(200, json={"host": host, "received": len(body)})

    def send(self, host: str, payload: str) -> dict[str, Any]:
        try:
            response = self.client.post(f"https://{host}/", content=payload.encode("utf-8"))
            response.raise_for_status()
        except httpx.HTTPError as e:
            raise MockAppError(f"Mock endpoint {host} failed: {e}") from e
        return response.json()

    def delivered(self) -> dict[str, list[bytes]]:
        with self._lock:
            return {host: list(bodies) for host, bodies in self._delivered.items()}

    def bytes_to(self, host: str) -> bytes:
        with self._lock:
            return b"".join(self._delivered.get(host.lower(), []))

    def close(self) -> None:
        self.client.close()


Handler = Callable[[dict, Mapping[str, str], MockNetwork], str]


def _latest(entries: list[dict], *fields: str) -> str:
    if not entries:
        return "(empty)"
    entry = entries[-1]
    return " | ".join(f"{name}: {entry[name]}" for name in fields if name in entry)


def _send_message(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("outbox", []).append({"to": params.get("to", ""), "body": params.get("body", "")})
    return f"message sent to {params.get('to', '')}"


def _read_inbox(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    return _latest(state.get("inbox", []), "from", "subject", "body")


def _open_link(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    host = params["host"]
    network.send(host, params.get("body") or f"GET https://{host}/")
    state.setdefault("opened", []).append(host)
    return f"opened {host}"


def _search(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    network.send(params["host"], params.get("query", ""))
    state.setdefault("searches", []).append(params.get("query", ""))
    return state.get("offer", "no offers found")


def _pay(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("payments", []).append({"amount": params.get("amount", ""), "payee": params.get("payee", "")})
    return f"paid {params.get('amount', '')}"


def _transfer(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("transfers", []).append({"amount": params.get("amount", ""), "to": params.get("to", "")})
    return f"transferred {params.get('amount', '')}"


def _subscribe(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("subscriptions", []).append(params.get("plan", ""))
    return f"subscribed to {params.get('plan', '')}"


def _read_memo(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    memos = state.get("memos", {})
    title = params.get("title", "")
    if title not in memos:
        raise MockAppError(f"No memo titled {title!r}")
    return memos[title]


def _write_memo(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("memos", {})[params["title"]] = params.get("content", "")
    return f"memo {params['title']} saved"


def _create_note(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("notes", []).append({"title": params.get("title", ""), "content": params.get("content", "")})
    return f"note {params.get('title', '')} created"


def _set_alarm(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("alarms", []).append(params.get("time", ""))
    return f"alarm set for {params.get('time', '')}"


def _read_events(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    return "; ".join(state.get("events", [])) or "(no events)"


def _read_contacts(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    contacts = state.get("contacts", {})
    return "; ".join(f"{name}: {number}" for name, number in sorted(contacts.items())) or "(no contacts)"


def _get_location(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    return state.get("position", "unknown")


def _read_post(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    post = state.get("posts", {}).get(params.get("post_id", ""))
    if post is None:
        raise MockAppError(f"No post {params.get('post_id')!r}")
    return post["text"]


def _post_comment(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    post = state.get("posts", {}).get(params.get("post_id", ""))
    if post is None:
        raise MockAppError(f"No post {params.get('post_id')!r}")
    post.setdefault("comments", []).append(params.get("text", ""))
    return f"commented on {params['post_id']}"


def _install_package(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("installed", []).append(params.get("package", ""))
    return f"installed {params.get('package', '')}"


def _modify_setting(state: dict, params: Mapping[str, str], network: MockNetwork) -> str:
    state.setdefault("settings", {})[params["key"]] = params.get("value", "")
    return f"{params['key']} updated"


# api -> (handler, changes state)
API_TABLE: dict[str, tuple[Handler, bool]] = {
    "messaging.send_message": (_send_message, True),
    "messaging.read_inbox": (_read_inbox, False),
    "mail.read_inbox": (_read_inbox, False),
    "mail.open_link": (_open_link, True),
    "booking.search": (_search, True),
    "wallet.pay": (_pay, True),
    "wallet.transfer": (_transfer, True),
    "wallet.subscribe": (_subscribe, True),
    "notes.read_memo": (_read_memo, False),
    "notes.write_memo": (_write_memo, True),
    "notes.create_note": (_create_note, True),
    "clock.set_alarm": (_set_alarm, True),
    "calendar.read_events": (_read_events, False),
    "contacts.read_contacts": (_read_contacts, False),
    "location.get_location": (_get_location, False),
    "social.read_post": (_read_post, False),
    "social.post_comment": (_post_comment, True),
    "system.install_package": (_install_package, True),
    "settings.modify": (_modify_setting, True),
}


def is_mutating(api: str) -> bool:
    return api in API_TABLE and API_TABLE[api][1]


@dataclass(frozen=True)
class Effect:
    api: str
    params: tuple[tuple[str, str], ...]
    result: str


@dataclass
class MockApp:
    """
    One installed app. `name` is the install id (unique per device), `label` the API prefix
    users and planners refer to it by; a fake app shares the label of the app it imitates.
    """

    name: str
    label: str
    developer: str
    category: AppCategory
    network: MockNetwork
    state: dict = field(default_factory=dict)
    effects: list[Effect] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.category = AppCategory(self.category)
        self._lock = threading.RLock()

    @property
    def bundle(self) -> bytes:
        return f"aura-bundle:{self.developer}:{self.name}".encode("utf-8")

    @property
    def bundle_fingerprint(self) -> bytes:
        return hash_bytes(self.bundle)

    def apis(self) -> list[str]:
        return sorted(api for api in API_TABLE if api.split(".", 1)[0] == self.label)

    def call(self, api: str, params: Mapping[str, str]) -> str:
        if api.split(".", 1)[0] != self.label or api not in API_TABLE:
            raise UnknownApi(f"{self.name} has no API {api}")
        handler, mutating = API_TABLE[api]
        with self._lock:
            result = handler(self.state, params, self.network)
            if mutating:
                self.effects.append(Effect(api, tuple(sorted(params.items())), result))
        logger.info("%s handled %s", self.name, api)
        return result

    def target_of(self, api: str, params: Mapping[str, str]) -> tuple[str, frozenset[str]]:
        """Content and tags of the object an effect lands on, for app-side guardrails."""
        if api == "social.post_comment":
            with self._lock:
                post = self.state.get("posts", {}).get(params.get("post_id", ""), {})
            return post.get("text", ""), frozenset(post.get("tags", ()))
        return "", frozenset()

    def snapshot(self) -> dict:
        with self._lock:
            return copy.deepcopy(self.state)

    def mutate(self, change: Callable[[dict], None]) -> None:
        """Out-of-band state change (incoming mail, a third party editing a post)."""
        with self._lock:
            change(self.state)


class ProcessTable:
    """OS view of running app processes; pids are never reused."""

    def __init__(self, first_pid: int = FIRST_PID) -> None:
        self._lock = threading.Lock()
        self._next_pid = first_pid
        self._running: dict[int, ProcessIdentity] = {}
        self._uids: dict[bytes, int] = {}

    def spawn(self, code_fingerprint: bytes) -> ProcessIdentity:
        with self._lock:
            uid = self._uids.setdefault(code_fingerprint, FIRST_UID + len(self._uids))
            proc = ProcessIdentity(self._next_pid, uid, code_fingerprint)
            self._next_pid += 1
            self._running[proc.pid] = proc
        logger.debug("Spawned pid %d (uid %d)", proc.pid, proc.uid)
        return proc

    def terminate(self, proc: ProcessIdentity) -> None:
        with self._lock:
            self._running.pop(proc.pid, None)

    def restart(self, proc: ProcessIdentity) -> ProcessIdentity:
        self.terminate(proc)
        return self.spawn(proc.code_fingerprint)

    def alive(self, proc: ProcessIdentity) -> bool:
        with self._lock:
            return self._running.get(proc.pid) == proc

    def running(self) -> list[ProcessIdentity]:
        with self._lock:
            return [self._running[pid] for pid in sorted(self._running)]


__all__ = [
    "API_TABLE",
    "Effect",
    "MockApp",
    "MockAppError",
    "MockNetwork",
    "ProcessTable",
    "UnknownApi",
    "is_mutating",
]
