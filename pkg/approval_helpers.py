"""Human-in-the-loop approval providers: scripted decision files, terminal prompts and fixed answers."""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, TextIO

logger = logging.getLogger(__name__)

AUTHORIZE = "authorize"
REDACT = "redact"
DENY = "deny"
APPROVE = "approve"
TERMINATE = "terminate"


class ApprovalUnavailable(RuntimeError):
    """No decision could be obtained; callers fail closed."""


@dataclass(frozen=True)
class ApprovalPrompt:
    """Confirmation card shown to the user."""

    kind: str
    subject: str
    summary: str
    preview: str = ""
    choices: tuple[str, ...] = (APPROVE, DENY)

    @property
    def prompt_id(self) -> str:
        return f"{self.kind}:{self.subject}"

    def render(self) -> str:
        lines = [f"[{self.kind}] {self.summary}"]
        if self.preview:
            lines.append(f"  preview: {self.preview}")
        lines.append(f"  choices: {'/'.join(self.choices)}")
        return "\n".join(lines)


class ApprovalProvider(Protocol):
    def ask(self, prompt: ApprovalPrompt) -> str: ...


@dataclass
class ScriptedApproval:
    """
    Decisions keyed by prompt id, with "kind:*" and "*" wildcards.

    Every prompt asked is remembered in `asked` so tests can count re-prompts.
    """

    decisions: Mapping[str, str] = field(default_factory=dict)
    asked: list[ApprovalPrompt] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str) -> "ScriptedApproval":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise RuntimeError(f"Failed to load approval script {path}: {e}") from e
        if not isinstance(data, dict):
            raise RuntimeError(f"Approval script {path} must be a JSON object of prompt id -> decision")
        return cls(dict(data))

    def ask(self, prompt: ApprovalPrompt) -> str:
        with self._lock:
            self.asked.append(prompt)
        for key in (prompt.prompt_id, f"{prompt.kind}:*", "*"):
            if key in self.decisions:
                decision = self.decisions[key]
                break
        else:
            raise ApprovalUnavailable(f"No scripted decision for {prompt.prompt_id}")
        if decision not in prompt.choices:
            raise ApprovalUnavailable(f"Scripted decision {decision!r} is not offered for {prompt.prompt_id}")
        logger.info("Scripted approval %s -> %s", prompt.prompt_id, decision)
        return decision


@dataclass
class StaticApproval:
    """Answers every prompt with one decision when it is offered, otherwise the last choice."""

    decision: str

    def ask(self, prompt: ApprovalPrompt) -> str:
        return self.decision if self.decision in prompt.choices else prompt.choices[-1]


class UnavailableApproval:
    def ask(self, prompt: ApprovalPrompt) -> str:
        raise ApprovalUnavailable(f"No approval channel for {prompt.prompt_id}")


class InteractiveApproval:
    """Prints the confirmation card and reads the choice from a terminal."""

    def __init__(
        self,
        read: Callable[[str], str] = input,
        out: TextIO | None = None,
    ) -> None:
        self._read = read
        self._out = out
        self._lock = threading.Lock()

    def ask(self, prompt: ApprovalPrompt) -> str:
        shortcuts = {choice[0]: choice for choice in prompt.choices}
        with self._lock:
            print(prompt.render(), file=self._out)
            try:
                answer = self._read("> ").strip().lower()
            except EOFError as e:
                raise ApprovalUnavailable("Terminal closed while waiting for approval") from e
        if answer in prompt.choices:
            return answer
        if answer in ("y", "yes"):
            return prompt.choices[0]
        if answer in ("n", "no"):
            return prompt.choices[-1]
        if answer in shortcuts:
            return shortcuts[answer]
        raise ApprovalUnavailable(f"Unrecognised answer {answer!r} for {prompt.prompt_id}")


def ask_or_fail_closed(provider: ApprovalProvider, prompt: ApprovalPrompt, fallback: str) -> str:
    """Ask the provider; an unavailable provider yields the fail-closed fallback."""
    try:
        return provider.ask(prompt)
    except ApprovalUnavailable as e:
        logger.warning("Approval unavailable for %s (%s); failing closed", prompt.prompt_id, e)
        return fallback


__all__ = [
    "APPROVE",
    "AUTHORIZE",
    "DENY",
    "REDACT",
    "TERMINATE",
    "ApprovalPrompt",
    "ApprovalProvider",
    "ApprovalUnavailable",
    "InteractiveApproval",
    "ScriptedApproval",
    "StaticApproval",
    "UnavailableApproval",
    "ask_or_fail_closed",
]
