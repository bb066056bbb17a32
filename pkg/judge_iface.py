"""
Pluggable reasoning boundary.

Every LLM-shaped role (planner, action judge, intent judge, entity recognizer) sits behind
`Judge.judge(JudgeQuery)`. Defaults are deterministic rule engines; `FixtureJudge` replays
recorded verdicts and `ChatModelJudge` adapts any langchain-core chat model.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from concurrent.futures import TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Protocol, Sequence, runtime_checkable

from dotenv import load_dotenv
from langchain_core.messages import BaseMessage, HumanMessage

from critical_nodes import HIGH_RISK_CATEGORIES

if TYPE_CHECKING:
    from langchain_core.language_models import BaseChatModel

load_dotenv()

logger = logging.getLogger(__name__)

JUDGE_TIMEOUT = float(os.getenv("AURA_JUDGE_TIMEOUT", "10.0"))
JUDGE_FIXTURES_PATH = Path(
    os.getenv("AURA_JUDGE_FIXTURES", str(Path(__file__).parent / "config" / "judge_fixtures.json"))
)


class JudgeUnavailable(RuntimeError):
    """The judge could not produce a verdict; the caller applies its own fail direction."""


class JudgeRole(str, Enum):
    PLANNER = "PLANNER"
    ACTION_JUDGE = "ACTION_JUDGE"
    INTENT_JUDGE = "INTENT_JUDGE"
    RECOGNIZER = "RECOGNIZER"


DIRECT_PASS = "DirectPass"
USER_CONFIRMATION = "UserConfirmationRequired"
ALLOW = "allow"
REJECT = "reject"
ACT = "act"
IDLE = "idle"
FOUND = "found"
NONE_FOUND = "none"

DECISIONS: dict[JudgeRole, frozenset[str]] = {
    JudgeRole.PLANNER: frozenset({ACT, IDLE}),
    JudgeRole.ACTION_JUDGE: frozenset({DIRECT_PASS, USER_CONFIRMATION}),
    JudgeRole.INTENT_JUDGE: frozenset({ALLOW, REJECT}),
    JudgeRole.RECOGNIZER: frozenset({FOUND, NONE_FOUND}),
}


@runtime_checkable
class JudgeContext(Protocol):
    """Structured context a judge may read. Only kernel-built contexts qualify."""

    @property
    def firewall_built(self) -> bool: ...

    def digest(self) -> bytes: ...

    def to_messages(self) -> list[BaseMessage]: ...


@dataclass(frozen=True)
class JudgeQuery:
    role: JudgeRole
    context: JudgeContext
    options: Mapping[str, Any] = field(default_factory=dict, hash=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "role", JudgeRole(self.role))
        if not isinstance(self.context, JudgeContext) or not self.context.firewall_built:
            raise TypeError("Judge queries take kernel-built contexts only, never raw text")


@dataclass(frozen=True)
class JudgeVerdict:
    decision: str
    rationale: str = ""
    confidence: float = 1.0
    findings: tuple[Any, ...] = ()


def check_verdict(role: JudgeRole, verdict: JudgeVerdict) -> JudgeVerdict:
    """Reject verdicts whose decision falls outside the role's closed set."""
    if verdict.decision not in DECISIONS[JudgeRole(role)]:
        raise JudgeUnavailable(f"Judge returned {verdict.decision!r}, not a {role.value} decision")
    if not 0.0 <= verdict.confidence <= 1.0:
        raise JudgeUnavailable(f"Judge confidence {verdict.confidence} outside [0, 1]")
    return verdict


class Judge(Protocol):
    def judge(self, query: JudgeQuery) -> JudgeVerdict: ...


_LEET = str.maketrans({"0": "o", "1": "i", "3": "e", "4": "a", "5": "s", "7": "t", "@": "a", "$": "s"})
_NON_ALNUM = re.compile(r"[^a-z]+")

HARM_LEXICON: tuple[str, ...] = (
    "methamphetamine",
    "pseudoephedrine",
    "nerveagent",
    "pipebomb",
    "homemadeexplosive",
    "untraceablefirearm",
)

CONTENT_POLICY_LEXICON: tuple[str, ...] = (
    "subhuman",
    "vermin",
    "exterminate them",
    "inferior race",
)

_NEGATIVE_CONSTRAINT = re.compile(
    r"\b(?:do not|don't|never)\s+(?:include|share|forward|send|disclose|reveal)\s+(?:the\s+|my\s+|any\s+)?"
    r"([^.;,\n]+)",
    re.IGNORECASE,
)
_DIRECTIVE = re.compile(r"ACTION:\s*([a-z_]+)\.([a-z_]+)\(([^)]*)\)")


def collapse_obfuscation(text: str) -> str:
    """Lowercase, undo common digit substitutions and drop everything but letters."""
    return _NON_ALNUM.sub("", text.lower().translate(_LEET))


def negative_constraints(text: str) -> list[str]:
    return [m.group(1).strip() for m in _NEGATIVE_CONSTRAINT.finditer(text) if m.group(1).strip()]


_CONSTRAINT_FILLER = frozenset({"when", "with", "this", "that", "these", "those", "from", "into", "anyone", "sharing"})


def violates_negative_constraint(text: str) -> str | None:
    """First constrained word still present once the constraint phrases themselves are removed."""
    remainder = set(re.findall(r"[a-z0-9]+", _NEGATIVE_CONSTRAINT.sub(" ", text).lower()))
    for term in negative_constraints(text):
        for word in re.findall(r"[a-z0-9]+", term.lower()):
            if len(word) >= 4 and word not in _CONSTRAINT_FILLER and word in remainder:
                return word
    return None


def parse_directives(text: str) -> list[tuple[str, dict[str, str]]]:
    """`ACTION: app.api(k=v, ...)` lines found in text."""
    found: list[tuple[str, dict[str, str]]] = []
    for match in _DIRECTIVE.finditer(text):
        params: dict[str, str] = {}
        for pair in match.group(3).split(","):
            if "=" in pair:
                key, value = pair.split("=", 1)
                params[key.strip()] = value.strip()
        found.append((f"{match.group(1)}.{match.group(2)}", params))
    return found


class RuleJudge:
    """Deterministic defaults for every role."""

    def __init__(
        self,
        harm_lexicon: Sequence[str] = HARM_LEXICON,
        content_lexicon: Sequence[str] = CONTENT_POLICY_LEXICON,
        high_risk: frozenset[str] = HIGH_RISK_CATEGORIES,
    ) -> None:
        self.harm_lexicon = tuple(harm_lexicon)
        self.content_lexicon = tuple(term.lower() for term in content_lexicon)
        self.high_risk = frozenset(high_risk)

    def judge(self, query: JudgeQuery) -> JudgeVerdict:
        handler = {
            JudgeRole.PLANNER: self._plan,
            JudgeRole.ACTION_JUDGE: self._validate,
            JudgeRole.INTENT_JUDGE: self._intent,
            JudgeRole.RECOGNIZER: self._recognize,
        }[query.role]
        return check_verdict(query.role, handler(query.context))

    def _plan(self, context: Any) -> JudgeVerdict:
        directives: list[tuple[str, dict[str, str]]] = []
        for tag, body in context.instruction_segments():
            directives.extend(parse_directives(body))
        if not directives:
            return JudgeVerdict(IDLE, "no directive in instruction segments")
        return JudgeVerdict(ACT, f"{len(directives)} directive(s)", findings=tuple(directives))

    def _validate(self, context: Any) -> JudgeVerdict:
        category = context.category
        if category in self.high_risk:
            return JudgeVerdict(USER_CONFIRMATION, f"{category} actions always need the user")
        outbound = context.outbound_text()
        term = violates_negative_constraint(outbound)
        if term is not None:
            return JudgeVerdict(USER_CONFIRMATION, f"outbound text still contains {term!r} which the source excluded")
        lowered = outbound.lower()
        for word in self.content_lexicon:
            if word in lowered:
                return JudgeVerdict(USER_CONFIRMATION, f"content policy term {word!r}")
        return JudgeVerdict(DIRECT_PASS, "consistent with instruction and history")

    def _intent(self, context: Any) -> JudgeVerdict:
        collapsed = collapse_obfuscation(context.full_text())
        for term in self.harm_lexicon:
            if term in collapsed:
                return JudgeVerdict(REJECT, f"harmful request ({term})")
        return JudgeVerdict(ALLOW, "no harmful intent recognised")

    def _recognize(self, context: Any) -> JudgeVerdict:
        from firewall import GazetteerRecognizer

        entities = GazetteerRecognizer().recognize(context.user_text())
        if not entities:
            return JudgeVerdict(NONE_FOUND)
        return JudgeVerdict(FOUND, findings=tuple((e.kind.value, e.span[0], e.span[1]) for e in entities))


class FixtureJudge:
    """
    Replays recorded verdicts.

    Fixture keys are "<ROLE>:<key>" where key is options["fixture_key"] when given,
    otherwise the hex digest of the query context.
    """

    def __init__(self, fixtures: Mapping[str, Mapping[str, Any]]) -> None:
        self._fixtures = dict(fixtures)

    @classmethod
    def from_file(cls, path: Path | str = JUDGE_FIXTURES_PATH) -> "FixtureJudge":
        try:
            return cls(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise RuntimeError(f"Failed to load judge fixtures from {path}: {e}") from e

    @staticmethod
    def key_for(query: JudgeQuery) -> str:
        key = query.options.get("fixture_key") or query.context.digest().hex()
        return f"{query.role.value}:{key}"

    def judge(self, query: JudgeQuery) -> JudgeVerdict:
        key = self.key_for(query)
        entry = self._fixtures.get(key)
        if entry is None:
            raise JudgeUnavailable(f"No fixture for {key}")
        verdict = JudgeVerdict(
            decision=entry["decision"],
            rationale=entry.get("rationale", "fixture"),
            confidence=float(entry.get("confidence", 1.0)),
        )
        return check_verdict(query.role, verdict)


class FailingJudge:
    """Always unavailable; exercises each caller's fail direction."""

    def judge(self, query: JudgeQuery) -> JudgeVerdict:
        raise JudgeUnavailable(f"{query.role.value} judge is offline")


class ChatModelJudge:
    """Adapter over a langchain-core chat model with a per-query timeout."""

    def __init__(self, model: "BaseChatModel", timeout: float = JUDGE_TIMEOUT) -> None:
        self._model = model
        self._timeout = timeout
        self._pool = ThreadPoolExecutor(max_workers=2, thread_name_prefix="chat-judge")

    def judge(self, query: JudgeQuery) -> JudgeVerdict:
        choices = sorted(DECISIONS[query.role])
        messages = query.context.to_messages() + [
            HumanMessage(content=f"Role: {query.role.value}. Reply with exactly one of: {', '.join(choices)}.")
        ]
        future = self._pool.submit(self._model.invoke, messages)
        try:
            reply = future.result(timeout=self._timeout)
        except FutureTimeout:
            future.cancel()
            raise JudgeUnavailable(f"Chat judge timed out after {self._timeout} seconds") from None
        except Exception as e:
            raise JudgeUnavailable(f"Chat judge failed: {e}") from e
        text = str(reply.content).strip()
        for choice in choices:
            if text.lower().startswith(choice.lower()):
                return check_verdict(query.role, JudgeVerdict(choice, rationale=text, confidence=0.5))
        raise JudgeUnavailable(f"Chat judge answered outside the decision set: {text[:80]!r}")


class JudgeRegistry:
    """Role -> judge routing. Unregistered roles are unavailable."""

    def __init__(self, judges: Mapping[JudgeRole, Judge] | None = None) -> None:
        self._judges: dict[JudgeRole, Judge] = dict(judges or {})
        self._lock = threading.Lock()

    @classmethod
    def with_rule_defaults(cls) -> "JudgeRegistry":
        rule = RuleJudge()
        return cls({role: rule for role in JudgeRole})

    def register(self, role: JudgeRole, judge: Judge) -> None:
        with self._lock:
            self._judges[JudgeRole(role)] = judge

    def unregister(self, role: JudgeRole) -> None:
        with self._lock:
            self._judges.pop(JudgeRole(role), None)

    def judge(self, query: JudgeQuery) -> JudgeVerdict:
        judge = self._judges.get(query.role)
        if judge is None:
            raise JudgeUnavailable(f"No judge registered for {query.role.value}")
        return check_verdict(query.role, judge.judge(query))


__all__ = [
    "ACT",
    "ALLOW",
    "DECISIONS",
    "DIRECT_PASS",
    "FOUND",
    "IDLE",
    "NONE_FOUND",
    "REJECT",
    "USER_CONFIRMATION",
    "ChatModelJudge",
    "FailingJudge",
    "FixtureJudge",
    "Judge",
    "JudgeContext",
    "JudgeQuery",
    "JudgeRegistry",
    "JudgeRole",
    "JudgeUnavailable",
    "JudgeVerdict",
    "RuleJudge",
    "check_verdict",
    "collapse_obfuscation",
    "negative_constraints",
    "parse_directives",
    "violates_negative_constraint",
]
