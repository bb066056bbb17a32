"""Taint-aware memory and plan-trajectory alignment for the system agent."""

from __future__ import annotations

import logging
import re
import threading
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from approval_helpers import APPROVE, DENY, ApprovalPrompt, ApprovalProvider, ask_or_fail_closed
from critical_nodes import CriticalNodeCategory
from registry import AgentDid, SemanticPermission
from trusted_platform import (
    PLATFORM,
    KeyHandle,
    TrustedPlatform,
    canonical_decode,
    canonical_encode,
    decode_sequence,
    hash_bytes,
)

logger = logging.getLogger(__name__)

DECLASSIFIED = "declassified"
DERIVED = "derived"


class CognitionError(RuntimeError):
    """Base error for memory and alignment operations."""


class UnknownCell(CognitionError):
    pass


class IntegrityError(CognitionError):
    pass


class Tag(str, Enum):
    VERIFIED = "TAG_VERIFIED"
    TAINTED = "TAG_TAINTED"


class SourceKind(str, Enum):
    USER = "USER"
    VERIFIED_SA = "VERIFIED_SA"
    EXTERNAL = "EXTERNAL"


@dataclass(frozen=True)
class MemorySource:
    kind: SourceKind
    label: str = ""

    @property
    def origin(self) -> str:
        if self.kind is SourceKind.EXTERNAL:
            return self.label or "external"
        return self.kind.value

    @classmethod
    def external(cls, who: AgentDid | str) -> "MemorySource":
        return cls(SourceKind.EXTERNAL, who.render() if isinstance(who, AgentDid) else who)


USER = MemorySource(SourceKind.USER)
VERIFIED_SA = MemorySource(SourceKind.VERIFIED_SA)
CLIPBOARD = MemorySource.external("clipboard")


@dataclass(frozen=True)
class MemoryCell:
    cell_id: str
    content: str
    tag: Tag
    origin: str
    derivation: tuple[str, ...]
    integrity_mac: bytes

    @property
    def tainted(self) -> bool:
        return self.tag is Tag.TAINTED


def mac_input(cell_id: str, content: str, tag: Tag, origin: str, derivation: Sequence[str]) -> bytes:
    return canonical_encode(cell_id, content, tag, origin, list(derivation))


@dataclass(frozen=True)
class Declassified:
    cell: MemoryCell | None

    @property
    def denied(self) -> bool:
        return self.cell is None


class MemoryStore:
    """Shared cell store; every cell is MAC'd under a vault-held key and re-checked on read."""

    def __init__(self, platform: TrustedPlatform) -> None:
        self._platform = platform
        self._key: KeyHandle = platform.vault.generate_secret(PLATFORM)
        self._lock = threading.RLock()
        self._cells: dict[str, MemoryCell] = {}
        self._next = 1

    def _mac(self, cell_id: str, content: str, tag: Tag, origin: str, derivation: Sequence[str]) -> bytes:
        return self._platform.vault.vault_mac(
            self._key, PLATFORM, mac_input(cell_id, content, tag, origin, derivation)
        )

    def _new_cell(self, content: str, tag: Tag, origin: str, derivation: Sequence[str]) -> MemoryCell:
        with self._lock:
            cell_id = f"c{self._next}"
            self._next += 1
            mac = self._mac(cell_id, content, tag, origin, derivation)
            cell = MemoryCell(cell_id, content, tag, origin, tuple(derivation), mac)
            self._cells[cell_id] = cell
        return cell

    def store(self, content: str, source: MemorySource) -> MemoryCell:
        tag = Tag.TAINTED if source.kind is SourceKind.EXTERNAL else Tag.VERIFIED
        return self._new_cell(content, tag, source.origin, ())

    def read(self, cell_id: str) -> MemoryCell:
        cell = self._cells.get(cell_id)
        if cell is None:
            raise UnknownCell(f"No memory cell {cell_id}")
        self._check(cell)
        return cell

    def _check(self, cell: MemoryCell) -> None:
        expected = self._mac(cell.cell_id, cell.content, cell.tag, cell.origin, cell.derivation)
        if expected != cell.integrity_mac:
            raise IntegrityError(f"Memory cell {cell.cell_id} failed its integrity check")

    def derive(self, parents: Sequence[str], content: str) -> MemoryCell:
        cells = [self.read(p) for p in parents]
        tag = Tag.TAINTED if any(c.tainted for c in cells) else Tag.VERIFIED
        return self._new_cell(content, tag, DERIVED, list(parents))

    def declassify(self, cell_id: str, approval: ApprovalProvider) -> Declassified:
        cell = self.read(cell_id)
        if not cell.tainted:
            raise CognitionError(f"Cell {cell_id} is not tainted")
        prompt = ApprovalPrompt(
            kind="declassify",
            subject=cell_id,
            summary=f"Use data from {cell.origin} in a sensitive action?",
            preview=cell.content[:120],
        )
        if ask_or_fail_closed(approval, prompt, DENY) != APPROVE:
            logger.warning("Declassification of %s denied", cell_id)
            return Declassified(None)
        new_cell = self._new_cell(cell.content, Tag.VERIFIED, DECLASSIFIED, [cell_id])
        logger.info("Declassified %s as %s", cell_id, new_cell.cell_id)
        return Declassified(new_cell)

    def cells(self) -> list[MemoryCell]:
        with self._lock:
            return list(self._cells.values())

    def is_declassification(self, cell: MemoryCell) -> bool:
        return cell.origin == DECLASSIFIED and len(cell.derivation) == 1

    def taint_audit(self) -> list[str]:
        """Cells whose tag disagrees with their derivation graph or whose MAC fails."""
        violations: list[str] = []
        for cell in self.cells():
            try:
                self._check(cell)
            except IntegrityError:
                violations.append(cell.cell_id)
                continue
            if self.is_declassification(cell):
                expected_tainted = False
            elif cell.origin == DERIVED:
                expected_tainted = any(self._cells[p].tainted for p in cell.derivation)
            else:
                expected_tainted = cell.origin not in (SourceKind.USER.value, SourceKind.VERIFIED_SA.value)
            if expected_tainted != cell.tainted:
                violations.append(cell.cell_id)
        return violations

    def persist(self, path: Path | str) -> None:
        lines = [
            canonical_encode(c.cell_id, c.content, c.tag, c.origin, list(c.derivation), c.integrity_mac).hex()
            for c in self.cells()
        ]
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    def load(self, path: Path | str) -> int:
        loaded: dict[str, MemoryCell] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            try:
                cell_id, content, tag, origin, derivation, mac = canonical_decode(bytes.fromhex(line))
                cell = MemoryCell(
                    cell_id.decode("utf-8"),
                    content.decode("utf-8"),
                    Tag(tag.decode("utf-8")),
                    origin.decode("utf-8"),
                    tuple(d.decode("utf-8") for d in decode_sequence(derivation)),
                    mac,
                )
            except ValueError as e:
                raise IntegrityError(f"Malformed memory record: {e}") from e
            self._check(cell)
            loaded[cell.cell_id] = cell
        with self._lock:
            self._cells.update(loaded)
            numbers = [int(cid[1:]) for cid in self._cells if cid[1:].isdigit()]
            self._next = max(numbers, default=0) + 1
        return len(loaded)


@dataclass(frozen=True)
class PlannedAction:
    api: str
    op_kind: CriticalNodeCategory | None = None
    params: Mapping[str, str] = field(default_factory=dict, hash=False)
    justification: str = ""
    requires_user_visible_justification: bool = True
    p_req: frozenset[SemanticPermission] | None = None
    host: str | None = None

    @property
    def critical(self) -> bool:
        return self.op_kind is not None


@dataclass
class Trajectory:
    user_instruction: str
    actions: list[PlannedAction] = field(default_factory=list)
    goal_anchor: bytes = b""

    def __post_init__(self) -> None:
        if not self.goal_anchor:
            self.goal_anchor = hash_bytes(self.user_instruction.encode("utf-8"))

    def append(self, action: PlannedAction) -> None:
        self.actions.append(action)

    def history(self) -> list[str]:
        return [f"{a.api}: {a.justification}" for a in self.actions]


@dataclass(frozen=True)
class SinkVerdict:
    tainted: tuple[str, ...] = ()

    @property
    def clear(self) -> bool:
        return not self.tainted


def check_sink(action: PlannedAction, store: MemoryStore) -> SinkVerdict:
    """No-write-down: names the tainted cells feeding a critical action's parameters."""
    return SinkVerdict(tuple(cid for cid in action.params.values() if store.read(cid).tainted))


class Alignment(str, Enum):
    CONSISTENT = "consistent"
    DRIFT = "drift"
    MISSING_JUSTIFICATION = "missing_justification"


@dataclass(frozen=True)
class AlignmentVerdict:
    kind: Alignment
    reason: str = ""

    @property
    def consistent(self) -> bool:
        return self.kind is Alignment.CONSISTENT


STOPWORDS = frozenset(
    "a an the to for of on in at by with and or my me i you it is are be this that from please "
    "can could would will do does into as your our their his her its".split()
)
_WORD = re.compile(r"[a-z0-9]+")


def content_words(text: str) -> set[str]:
    return {w for w in _WORD.findall(text.lower()) if w not in STOPWORDS}


class DriftDetector(Protocol):
    def detect(self, traj: Trajectory, candidate: PlannedAction, store: MemoryStore) -> str | None: ...


class KeywordOverlapDetector:
    """Drift when the candidate shares no content word with the instruction and prior justifications."""

    def detect(self, traj: Trajectory, candidate: PlannedAction, store: MemoryStore) -> str | None:
        reference = content_words(traj.user_instruction)
        for action in traj.actions:
            reference |= content_words(action.justification)
        candidate_text = " ".join(
            [candidate.api.replace(".", " ").replace("_", " "), candidate.justification]
            + [store.read(cid).content for cid in candidate.params.values()]
        )
        if reference & content_words(candidate_text):
            return None
        return f"{candidate.api} shares no content with the instruction"


def check_alignment(
    traj: Trajectory,
    candidate: PlannedAction,
    store: MemoryStore,
    detector: DriftDetector | None = None,
) -> AlignmentVerdict:
    if hash_bytes(traj.user_instruction.encode("utf-8")) != traj.goal_anchor:
        return AlignmentVerdict(Alignment.DRIFT, "goal anchor no longer matches the instruction")
    if candidate.critical and candidate.requires_user_visible_justification and not candidate.justification.strip():
        return AlignmentVerdict(
            Alignment.MISSING_JUSTIFICATION, f"{candidate.api} is a critical node with no justification"
        )
    reason = (detector or KeywordOverlapDetector()).detect(traj, candidate, store)
    if reason:
        return AlignmentVerdict(Alignment.DRIFT, reason)
    return AlignmentVerdict(Alignment.CONSISTENT)


__all__ = [
    "CLIPBOARD",
    "USER",
    "VERIFIED_SA",
    "Alignment",
    "AlignmentVerdict",
    "CognitionError",
    "Declassified",
    "DriftDetector",
    "IntegrityError",
    "KeywordOverlapDetector",
    "MemoryCell",
    "MemorySource",
    "MemoryStore",
    "PlannedAction",
    "SinkVerdict",
    "SourceKind",
    "Tag",
    "Trajectory",
    "UnknownCell",
    "check_alignment",
    "check_sink",
    "content_words",
]
