"""Core domain types shared by the ECEC and discourse-parsing pipelines."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Any, Optional

NEUTRAL_EMOTIONS = frozenset({"neutral", "none", ""})

# Relation types quoted in the benchmark case study; the rest are read from the corpus.
CORE_RELATIONS = (
    "Clarification_question",
    "Elaboration",
    "Result",
    "Acknowledgement",
    "Comment",
)
NONE_RELATION = "none"

ROOT_INDEX = 0
ROOT_TEXT = "<root>"


@dataclass(frozen=True)
class Utterance:
    index: int
    speaker: str
    text: str
    emotion: Optional[str] = None


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...]

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))

    def __len__(self) -> int:
        return len(self.utterances)

    def utterance(self, index: int) -> Utterance:
        """Return the utterance with 1-based ``index``."""
        for u in self.utterances:
            if u.index == index:
                return u
        raise KeyError(index)


@dataclass(frozen=True)
class ECECInstance:
    conversation_id: str
    target_index: int
    candidate_index: int
    target_emotion: str
    history_indices: tuple[int, ...]
    gold_label: int

    def __post_init__(self):
        object.__setattr__(self, "history_indices", tuple(self.history_indices))

    @property
    def distance(self) -> int:
        """Relative utterance distance t - i."""
        return self.target_index - self.candidate_index


@dataclass(frozen=True)
class DiscourseLink:
    parent: int
    child: int
    relation: str


@dataclass(frozen=True)
class AnnotatedDialogue:
    """A dialogue of EDUs with gold links.

    ``edus[0]`` is the synthetic root (index 0) once the dialogue has been
    loaded; real EDUs follow with indices 1..n.
    """

    id: str
    edus: tuple[Utterance, ...]
    links: tuple[DiscourseLink, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "edus", tuple(self.edus))
        object.__setattr__(self, "links", tuple(self.links))

    @property
    def has_root(self) -> bool:
        return bool(self.edus) and self.edus[0].index == ROOT_INDEX

    @property
    def num_edus(self) -> int:
        """Number of real EDUs (root excluded)."""
        return len(self.edus) - (1 if self.has_root else 0)

    def with_root(self) -> "AnnotatedDialogue":
        if self.has_root:
            return self
        root = Utterance(ROOT_INDEX, "", ROOT_TEXT)
        return AnnotatedDialogue(self.id, (root,) + self.edus, self.links)

    def without_root(self) -> "AnnotatedDialogue":
        if not self.has_root:
            return self
        return AnnotatedDialogue(self.id, self.edus[1:], self.links)

    def gold_parents(self) -> dict[int, list[DiscourseLink]]:
        """Map each child index to its incoming gold links (possibly empty)."""
        out: dict[int, list[DiscourseLink]] = {i: [] for i in range(1, self.num_edus + 1)}
        for link in self.links:
            out.setdefault(link.child, []).append(link)
        return out


@dataclass(frozen=True)
class RelationTypeSet:
    """Ordered relation inventory of size K; ``none`` is reserved, not counted."""

    names: tuple[str, ...] = CORE_RELATIONS

    def __post_init__(self):
        names = tuple(n for n in self.names if n != NONE_RELATION)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate relation names: {names}")
        object.__setattr__(self, "names", names)

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    @classmethod
    def from_dialogues(cls, dialogues) -> "RelationTypeSet":
        """Core types first, then corpus types in order of first appearance."""
        names = list(CORE_RELATIONS)
        for d in dialogues:
            for link in d.links:
                if link.relation not in names and link.relation != NONE_RELATION:
                    names.append(link.relation)
        return cls(tuple(names))


def validate_conversation(conv: Any) -> list[str]:
    """Return the violated invariants of ``conv``; empty iff valid.

    Never raises, whatever the input looks like.
    """
    problems: list[str] = []
    try:
        utterances = list(getattr(conv, "utterances"))
    except Exception:
        return ["conversation has no iterable 'utterances'"]

    indices = []
    for pos, u in enumerate(utterances):
        try:
            idx = getattr(u, "index", None)
            text = getattr(u, "text", None)
        except Exception:
            problems.append(f"unreadable utterance at position {pos}")
            continue
        if not isinstance(idx, int) or isinstance(idx, bool):
            problems.append(f"utterance at position {pos} has non-integer index {idx!r}")
            continue
        if idx < 1:
            problems.append(f"index {idx} < 1")
        if not isinstance(text, str) or not text.strip():
            problems.append(f"empty text at index {idx}")
        indices.append(idx)

    counts = Counter(indices)
    for idx in sorted(i for i, c in counts.items() if c > 1):
        problems.append(f"duplicate index {idx}")
    if indices:
        present = set(indices)
        for idx in range(1, max(present) + 1):
            if idx not in present:
                problems.append(f"gap at index {idx}")
    if indices != sorted(indices):
        problems.append("indices out of order")
    return problems


def validate_instance(inst: ECECInstance, conv: Optional[Conversation] = None) -> list[str]:
    """Invariant report for a triple, checked against its conversation when given."""
    problems = []
    t, i = inst.target_index, inst.candidate_index
    if i not in inst.history_indices:
        problems.append(f"candidate_index {i} not in history_indices")
    if i > t:
        problems.append(f"candidate_index {i} > target_index {t}")
    if any(h > t for h in inst.history_indices):
        problems.append("history_indices contains index after target_index")
    if list(inst.history_indices) != sorted(set(inst.history_indices)):
        problems.append("history_indices not strictly increasing")
    if (inst.target_emotion or "").lower() in NEUTRAL_EMOTIONS:
        problems.append(f"target_emotion {inst.target_emotion!r} is neutral")
    if inst.gold_label not in (0, 1):
        problems.append(f"gold_label {inst.gold_label!r} not in {{0, 1}}")
    if conv is not None:
        n = len(conv)
        if not 1 <= t <= n:
            problems.append(f"target_index {t} outside conversation of {n} utterances")
        if any(not 1 <= h <= n for h in inst.history_indices):
            problems.append("history index outside conversation")
    return problems


def validate_dialogue(dialogue: AnnotatedDialogue) -> list[str]:
    problems = []
    n = dialogue.num_edus
    seen = set()
    for link in dialogue.links:
        if not (0 <= link.parent <= n and 1 <= link.child <= n):
            problems.append(f"link {link.parent}->{link.child} outside 1..{n}")
        if link.parent >= link.child:
            problems.append(f"link {link.parent}->{link.child} does not point forward")
        if (link.parent, link.child) in seen:
            problems.append(f"duplicate link {link.parent}->{link.child}")
        seen.add((link.parent, link.child))
    return problems
