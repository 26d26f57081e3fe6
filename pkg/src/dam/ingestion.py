"""Reading and writing the ECEC and discourse corpora, and building encoder inputs.

Both corpora use JSON Lines. The ECEC file for a split holds two record kinds::

    {"record": "conversation", "id": "c1",
     "utterances": [{"index": 1, "speaker": "A", "text": "...", "emotion": "happiness"}, ...]}
    {"record": "instance", "id": "c1:3:2", "conversation_id": "c1",
     "target_index": 3, "candidate_index": 2, "target_emotion": "happiness",
     "history_indices": [1, 2, 3], "label": 1}

The discourse corpus holds one dialogue per line, EDUs 1-based, links pointing
forward (``parent < child``)::

    {"id": "d1", "edus": [{"index": 1, "speaker": "A", "text": "..."}, ...],
     "links": [{"parent": 1, "child": 2, "relation": "Comment"}]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol, Union

from dam.data import (
    AnnotatedDialogue,
    Conversation,
    DiscourseLink,
    ECECInstance,
    Utterance,
    validate_conversation,
    validate_dialogue,
    validate_instance,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
BENCHMARK_SIZES = {"train": 27915, "validation": 1185, "test": 7224}

PathLike = Union[str, Path]


class DataError(ValueError):
    """A corpus record is malformed or violates a data invariant."""

    def __init__(self, message: str, record_id: Optional[str] = None, field: Optional[str] = None):
        self.record_id = record_id
        self.field = field
        where = []
        if record_id is not None:
            where.append(f"record {record_id}")
        if field is not None:
            where.append(f"field {field!r}")
        prefix = (", ".join(where) + ": ") if where else ""
        super().__init__(prefix + message)


class SequenceTooLongError(DataError):
    pass


@dataclass
class DatasetSplit:
    name: str
    instances: list
    conversations: dict[str, Conversation] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instances)

    def label_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for inst in self.instances:
            counts[inst.gold_label] += 1
        return counts


def ecec_path(data_dir: PathLike, split: str) -> Path:
    return Path(data_dir) / f"ecec_{split}.jsonl"


def discourse_path(data_dir: PathLike, split: str = "train") -> Path:
    return Path(data_dir) / f"discourse_{split}.jsonl"


def _read_records(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: invalid JSON ({exc.msg})", record_id=f"line {lineno}") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}: expected an object", record_id=f"line {lineno}")
            yield lineno, rec


def _get(rec: dict, key: str, kind, record_id: str, default=...):
    if key not in rec:
        if default is not ...:
            return default
        raise DataError("missing", record_id=record_id, field=key)
    value = rec[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise DataError(f"expected integer, got {value!r}", record_id=record_id, field=key)
    if kind is not int and not isinstance(value, kind):
        raise DataError(f"expected {kind.__name__}, got {type(value).__name__}", record_id=record_id, field=key)
    return value


def _parse_utterances(raw, record_id: str) -> tuple[Utterance, ...]:
    if not isinstance(raw, list):
        raise DataError("expected a list", record_id=record_id, field="utterances")
    out = []
    for pos, u in enumerate(raw):
        if not isinstance(u, dict):
            raise DataError(f"entry {pos} is not an object", record_id=record_id, field="utterances")
        out.append(
            Utterance(
                index=_get(u, "index", int, record_id),
                speaker=str(_get(u, "speaker", str, record_id)),
                text=_get(u, "text", str, record_id),
                emotion=u.get("emotion"),
            )
        )
    return tuple(out)


def _resolve(path: PathLike, split: Optional[str], kind: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = ecec_path(p, split or "train") if kind == "ecec" else discourse_path(p, split or "train")
    if not p.exists():
        raise FileNotFoundError(f"{kind} data file not found: {p}")
    return p


def load_ecec_dataset(path: PathLike, split: str = "train") -> DatasetSplit:
    """Load one ECEC split from a JSONL file or a data directory.

    Negative triples are expected to be materialized in the file; the loader
    never samples or rebalances.
    """
    p = _resolve(path, split, "ecec")
    conversations: dict[str, Conversation] = {}
    pending: list[tuple[str, ECECInstance]] = []

    for lineno, rec in _read_records(p):
        kind = rec.get("record", "instance")
        rid = str(rec.get("id", f"line {lineno}"))
        if kind == "conversation":
            conv = Conversation(rid, _parse_utterances(rec.get("utterances"), rid))
            problems = validate_conversation(conv)
            if problems:
                raise DataError("; ".join(problems), record_id=rid, field="utterances")
            if rid in conversations:
                raise DataError("duplicate conversation id", record_id=rid, field="id")
            conversations[rid] = conv
        elif kind == "instance":
            t = _get(rec, "target_index", int, rid)
            history = _get(rec, "history_indices", list, rid, default=list(range(1, t + 1)))
            if not all(isinstance(h, int) and not isinstance(h, bool) for h in history):
                raise DataError("expected integers", record_id=rid, field="history_indices")
            inst = ECECInstance(
                conversation_id=str(_get(rec, "conversation_id", str, rid)),
                target_index=t,
                candidate_index=_get(rec, "candidate_index", int, rid),
                target_emotion=_get(rec, "target_emotion", str, rid),
                history_indices=tuple(history),
                gold_label=_get(rec, "label", int, rid),
            )
            pending.append((rid, inst))
        else:
            raise DataError(f"unknown record kind {kind!r}", record_id=rid, field="record")

    instances = []
    for rid, inst in pending:
        conv = conversations.get(inst.conversation_id)
        if conv is None:
            raise DataError(f"unknown conversation {inst.conversation_id!r}", record_id=rid, field="conversation_id")
        problems = validate_instance(inst, conv)
        if problems:
            raise DataError("; ".join(problems), record_id=rid)
        instances.append(inst)

    ds = DatasetSplit(split, instances, conversations)
    counts = ds.label_counts()
    logger.info(
        "loaded %s split from %s: %d instances (%d positive, %d negative), %d conversations",
        split, p, len(ds), counts[1], counts[0], len(conversations),
    )
    if not instances:
        logger.warning("%s split at %s contains no instances", split, p)
    elif split in BENCHMARK_SIZES and len(ds) != BENCHMARK_SIZES[split]:
        logger.warning(
            "%s split has %d instances; the benchmark split has %d", split, len(ds), BENCHMARK_SIZES[split]
        )
    return ds


def instance_id(inst: ECECInstance) -> str:
    return f"{inst.conversation_id}:{inst.target_index}:{inst.candidate_index}"


def _utterance_record(u: Utterance) -> dict:
    rec = {"index": u.index, "speaker": u.speaker, "text": u.text}
    if u.emotion is not None:
        rec["emotion"] = u.emotion
    return rec


def write_ecec_dataset(path: PathLike, split: DatasetSplit) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for conv in split.conversations.values():
            rec = {"record": "conversation", "id": conv.id,
                   "utterances": [_utterance_record(u) for u in conv.utterances]}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
        for inst in split.instances:
            rec = {
                "record": "instance",
                "id": instance_id(inst),
                "conversation_id": inst.conversation_id,
                "target_index": inst.target_index,
                "candidate_index": inst.candidate_index,
                "target_emotion": inst.target_emotion,
                "history_indices": list(inst.history_indices),
                "label": inst.gold_label,
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return p


def load_discourse_corpus(path: PathLike) -> list[AnnotatedDialogue]:
    """Load a dialogue corpus; each returned dialogue has the synthetic root at ``edus[0]``."""
    p = _resolve(path, "train", "discourse")
    dialogues = []
    seen = set()
    for lineno, rec in _read_records(p):
        rid = str(rec.get("id", f"line {lineno}"))
        if rid in seen:
            raise DataError("duplicate dialogue id", record_id=rid, field="id")
        seen.add(rid)
        edus = _parse_utterances(rec.get("edus"), rid)
        if [e.index for e in edus] != list(range(1, len(edus) + 1)):
            raise DataError("EDU indices must be 1..n in order", record_id=rid, field="edus")
        raw_links = _get(rec, "links", list, rid, default=[])
        links = []
        for link in raw_links:
            if not isinstance(link, dict):
                raise DataError("link is not an object", record_id=rid, field="links")
            links.append(
                DiscourseLink(
                    parent=_get(link, "parent", int, rid),
                    child=_get(link, "child", int, rid),
                    relation=str(_get(link, "relation", str, rid)),
                )
            )
        dialogue = AnnotatedDialogue(rid, edus, tuple(links))
        problems = validate_dialogue(dialogue)
        if problems:
            raise DataError("; ".join(problems), record_id=rid, field="links")
        dialogues.append(dialogue.with_root())

    n_edus = sum(d.num_edus for d in dialogues)
    n_links = sum(len(d.links) for d in dialogues)
    logger.info("loaded discourse corpus %s: %d dialogues, %d EDUs, %d links", p, len(dialogues), n_edus, n_links)
    if not dialogues:
        logger.warning("discourse corpus at %s is empty", p)
    return dialogues


def write_discourse_corpus(path: PathLike, dialogues: Iterable[AnnotatedDialogue]) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for d in dialogues:
            d = d.without_root()
            rec = {
                "id": d.id,
                "edus": [_utterance_record(u) for u in d.edus],
                "links": [{"parent": l.parent, "child": l.child, "relation": l.relation} for l in d.links],
            }
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return p


# -- encoder input layout ---------------------------------------------------

CLS, EMOTION, TARGET, SEP, CANDIDATE, HISTORY = "cls", "emotion", "target", "sep", "candidate", "history"


@dataclass(frozen=True)
class Segment:
    role: str
    text: str = ""
    history_index: Optional[int] = None


@dataclass(frozen=True)
class SerializedInput:
    """Text segments of one triple, in encoder order.

    Layout: CLS, emotion, target, SEP, candidate, SEP, history utterances, SEP.
    """

    name: str
    segments: tuple[Segment, ...]
    target_index: int
    candidate_index: int

    def history_segments(self) -> list[Segment]:
        return [s for s in self.segments if s.role == HISTORY]


def serialize_instance(inst: ECECInstance, conv: Conversation, speaker_prefix: bool = True) -> SerializedInput:
    def text(idx: int) -> str:
        return conv.utterance(idx).text

    history = []
    for h in inst.history_indices:
        u = conv.utterance(h)
        history.append(Segment(HISTORY, f"{u.speaker}: {u.text}" if speaker_prefix else u.text, h))

    segments = (
        Segment(CLS),
        Segment(EMOTION, inst.target_emotion),
        Segment(TARGET, text(inst.target_index)),
        Segment(SEP),
        Segment(CANDIDATE, text(inst.candidate_index)),
        Segment(SEP),
        *history,
        Segment(SEP),
    )
    return SerializedInput(instance_id(inst), segments, inst.target_index, inst.candidate_index)


class Tokenizer(Protocol):
    pad_id: int
    cls_id: int
    sep_id: int

    def emotion_id(self, emotion: str) -> int: ...

    def tokenize(self, text: str) -> list[int]: ...


@dataclass(frozen=True)
class EncoderInput:
    """Token ids of one triple plus the span of each history utterance kept.

    Spans are half-open ``(start, end)`` token offsets, ordered by history index.
    """

    name: str
    input_ids: tuple[int, ...]
    utterance_spans: dict[int, tuple[int, int]]

    @property
    def kept_history(self) -> tuple[int, ...]:
        return tuple(self.utterance_spans)

    def __len__(self) -> int:
        return len(self.input_ids)


def tokenize_input(serialized: SerializedInput, tokenizer: Tokenizer, max_length: int) -> EncoderInput:
    """Tokenize a serialized triple, dropping the oldest history utterances on overflow.

    The target and candidate utterances are never dropped from the history block.
    """
    pieces: list[tuple[Segment, list[int]]] = []
    for seg in serialized.segments:
        if seg.role == CLS:
            ids = [tokenizer.cls_id]
        elif seg.role == SEP:
            ids = [tokenizer.sep_id]
        elif seg.role == EMOTION:
            ids = [tokenizer.emotion_id(seg.text)]
        else:
            ids = tokenizer.tokenize(seg.text)
            if seg.role == HISTORY and not ids:
                raise DataError("utterance tokenizes to nothing", record_id=serialized.name,
                                field=f"history[{seg.history_index}]")
        pieces.append((seg, ids))

    total = sum(len(ids) for _, ids in pieces)
    protected = {serialized.target_index, serialized.candidate_index}
    droppable = [k for k, (seg, _) in enumerate(pieces)
                 if seg.role == HISTORY and seg.history_index not in protected]
    dropped = set()
    for k in droppable:
        if total <= max_length:
            break
        total -= len(pieces[k][1])
        dropped.add(k)
    if total > max_length:
        raise SequenceTooLongError(
            f"{total} tokens exceed max_length {max_length} even after dropping history",
            record_id=serialized.name,
        )

    input_ids: list[int] = []
    spans: dict[int, tuple[int, int]] = {}
    for k, (seg, ids) in enumerate(pieces):
        if k in dropped:
            continue
        if seg.role == HISTORY:
            spans[seg.history_index] = (len(input_ids), len(input_ids) + len(ids))
        input_ids.extend(ids)
    if dropped:
        logger.debug("%s: dropped %d history utterances to fit %d tokens", serialized.name, len(dropped), max_length)
    return EncoderInput(serialized.name, tuple(input_ids), spans)


def tokenize_edu(text: str, tokenizer: Tokenizer, max_length: int) -> tuple[int, ...]:
    """``[CLS] text [SEP]``, with the text truncated to fit."""
    ids = tokenizer.tokenize(text)[: max(0, max_length - 2)]
    return (tokenizer.cls_id, *ids, tokenizer.sep_id)
