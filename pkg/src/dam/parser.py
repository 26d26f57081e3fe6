"""Discourse dependency parser: BiGRU over EDU vectors, link predictor, relation classifier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from dam.data import NONE_RELATION, AnnotatedDialogue, Conversation, RelationTypeSet, Utterance
from dam.encoder import ContextEncoder
from dam.ingestion import tokenize_edu


@dataclass
class ParseResult:
    dialogue_id: str
    parents: dict[int, int] = field(default_factory=dict)
    relations: dict[tuple[int, int], str] = field(default_factory=dict)
    link_probs: dict[int, tuple[float, ...]] = field(default_factory=dict)
    rel_probs: dict[int, tuple[float, ...]] = field(default_factory=dict)

    def links(self) -> list[tuple[int, int, str, float]]:
        """``(child, parent, relation, link probability)`` for every EDU, in child order."""
        out = []
        for child in sorted(self.parents):
            parent = self.parents[child]
            rel = self.relations.get((parent, child), NONE_RELATION)
            out.append((child, parent, rel, self.link_probs[child][parent]))
        return out


def edu_text(u: Utterance, speaker_prefix: bool) -> str:
    return f"{u.speaker}: {u.text}" if speaker_prefix and u.speaker else u.text


def conversation_to_dialogue(conv: Conversation) -> AnnotatedDialogue:
    """Treat every utterance as one EDU; no gold links."""
    return AnnotatedDialogue(conv.id, conv.utterances).with_root()


def _masked_link_logits(link_logits: torch.Tensor) -> torch.Tensor:
    n = link_logits.shape[0]
    allowed = torch.ones(n, n, dtype=torch.bool, device=link_logits.device).tril(-1)
    return link_logits.masked_fill(~allowed, float("-inf"))


class DiscourseParser(nn.Module):
    """Parser head; the bottom encoder is passed in, shared or standalone."""

    def __init__(self, input_dim: int, num_relations: int, gru_dim: int = 0, link_dim: int = 0, rel_dim: int = 0):
        super().__init__()
        gru_dim = gru_dim or max(1, input_dim // 2)
        link_dim = link_dim or gru_dim
        rel_dim = rel_dim or gru_dim
        self.num_relations = num_relations
        self.root = nn.Parameter(torch.randn(input_dim) * 0.02)
        self.gru = nn.GRU(input_dim, gru_dim, batch_first=True, bidirectional=True)
        self.link_hidden = nn.Linear(4 * gru_dim, link_dim)
        self.link_out = nn.Linear(link_dim, 1)
        self.rel_hidden = nn.Linear(4 * gru_dim, rel_dim)
        self.rel_out = nn.Linear(rel_dim, num_relations)

    @property
    def rel_dim(self) -> int:
        return self.rel_hidden.out_features

    def edu_vectors(
        self, dialogues: Sequence[AnnotatedDialogue], encoder: ContextEncoder, speaker_prefix: bool = True
    ) -> list[torch.Tensor]:
        """Classification-marker state of every real EDU, root vector prepended, per dialogue."""
        sequences, sizes = [], []
        for d in dialogues:
            d = d.with_root()
            edus = d.edus[1:]
            sizes.append(len(edus))
            sequences.extend(
                tokenize_edu(edu_text(u, speaker_prefix), encoder.tokenizer, encoder.config.max_length) for u in edus
            )
        cls = encoder.encode_batch(sequences)[:, 0] if sequences else None
        out, offset = [], 0
        for n in sizes:
            rows = [self.root.to(cls.dtype if cls is not None else self.root.dtype).unsqueeze(0)]
            if n:
                rows.append(cls[offset : offset + n])
            out.append(torch.cat(rows))
            offset += n
        return out

    def contextualize(self, x: torch.Tensor) -> torch.Tensor:
        """BiGRU over ``[n+1, input_dim]`` EDU vectors -> ``[n+1, 2 * gru_dim]``."""
        h, _ = self.gru(x.unsqueeze(0))
        return h[0]

    def encode_edus(self, dialogue: AnnotatedDialogue, encoder: ContextEncoder, speaker_prefix: bool = True):
        return self.contextualize(self.edu_vectors([dialogue], encoder, speaker_prefix)[0])

    def pair_features(self, h: torch.Tensor) -> torch.Tensor:
        """``pairs[i, j] = [h_j ; h_i]``: candidate parent j, child i."""
        n = h.shape[0]
        child = h.unsqueeze(1).expand(n, n, -1)
        parent = h.unsqueeze(0).expand(n, n, -1)
        return torch.cat([parent, child], dim=-1)

    def scores(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Link logits ``[n+1, n+1]`` (row child, column parent; j >= i masked) and
        relation logits ``[n+1, n+1, K]``."""
        pairs = self.pair_features(h)
        link = self.link_out(torch.tanh(self.link_hidden(pairs))).squeeze(-1)
        rel = self.rel_out(torch.tanh(self.rel_hidden(pairs)))
        return _masked_link_logits(link), rel

    def relation_hidden(self, h: torch.Tensor, parent: int, child: int) -> torch.Tensor:
        return torch.tanh(self.rel_hidden(torch.cat([h[parent], h[child]])))

    def score_links(self, h: torch.Tensor, i: int) -> torch.Tensor:
        """Distribution over parents ``0..i-1`` of EDU ``i``."""
        if i < 1:
            raise ValueError("the root EDU has no parent")
        pairs = torch.cat([h[:i], h[i].expand(i, -1)], dim=-1)
        logits = self.link_out(torch.tanh(self.link_hidden(pairs))).squeeze(-1)
        return torch.softmax(logits, dim=0)

    def classify_relation(self, h: torch.Tensor, j: int, i: int) -> torch.Tensor:
        if not j < i:
            raise ValueError(f"parent {j} must precede child {i}")
        return torch.softmax(self.rel_out(self.relation_hidden(h, j, i)), dim=-1)


def decode_scores(
    link_logits: torch.Tensor, rel_logits: torch.Tensor, relation_names: Sequence[str], dialogue_id: str = ""
) -> ParseResult:
    """Greedy per-EDU argmax parent, then the argmax relation for that parent.

    Ties go to the smallest index.
    """
    link_logits = _masked_link_logits(link_logits.detach())
    rel_logits = rel_logits.detach()
    result = ParseResult(dialogue_id)
    n = link_logits.shape[0]
    for i in range(1, n):
        row = link_logits[i, :i]
        parent = int(torch.argmax(row))
        link_p = torch.softmax(row, dim=0)
        result.parents[i] = parent
        result.link_probs[i] = tuple(link_p.tolist())
        rel_p = torch.softmax(rel_logits[i, parent], dim=0)
        result.rel_probs[i] = tuple(rel_p.tolist())
        if parent > 0:
            result.relations[(parent, i)] = relation_names[int(torch.argmax(rel_logits[i, parent]))]
    return result


def parser_loss(
    dialogue: AnnotatedDialogue,
    link_logits: torch.Tensor,
    rel_logits: torch.Tensor,
    relation_types: RelationTypeSet,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Negative log-likelihood of the gold structure: ``(L_link, L_rel, L_dp)``.

    A child with several gold parents contributes one term per gold link; a
    child with none is attached to the root and contributes no relation term.
    """
    n = dialogue.num_edus
    link_logp = torch.log_softmax(_masked_link_logits(link_logits), dim=-1)
    rel_logp = torch.log_softmax(rel_logits, dim=-1)
    link_terms, rel_terms = [], []
    for child, gold in dialogue.gold_parents().items():
        if not 1 <= child <= n:
            raise ValueError(f"{dialogue.id}: child {child} outside 1..{n}")
        if not gold:
            link_terms.append(link_logp[child, 0])
            continue
        for link in gold:
            if link.parent >= link.child:
                raise ValueError(f"{dialogue.id}: gold parent {link.parent} >= child {link.child}")
            link_terms.append(link_logp[child, link.parent])
            if link.parent > 0 and link.relation != NONE_RELATION:
                rel_terms.append(rel_logp[child, link.parent, relation_types.index(link.relation)])
    zero = link_logits.new_zeros(())
    l_link = -torch.stack(link_terms).sum() if link_terms else zero
    l_rel = -torch.stack(rel_terms).sum() if rel_terms else zero
    return l_link, l_rel, l_link + l_rel


def count_link_decisions(dialogue: AnnotatedDialogue) -> int:
    return sum(max(1, len(g)) for g in dialogue.gold_parents().values())


class StandaloneParser(nn.Module):
    """Encoder + parser head trained on the discourse corpus alone.

    Frozen after training, it produces the relation edges (and pair hidden
    states) consumed by the ECEC graph.
    """

    def __init__(self, encoder: ContextEncoder, head: DiscourseParser, relation_types: RelationTypeSet,
                 speaker_prefix: bool = True):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.relation_types = relation_types
        self.speaker_prefix = speaker_prefix

    def hidden(self, dialogue: AnnotatedDialogue) -> torch.Tensor:
        return self.head.encode_edus(dialogue, self.encoder, self.speaker_prefix)

    def loss(self, dialogues: Sequence[AnnotatedDialogue]):
        vectors = self.head.edu_vectors(dialogues, self.encoder, self.speaker_prefix)
        total_link = total_rel = None
        for d, x in zip(dialogues, vectors):
            link, rel = self.head.scores(self.head.contextualize(x))
            l_link, l_rel, _ = parser_loss(d, link, rel, self.relation_types)
            total_link = l_link if total_link is None else total_link + l_link
            total_rel = l_rel if total_rel is None else total_rel + l_rel
        return total_link, total_rel, total_link + total_rel

    @torch.no_grad()
    def parse(self, dialogue: AnnotatedDialogue) -> tuple[ParseResult, torch.Tensor]:
        """Greedy parse plus the ``[n+1, n+1, d_r]`` relation hidden states of every pair."""
        h = self.hidden(dialogue)
        link, rel = self.head.scores(h)
        pair_hidden = torch.tanh(self.head.rel_hidden(self.head.pair_features(h)))
        return decode_scores(link, rel, self.relation_types.names, dialogue.id), pair_hidden


def parse_conversations(
    parser: StandaloneParser, conversations: Sequence[Conversation], keep_pair_hidden: bool = False
) -> tuple[dict[str, ParseResult], Optional[dict[str, torch.Tensor]]]:
    was_training = parser.training
    parser.eval()
    parses, hidden = {}, ({} if keep_pair_hidden else None)
    for conv in conversations:
        result, pair_hidden = parser.parse(conversation_to_dialogue(conv))
        parses[conv.id] = result
        if keep_pair_hidden:
            hidden[conv.id] = pair_hidden
    parser.train(was_training)
    return parses, hidden
