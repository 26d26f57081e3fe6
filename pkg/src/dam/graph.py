"""Typed, fully connected conversation graph over the history of a target utterance."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import torch
import torch.nn as nn

from dam.data import NONE_RELATION, Conversation, ECECInstance, RelationTypeSet
from dam.parser import ParseResult

SAME_SPEAKER_ADJACENT = "same-speaker-adjacent"
OTHER_SPEAKER = "other"
SPEAKER_TYPES = (OTHER_SPEAKER, SAME_SPEAKER_ADJACENT)

DEFAULT_MAX_DISTANCE = 10


@dataclass(frozen=True)
class EdgeFeature:
    speaker_type: str
    distance: int
    relation: str = NONE_RELATION


@dataclass
class ConversationGraph:
    nodes: tuple[int, ...]
    edges: dict[tuple[int, int], EdgeFeature]
    node_vectors: Optional[dict[int, torch.Tensor]] = field(default=None, repr=False)

    def dump(self) -> str:
        """One ``i j speaker_type distance relation`` line per edge."""
        return "".join(
            f"{i} {j} {f.speaker_type} {f.distance} {f.relation}\n" for (i, j), f in sorted(self.edges.items())
        )


def same_speaker_pairs(conv: Conversation) -> set[tuple[int, int]]:
    """Ordered pairs of consecutive turns by the same speaker, both directions."""
    last_turn: dict[str, int] = {}
    pairs = set()
    for u in conv.utterances:
        prev = last_turn.get(u.speaker)
        if prev is not None:
            pairs.add((prev, u.index))
            pairs.add((u.index, prev))
        last_turn[u.speaker] = u.index
    return pairs


def build_graph(
    inst: ECECInstance,
    conv: Conversation,
    parse: Optional[ParseResult] = None,
    node_states: Optional[Mapping[int, torch.Tensor]] = None,
    max_distance: int = DEFAULT_MAX_DISTANCE,
    nodes: Optional[Sequence[int]] = None,
) -> ConversationGraph:
    """Build the directed graph with self-loops over ``inst.history_indices`` (or ``nodes``).

    The edge ``(j, i)`` carries the relation of a parsed link from parent ``j``
    to child ``i``; the reverse edge stays ``none`` unless linked itself.
    """
    nodes = tuple(inst.history_indices if nodes is None else nodes)
    n = len(conv)
    relations: dict[tuple[int, int], str] = {}
    if parse is not None:
        for child, parent in parse.parents.items():
            if not 1 <= child <= n or not 0 <= parent <= n:
                raise ValueError(f"parse of {parse.dialogue_id} links {parent}->{child} outside 1..{n}")
        for (parent, child), rel in parse.relations.items():
            if not 1 <= child <= n or not 1 <= parent <= n:
                raise ValueError(f"parse of {parse.dialogue_id} links {parent}->{child} outside 1..{n}")
            relations[(parent, child)] = rel

    adjacent = same_speaker_pairs(conv)
    edges = {}
    for i in nodes:
        for j in nodes:
            if i == j:
                edges[(i, j)] = EdgeFeature(OTHER_SPEAKER, 0, NONE_RELATION)
                continue
            edges[(i, j)] = EdgeFeature(
                SAME_SPEAKER_ADJACENT if (i, j) in adjacent else OTHER_SPEAKER,
                max(-max_distance, min(max_distance, j - i)),
                relations.get((i, j), NONE_RELATION),
            )
    vectors = None
    if node_states is not None:
        vectors = {i: node_states[i] for i in nodes}
    return ConversationGraph(nodes, edges, vectors)


class RelationVocab:
    """Maps relation names to embedding rows: 0 is ``none``.

    With ``arc=True`` every relation collapses to a single has-arc row.
    """

    def __init__(self, relation_types: RelationTypeSet, arc: bool = False):
        self.relation_types = relation_types
        self.arc = arc

    @property
    def size(self) -> int:
        return 2 if self.arc else self.relation_types.size + 1

    def id(self, name: str) -> int:
        if name == NONE_RELATION:
            return 0
        if self.arc:
            return 1
        return 1 + self.relation_types.index(name)


def edge_indices(
    graph: ConversationGraph, relation_vocab: RelationVocab, max_distance: int = DEFAULT_MAX_DISTANCE
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Speaker, distance-bucket and relation ids as ``[n, n]`` tensors in node order."""
    n = len(graph.nodes)
    speaker = torch.zeros(n, n, dtype=torch.long)
    distance = torch.zeros(n, n, dtype=torch.long)
    relation = torch.zeros(n, n, dtype=torch.long)
    for a, i in enumerate(graph.nodes):
        for b, j in enumerate(graph.nodes):
            f = graph.edges[(i, j)]
            speaker[a, b] = SPEAKER_TYPES.index(f.speaker_type)
            distance[a, b] = f.distance + max_distance
            relation[a, b] = relation_vocab.id(f.relation)
    return speaker, distance, relation


def gate_edges(edges: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """``e = e' * sigmoid(W e' + b)``, elementwise."""
    return edges * torch.sigmoid(edges @ weight.T + bias)


class EdgeEmbeddings(nn.Module):
    """Speaker, distance and relation tables plus the edge gate."""

    def __init__(
        self,
        num_relations: int,
        speaker_dim: int = 192,
        distance_dim: int = 192,
        relation_dim: int = 384,
        max_distance: int = DEFAULT_MAX_DISTANCE,
        use_speaker: bool = True,
        use_distance: bool = True,
        use_gate: bool = True,
    ):
        super().__init__()
        self.max_distance = max_distance
        self.speaker = nn.Embedding(len(SPEAKER_TYPES), speaker_dim)
        self.distance = nn.Embedding(2 * max_distance + 1, distance_dim)
        self.relation = nn.Embedding(num_relations, relation_dim)
        self.gate = nn.Linear(self.edge_dim, self.edge_dim)
        # construct everything first so ablations leave other initializations untouched
        if not use_speaker:
            _zero_and_freeze(self.speaker)
        if not use_distance:
            _zero_and_freeze(self.distance)
        if not use_gate:
            self.gate = None

    @property
    def edge_dim(self) -> int:
        return self.speaker.embedding_dim + self.distance.embedding_dim + self.relation.embedding_dim

    def init_edge_vectors(self, speaker: torch.Tensor, distance: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
        """Concatenate the looked-up rows: ``e' = [s ; d ; r]``."""
        for name, idx, table in (("speaker", speaker, self.speaker), ("distance", distance, self.distance),
                                 ("relation", relation, self.relation)):
            if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= table.num_embeddings):
                raise IndexError(f"{name} bucket {int(idx.max())} not in table of {table.num_embeddings} rows")
        return torch.cat([self.speaker(speaker), self.distance(distance), self.relation(relation)], dim=-1)

    def forward(self, speaker: torch.Tensor, distance: torch.Tensor, relation: torch.Tensor) -> torch.Tensor:
        edges = self.init_edge_vectors(speaker, distance, relation)
        if self.gate is None:
            return edges
        return gate_edges(edges, self.gate.weight, self.gate.bias)


def _zero_and_freeze(table: nn.Embedding) -> None:
    with torch.no_grad():
        table.weight.zero_()
    table.weight.requires_grad_(False)
