"""DAM model: shared encoder, parser head, edge embeddings, gated GNN and cause classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from dam.config import DAMConfig
from dam.data import AnnotatedDialogue, ECECInstance, RelationTypeSet
from dam.encoder import ContextEncoder, build_encoder, pool_utterances
from dam.gnn import GatedGNN, GNNConfig, readout
from dam.graph import EdgeEmbeddings, RelationVocab, build_graph, edge_indices
from dam.ingestion import DatasetSplit, EncoderInput, serialize_instance, tokenize_input
from dam.parser import DiscourseParser, ParseResult, StandaloneParser, parser_loss

logger = logging.getLogger(__name__)

NEGATIVE, POSITIVE = 0, 1


def final_representation(cls_state: torch.Tensor, *parts: Optional[torch.Tensor]) -> torch.Tensor:
    """``h_i = [v_cls ; E_hat_{i,t} ; ...]``; ``None`` parts are skipped."""
    return torch.cat([cls_state, *(p for p in parts if p is not None)], dim=-1)


def classify(h: torch.Tensor, head: nn.Linear) -> tuple[torch.Tensor, torch.Tensor]:
    """Class distribution and argmax prediction; a tie goes to the negative class."""
    probs = torch.softmax(head(h), dim=-1)
    return probs, torch.argmax(probs, dim=-1)


def ecec_loss(logits: torch.Tensor, gold: torch.Tensor, class_weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Summed negative log-likelihood of the gold classes."""
    return F.cross_entropy(logits, gold, weight=class_weights, reduction="sum")


@dataclass
class PreparedExample:
    instance: ECECInstance
    enc_input: EncoderInput
    nodes: tuple[int, ...]
    candidate_pos: int
    target_pos: int
    speaker: torch.Tensor
    distance: torch.Tensor
    relation: torch.Tensor
    cat_feature: Optional[torch.Tensor] = None

    @property
    def label(self) -> int:
        return self.instance.gold_label


def _pad_square(mats: Sequence[torch.Tensor], size: int) -> torch.Tensor:
    out = torch.zeros(len(mats), size, size, dtype=torch.long)
    for b, m in enumerate(mats):
        out[b, : m.shape[0], : m.shape[1]] = m
    return out


class DAMModel(nn.Module):
    def __init__(self, config: DAMConfig, relation_types: RelationTypeSet, encoder: Optional[ContextEncoder] = None):
        super().__init__()
        self.config = config
        self.relation_types = relation_types
        spec = config.variant_spec
        ablation = config.ablation
        hidden = config.encoder.hidden_dim
        self.relation_vocab = RelationVocab(relation_types, arc=spec.relations == "arc")

        # every submodule is built in a fixed order so that variants share initializations
        self.encoder = encoder if encoder is not None else build_encoder(config.encoder)
        self.parser = DiscourseParser(
            hidden, relation_types.size, config.parser.gru_dim, config.parser.link_dim, config.parser.rel_dim
        )
        g = config.graph
        self.edges = EdgeEmbeddings(
            self.relation_vocab.size, g.speaker_dim, g.distance_dim, g.relation_dim, g.max_distance,
            use_speaker=not ablation.no_speaker,
            use_distance=not ablation.no_distance,
            use_gate=spec.gate and not ablation.no_gate,
        )
        self.gnn = GatedGNN(GNNConfig(config.gnn.iterations, config.gnn.heads, hidden, g.edge_dim))
        if not spec.gnn:
            self.edges = None
            self.gnn = None

        final_dim = hidden
        if spec.gnn:
            final_dim += 2 * g.edge_dim
        if spec.cat:
            final_dim += config.rel_dim
        self.head = nn.Linear(final_dim, 2)

    @property
    def final_dim(self) -> int:
        return self.head.in_features

    # -- data preparation -------------------------------------------------

    def prepare(
        self,
        split: DatasetSplit,
        parses: Optional[Mapping[str, ParseResult]] = None,
        pair_hidden: Optional[Mapping[str, torch.Tensor]] = None,
    ) -> list[PreparedExample]:
        """Tokenize triples and build their graphs once, ahead of training or inference."""
        spec = self.config.variant_spec
        out = []
        for inst in split.instances:
            if not self.config.data.include_self_cause and inst.candidate_index == inst.target_index:
                continue
            conv = split.conversations[inst.conversation_id]
            serialized = serialize_instance(inst, conv, self.config.encoder.speaker_prefix)
            enc_input = tokenize_input(serialized, self.encoder.tokenizer, self.config.encoder.max_length)
            nodes = enc_input.kept_history
            parse = None
            if spec.gnn and spec.relations != "none":
                parse = parses[inst.conversation_id]
            graph = build_graph(inst, conv, parse, max_distance=self.config.graph.max_distance, nodes=nodes)
            speaker, distance, relation = edge_indices(graph, self.relation_vocab, self.config.graph.max_distance)
            cat = None
            if spec.cat:
                cat = pair_hidden[inst.conversation_id][inst.target_index, inst.candidate_index]
            out.append(
                PreparedExample(
                    inst, enc_input, nodes, nodes.index(inst.candidate_index), nodes.index(inst.target_index),
                    speaker, distance, relation, cat,
                )
            )
        return out

    # -- forward ------------------------------------------------------------

    def _device(self) -> torch.device:
        return self.head.weight.device

    def encode(self, batch: Sequence[PreparedExample]) -> torch.Tensor:
        return self.encoder.encode_batch([ex.enc_input.input_ids for ex in batch])

    def edge_states(self, batch: Sequence[PreparedExample], gated: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
        """Initial edge vectors ``[B, N, N, E]`` (gated unless ``gated=False``) and node mask ``[B, N]``."""
        device = self._device()
        size = max(len(ex.nodes) for ex in batch)
        speaker = _pad_square([ex.speaker for ex in batch], size).to(device)
        distance = _pad_square([ex.distance for ex in batch], size).to(device)
        relation = _pad_square([ex.relation for ex in batch], size).to(device)
        mask = torch.zeros(len(batch), size, dtype=torch.bool, device=device)
        for b, ex in enumerate(batch):
            mask[b, : len(ex.nodes)] = True
        if gated:
            return self.edges(speaker, distance, relation), mask
        return self.edges.init_edge_vectors(speaker, distance, relation), mask

    def representations(self, batch: Sequence[PreparedExample]) -> torch.Tensor:
        """Final representation ``h_i`` for every example of the batch."""
        token_states = self.encode(batch)
        cls = token_states[:, 0]
        graph_part = cat_part = None
        if self.gnn is not None:
            edges, mask = self.edge_states(batch)
            size = mask.shape[1]
            nodes = token_states.new_zeros(len(batch), size, token_states.shape[-1])
            for b, ex in enumerate(batch):
                pooled = pool_utterances(token_states[b], ex.enc_input.utterance_spans, self.config.encoder.pooling)
                nodes[b, : pooled.shape[0]] = pooled
            _, edges = self.gnn(nodes, edges, mask)
            device = edges.device
            cand = torch.tensor([ex.candidate_pos for ex in batch], device=device)
            tgt = torch.tensor([ex.target_pos for ex in batch], device=device)
            graph_part = readout(edges, cand, tgt)
        if self.config.variant_spec.cat:
            cat_part = torch.stack([ex.cat_feature for ex in batch]).to(cls)
        return final_representation(cls, graph_part, cat_part)

    def forward(self, batch: Sequence[PreparedExample]) -> torch.Tensor:
        """Class logits ``[B, 2]``."""
        return self.head(self.representations(batch))

    def discourse_loss(self, dialogues: Sequence[AnnotatedDialogue]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Parser NLL over a batch of dialogues through the shared encoder."""
        vectors = self.parser.edu_vectors(dialogues, self.encoder, self.config.encoder.speaker_prefix)
        l_link = l_rel = self.head.weight.new_zeros(())
        for d, x in zip(dialogues, vectors):
            link, rel = self.parser.scores(self.parser.contextualize(x))
            a, b, _ = parser_loss(d, link, rel, self.relation_types)
            l_link = l_link + a
            l_rel = l_rel + b
        return l_link, l_rel, l_link + l_rel

    @torch.no_grad()
    def predict(self, examples: Sequence[PreparedExample], batch_size: int = 8) -> tuple[list[float], list[int]]:
        """Positive-class probabilities and argmax predictions, in example order."""
        was_training = self.training
        self.eval()
        probs, preds = [], []
        for start in range(0, len(examples), batch_size):
            batch = examples[start : start + batch_size]
            p, y = classify(self.representations(batch), self.head)
            probs.extend(p[:, POSITIVE].tolist())
            preds.extend(y.tolist())
        self.train(was_training)
        return probs, preds


def build_edge_parser(config: DAMConfig, relation_types: RelationTypeSet) -> StandaloneParser:
    encoder = build_encoder(config.encoder)
    head = DiscourseParser(
        config.encoder.hidden_dim, relation_types.size, config.parser.gru_dim, config.parser.link_dim,
        config.parser.rel_dim,
    )
    return StandaloneParser(encoder, head, relation_types, config.encoder.speaker_prefix)
