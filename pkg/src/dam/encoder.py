"""Shared context encoder.

Two interchangeable backends produce per-token hidden states: a small
transformer trained from scratch (CPU friendly, used by the tests) and a
pretrained masked-language-model encoder loaded through ``transformers``.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import torch
import torch.nn as nn

from dam.ingestion import EncoderInput

DEFAULT_EMOTIONS = ("happiness", "sadness", "anger", "fear", "surprise", "disgust", "excited", "neutral")

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass
class EncoderConfig:
    hidden_dim: int = 768
    backend: str = "toy"
    max_length: int = 512
    layers: int = 2
    heads: int = 4
    vocab_size: int = 8192
    ffn_dim: int = 0  # 0 means 2 * hidden_dim
    dropout: float = 0.1
    pretrained_name: str = "roberta-base"
    pooling: str = "sum"
    speaker_prefix: bool = True
    emotions: tuple[str, ...] = field(default=DEFAULT_EMOTIONS)

    def __post_init__(self):
        if self.hidden_dim <= 0:
            raise ValueError("hidden_dim must be positive")
        if self.backend not in ("toy", "pretrained"):
            raise ValueError(f"unknown encoder backend {self.backend!r}")
        if self.pooling not in ("sum", "mean"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        self.emotions = tuple(self.emotions)


class ToyTokenizer:
    """Word-level tokenizer hashing lowercased words into a fixed vocabulary.

    Needs no fitting, so a checkpoint only has to record the vocabulary size
    and the emotion list.
    """

    PAD, CLS, SEP, UNK = 0, 1, 2, 3

    def __init__(self, vocab_size: int = 8192, emotions: Sequence[str] = DEFAULT_EMOTIONS):
        self.emotions = tuple(emotions)
        self.num_special = 4 + len(self.emotions)
        if vocab_size <= self.num_special:
            raise ValueError(f"vocab_size {vocab_size} leaves no room for words")
        self.vocab_size = vocab_size
        self.pad_id, self.cls_id, self.sep_id = self.PAD, self.CLS, self.SEP

    def emotion_id(self, emotion: str) -> int:
        try:
            return 4 + self.emotions.index(emotion.lower())
        except ValueError:
            raise KeyError(f"emotion {emotion!r} has no marker token; known: {self.emotions}") from None

    def tokenize(self, text: str) -> list[int]:
        span = self.vocab_size - self.num_special
        return [self.num_special + zlib.crc32(w.encode("utf-8")) % span for w in _WORD_RE.findall(text.lower())]


class HFTokenizer:
    """Adapter giving a ``transformers`` tokenizer the small interface ingestion uses."""

    def __init__(self, tokenizer, emotions: Sequence[str]):
        self.tok = tokenizer
        self.emotions = tuple(emotions)
        self._markers = [f"[E_{e}]" for e in self.emotions]
        self.tok.add_special_tokens({"additional_special_tokens": self._markers})
        self.pad_id = self.tok.pad_token_id
        self.cls_id = self.tok.cls_token_id
        self.sep_id = self.tok.sep_token_id

    @property
    def vocab_size(self) -> int:
        return len(self.tok)

    def emotion_id(self, emotion: str) -> int:
        return self.tok.convert_tokens_to_ids(self._markers[self.emotions.index(emotion.lower())])

    def tokenize(self, text: str) -> list[int]:
        return self.tok(" " + text, add_special_tokens=False)["input_ids"]


class ToyTransformer(nn.Module):
    def __init__(self, config: EncoderConfig, vocab_size: int):
        super().__init__()
        d = config.hidden_dim
        self.tokens = nn.Embedding(vocab_size, d, padding_idx=ToyTokenizer.PAD)
        self.positions = nn.Embedding(config.max_length, d)
        self.norm = nn.LayerNorm(d)
        self.dropout = nn.Dropout(config.dropout)
        layer = nn.TransformerEncoderLayer(
            d, config.heads, config.ffn_dim or 2 * d, dropout=config.dropout, batch_first=True
        )
        self.layers = nn.TransformerEncoder(layer, config.layers, enable_nested_tensor=False)

    def embed(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.tokens(input_ids)

    def forward(self, input_ids=None, attention_mask=None, inputs_embeds=None) -> torch.Tensor:
        if inputs_embeds is None:
            inputs_embeds = self.embed(input_ids)
        length = inputs_embeds.shape[1]
        pos = self.positions(torch.arange(length, device=inputs_embeds.device))
        x = self.dropout(self.norm(inputs_embeds + pos))
        pad = None if attention_mask is None else ~attention_mask.bool()
        return self.layers(x, src_key_padding_mask=pad)


class PretrainedBackend(nn.Module):
    def __init__(self, model):
        super().__init__()
        self.model = model

    def embed(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.model.get_input_embeddings()(input_ids)

    def forward(self, input_ids=None, attention_mask=None, inputs_embeds=None) -> torch.Tensor:
        out = self.model(input_ids=input_ids, attention_mask=attention_mask, inputs_embeds=inputs_embeds)
        return out.last_hidden_state


@dataclass
class EncodedSequence:
    token_states: torch.Tensor  # [L, D]
    cls_state: torch.Tensor  # [D]
    utterance_states: dict[int, torch.Tensor]


def pool_utterances(
    token_states: torch.Tensor,
    spans: Union[Mapping[int, tuple[int, int]], Sequence[tuple[int, int]]],
    mode: str = "sum",
) -> torch.Tensor:
    """Stack one vector per span: the sum (or mean) of its token states.

    ``spans`` are half-open ``(start, end)`` offsets into ``token_states``;
    rows of the result follow the iteration order of ``spans``.
    """
    if isinstance(spans, Mapping):
        spans = list(spans.values())
    length = token_states.shape[0]
    rows = []
    for start, end in spans:
        if end <= start:
            raise ValueError(f"empty span ({start}, {end})")
        if start < 0 or end > length:
            raise ValueError(f"span ({start}, {end}) outside sequence of length {length}")
        chunk = token_states[start:end]
        rows.append(chunk.sum(0) if mode == "sum" else chunk.mean(0))
    if not rows:
        return token_states.new_zeros((0, token_states.shape[-1]))
    return torch.stack(rows)


def pad_ids(sequences: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.bool)
    for row, seq in enumerate(sequences):
        ids[row, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        mask[row, : len(seq)] = True
    return ids, mask


class ContextEncoder(nn.Module):
    """Backend-agnostic encoder shared by the ECEC and parsing heads."""

    def __init__(self, config: EncoderConfig, backend: nn.Module, tokenizer):
        super().__init__()
        self.config = config
        self.backend = backend
        self.tokenizer = tokenizer

    @property
    def hidden_dim(self) -> int:
        return self.config.hidden_dim

    def forward(self, input_ids: torch.Tensor, attention_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.backend(input_ids=input_ids, attention_mask=attention_mask)

    def encode_batch(self, sequences: Sequence[Sequence[int]]) -> torch.Tensor:
        ids, mask = pad_ids(sequences, self.tokenizer.pad_id)
        device = next(self.parameters()).device
        return self(ids.to(device), mask.to(device))

    def encode(self, enc_input: EncoderInput) -> EncodedSequence:
        if len(enc_input) > self.config.max_length:
            raise ValueError(f"{enc_input.name}: {len(enc_input)} tokens exceed max_length {self.config.max_length}")
        states = self.encode_batch([enc_input.input_ids])[0]
        pooled = pool_utterances(states, enc_input.utterance_spans, self.config.pooling)
        return EncodedSequence(
            token_states=states,
            cls_state=states[0],
            utterance_states={h: pooled[k] for k, h in enumerate(enc_input.utterance_spans)},
        )


def build_encoder(config: EncoderConfig, tokenizer_dir: Optional[Path] = None) -> ContextEncoder:
    """Construct an encoder; ``tokenizer_dir`` restores saved pretrained tokenizer assets."""
    if config.backend == "toy":
        tok = ToyTokenizer(config.vocab_size, config.emotions)
        return ContextEncoder(config, ToyTransformer(config, tok.vocab_size), tok)

    from transformers import AutoModel, AutoTokenizer

    source = str(tokenizer_dir) if tokenizer_dir is not None else config.pretrained_name
    tok = HFTokenizer(AutoTokenizer.from_pretrained(source), config.emotions)
    model = AutoModel.from_pretrained(config.pretrained_name)
    model.resize_token_embeddings(tok.vocab_size)
    if model.config.hidden_size != config.hidden_dim:
        raise ValueError(
            f"{config.pretrained_name} has hidden size {model.config.hidden_size}, config says {config.hidden_dim}"
        )
    return ContextEncoder(config, PretrainedBackend(model), tok)


def save_tokenizer_assets(encoder: ContextEncoder, directory: Path) -> None:
    if isinstance(encoder.tokenizer, HFTokenizer):
        encoder.tokenizer.tok.save_pretrained(str(directory / "tokenizer"))
