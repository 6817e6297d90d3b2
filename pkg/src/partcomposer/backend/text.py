"""Word-level prompt vocabulary and the toy text encoder.

Concept tokens (``<vN>``, ``<bgN>``) live in their own embedding table,
separate from the base-word table, so stage-1 optimization can target
exactly the concept embeddings and nothing else.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import torch
from torch import nn

WORD_RE = re.compile(r"<v\d+>|<bg\d+>|[a-z]+")

# Words appearing in any prompt template, plus a generic part word used by
# the toy base-model pretraining stage.
TEMPLATE_WORDS = (
    "a photo of partial composed on clean white background "
    "randomly placed components with in part"
).split()

PAD = "<pad>"
UNK = "<unk>"
NULL = "<null>"  # stands in for the empty (unconditional) prompt


def tokenize_words(prompt: str) -> list[str]:
    """Lowercase word/placeholder tokens of a prompt, punctuation dropped."""
    return WORD_RE.findall(prompt.lower())


@dataclass
class PromptVocab:
    """Base words + concept tokens with a fixed sequence length."""

    base_words: list[str]
    concept_tokens: list[str]
    max_len: int = 32

    def __post_init__(self):
        specials = [PAD, UNK, NULL]
        self._base = specials + [w for w in self.base_words if w not in specials]
        self._base_index = {w: i for i, w in enumerate(self._base)}
        self._concept_index = {
            t: len(self._base) + i for i, t in enumerate(self.concept_tokens)
        }

    @classmethod
    def build(cls, categories: list[str], concept_tokens: list[str], max_len: int = 32) -> "PromptVocab":
        words = list(dict.fromkeys(TEMPLATE_WORDS + [c.lower() for c in categories]))
        return cls(base_words=words, concept_tokens=list(concept_tokens), max_len=max_len)

    @property
    def num_base(self) -> int:
        return len(self._base)

    @property
    def num_concepts(self) -> int:
        return len(self.concept_tokens)

    @property
    def pad_id(self) -> int:
        return self._base_index[PAD]

    def encode(self, prompt: str) -> list[int]:
        """Token ids, padded/truncated to ``max_len``. Empty prompts map to
        the dedicated null token."""
        words = tokenize_words(prompt)
        if not words:
            words = [NULL]
        ids = []
        for w in words[: self.max_len]:
            if w in self._concept_index:
                ids.append(self._concept_index[w])
            else:
                ids.append(self._base_index.get(w, self._base_index[UNK]))
        ids += [self.pad_id] * (self.max_len - len(ids))
        return ids

    def concept_positions(self, prompt: str) -> dict[str, int]:
        """First sequence position of each concept token in the prompt."""
        words = tokenize_words(prompt)[: self.max_len]
        out: dict[str, int] = {}
        for pos, w in enumerate(words):
            if w in self._concept_index and w not in out:
                out[w] = pos
        return out

    def to_dict(self) -> dict:
        return {
            "base_words": self.base_words,
            "concept_tokens": self.concept_tokens,
            "max_len": self.max_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptVocab":
        return cls(
            base_words=list(d["base_words"]),
            concept_tokens=list(d["concept_tokens"]),
            max_len=int(d["max_len"]),
        )


@dataclass
class PromptEncoding:
    """A prompt run through the text encoder, ready for cross-attention."""

    prompt: str
    ids: torch.Tensor  # (L,) long
    embeddings: torch.Tensor  # (L, D)
    key_padding_mask: torch.Tensor  # (L,) bool, True = padding
    token_positions: dict[str, int]


class ToyTextEncoder(nn.Module):
    """Embedding tables + a small transformer over the token sequence."""

    def __init__(
        self,
        vocab: PromptVocab,
        dim: int = 128,
        num_layers: int = 2,
        num_heads: int = 4,
        ff_dim: int = 256,
    ):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.base_embedding = nn.Embedding(vocab.num_base, dim)
        self.concept_embedding = nn.Embedding(max(1, vocab.num_concepts), dim)
        # Small positional scale keeps token identity dominant over position,
        # which stabilises attention across prompt templates.
        self.positional = nn.Parameter(torch.randn(vocab.max_len, dim) * 0.01)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=num_heads,
            dim_feedforward=ff_dim,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=num_layers, enable_nested_tensor=False)
        nn.init.normal_(self.base_embedding.weight, std=0.02)
        nn.init.normal_(self.concept_embedding.weight, std=0.02)

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        """Merge base and concept tables by id range."""
        is_concept = ids >= self.vocab.num_base
        safe_base = torch.where(is_concept, torch.zeros_like(ids), ids)
        safe_concept = torch.where(
            is_concept, ids - self.vocab.num_base, torch.zeros_like(ids)
        )
        base = self.base_embedding(safe_base)
        concept = self.concept_embedding(safe_concept)
        return torch.where(is_concept.unsqueeze(-1), concept, base)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, L) -> contextual embeddings (B, L, D)."""
        x = self.embed_ids(ids) + self.positional[: ids.shape[1]]
        pad = ids == self.vocab.pad_id
        return self.encoder(x, src_key_padding_mask=pad)

    def encode_prompt(self, prompt: str, device=None, dtype=None) -> PromptEncoding:
        ids = torch.tensor(self.vocab.encode(prompt), dtype=torch.long, device=device)
        emb = self.forward(ids.unsqueeze(0))[0]
        if dtype is not None:
            emb = emb.to(dtype)
        return PromptEncoding(
            prompt=prompt,
            ids=ids,
            embeddings=emb,
            key_padding_mask=ids == self.vocab.pad_id,
            token_positions=self.vocab.concept_positions(prompt),
        )
