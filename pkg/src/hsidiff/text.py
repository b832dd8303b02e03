"""Caption tokenization and the trainable text encoder.

Captions are lowercased and split on whitespace/punctuation into a closed
word vocabulary.  Sequences use the fixed-length-77 convention with START,
END, and PAD ids; the encoder is a small pre-norm transformer whose pooled
output is the embedding at the END position.  A learned "null" embedding of
the same shape stands in for dropped conditioning.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cube import CaptionCorpus
from .errors import ArgumentError, FormatError
from .nnutil import MultiHeadAttention, FeedForward, init_linear_, sinusoid_table, uniform_init_

SEQ_LEN = 77
MAX_WORDS = SEQ_LEN - 2

PAD_ID = 0
START_ID = 1
END_ID = 2
UNK_ID = 3
_SPECIALS = {"<pad>": PAD_ID, "<start>": START_ID, "<end>": END_ID, "<unk>": UNK_ID}

_WORD_RE = re.compile(r"[a-z0-9]+")


def split_words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Word → id map with dense ids; 0..3 are reserved for specials."""

    token_to_id: dict[str, int]

    def __post_init__(self) -> None:
        ids = list(self.token_to_id.values())
        if len(set(ids)) != len(ids):
            raise ArgumentError("vocabulary ids must be unique")
        if any(i < 4 for i in ids):
            raise ArgumentError("word ids 0..3 are reserved for specials")

    @property
    def size(self) -> int:
        return 4 + len(self.token_to_id)

    def id_of(self, word: str) -> int:
        return self.token_to_id.get(word.lower(), UNK_ID)

    def word_of(self, token_id: int) -> str:
        for word, wid in self.token_to_id.items():
            if wid == token_id:
                return word
        return {PAD_ID: "pad", START_ID: "start", END_ID: "end"}.get(token_id, "unk")

    def to_json(self) -> str:
        table = dict(_SPECIALS)
        table.update(self.token_to_id)
        return json.dumps(table, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            table = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"bad vocabulary JSON: {exc}") from exc
        words = {w: int(i) for w, i in table.items() if w not in _SPECIALS}
        return cls(token_to_id=words)


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(vocab.to_json(), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    return Vocabulary.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(corpus: CaptionCorpus) -> Vocabulary:
    """Assign dense ids by first occurrence, scanning classes in sorted order."""
    if not corpus.entries:
        raise ArgumentError("caption corpus is empty")
    table: dict[str, int] = {}
    next_id = 4
    for cls in sorted(corpus.entries):
        for caption in corpus.entries[cls]:
            for word in split_words(caption):
                if word not in table:
                    table[word] = next_id
                    next_id += 1
    return Vocabulary(token_to_id=table)


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence: [START, words..., END, PAD...]."""

    ids: np.ndarray
    real_length: int

    def __post_init__(self) -> None:
        if self.ids.shape != (SEQ_LEN,):
            raise ArgumentError(f"token sequence must have length {SEQ_LEN}")
        if self.ids[0] != START_ID:
            raise ArgumentError("token sequence must start with START")
        if not (2 <= self.real_length <= SEQ_LEN):
            raise ArgumentError("real_length out of range")


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    """Encode a caption; words beyond the 75-slot budget are truncated."""
    words = split_words(text)[:MAX_WORDS]
    ids = np.zeros(SEQ_LEN, dtype=np.int64)
    ids[0] = START_ID
    for i, word in enumerate(words):
        ids[1 + i] = vocab.id_of(word)
    ids[1 + len(words)] = END_ID
    return TokenSequence(ids=ids, real_length=len(words) + 2)


@dataclass(frozen=True)
class TextEmbedding:
    """Per-token conditioning matrix plus its pooled (END-position) vector."""

    tokens_emb: torch.Tensor
    pooled: torch.Tensor

    def __post_init__(self) -> None:
        if self.tokens_emb.shape[-2] != SEQ_LEN:
            raise ArgumentError(f"embedding must cover {SEQ_LEN} token rows")


def mix_captions(c_a: TextEmbedding, c_b: TextEmbedding, area_ratio: float) -> TextEmbedding:
    """Convex combination of two caption embeddings, weighted by clipped area."""
    if not (0.0 <= area_ratio <= 1.0):
        raise ArgumentError(f"area_ratio must lie in [0, 1], got {area_ratio}")
    r = float(area_ratio)
    return TextEmbedding(
        tokens_emb=r * c_a.tokens_emb + (1.0 - r) * c_b.tokens_emb,
        pooled=r * c_a.pooled + (1.0 - r) * c_b.pooled,
    )


@dataclass(frozen=True)
class TextEncoderConfig:
    vocab_size: int
    d_emb: int = 64
    layers: int = 3
    heads: int = 8

    def __post_init__(self) -> None:
        if self.vocab_size < 4:
            raise ArgumentError("vocab_size must cover the special ids")
        if self.d_emb % self.heads != 0:
            raise ArgumentError("d_emb must be divisible by heads")
        if self.layers < 1:
            raise ArgumentError("need at least one layer")


class _TextLayer(nn.Module):
    def __init__(self, d_emb: int, heads: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_emb, dtype=dtype)
        self.attn = MultiHeadAttention(d_emb, heads, gen, dtype=dtype)
        self.ln2 = nn.LayerNorm(d_emb, dtype=dtype)
        self.mlp = FeedForward(d_emb, gen, dtype=dtype)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_lengths=lengths)[0]
        return x + self.mlp(self.ln2(x))


class TextEncoder(nn.Module):
    """Pre-norm transformer over 77 tokens with PAD positions masked out.

    Ids at or beyond real_length are coerced to PAD before embedding and
    excluded from attention keys, so output is invariant to PAD-tail content.
    """

    def __init__(self, config: TextEncoderConfig, seed: int = 0, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(seed)
        d = config.d_emb
        # Default layer construction draws from the global RNG before the
        # seeded re-initialization below; fork so callers see no side effect.
        with torch.random.fork_rng(devices=[]):
            self.tok_emb = nn.Parameter(torch.empty(config.vocab_size, d, dtype=dtype))
            uniform_init_(self.tok_emb, d, gen)
            self.register_buffer(
                "pos", sinusoid_table(np.arange(SEQ_LEN), d).to(dtype), persistent=False
            )
            self.blocks = nn.ModuleList(
                [_TextLayer(d, config.heads, gen, dtype) for _ in range(config.layers)]
            )
            self.final_ln = nn.LayerNorm(d, dtype=dtype)
            self.null_tokens = nn.Parameter(torch.empty(SEQ_LEN, d, dtype=dtype))
            uniform_init_(self.null_tokens, d, gen)

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """ids (B, 77) int64, lengths (B,) → embeddings (B, 77, d_emb)."""
        pos = torch.arange(SEQ_LEN, device=ids.device)
        ids = torch.where(pos[None, :] < lengths[:, None], ids, torch.zeros_like(ids))
        x = self.tok_emb[ids] + self.pos[None, :, :]
        for block in self.blocks:
            x = block(x, lengths)
        return self.final_ln(x)

    def encode(self, tokens: TokenSequence) -> TextEmbedding:
        ids = torch.as_tensor(tokens.ids[None, :])
        lengths = torch.as_tensor([tokens.real_length])
        emb = self.forward(ids, lengths)[0]
        return TextEmbedding(tokens_emb=emb, pooled=emb[tokens.real_length - 1])

    def null_embedding(self) -> TextEmbedding:
        # Pooled row mirrors the END position of an empty caption (index 1).
        return TextEmbedding(tokens_emb=self.null_tokens, pooled=self.null_tokens[1])
