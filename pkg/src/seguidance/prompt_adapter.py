"""Toy text/image encoders and the decoupled text+image cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention_store import AttentionRecord, AttentionStore, LayerId

SOT = "<SoT>"
PAD = "<pad>"


class OutOfVocabularyError(ValueError):
    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        super().__init__(f"out-of-vocabulary words: {', '.join(self.words)}")


class Vocabulary:
    """Token list; a token's id is its position (line number in the file)."""

    def __init__(self, tokens: Sequence[str]):
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if SOT not in tokens:
            raise ValueError(f"vocabulary must contain {SOT}")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def sot_id(self) -> int:
        return self.index[SOT]

    @property
    def pad_id(self) -> int:
        return self.index.get(PAD, self.sot_id)

    def encode(self, words: Sequence[str]) -> list[int]:
        missing = [w for w in words if w not in self.index]
        if missing:
            raise OutOfVocabularyError(missing)
        return [self.index[w] for w in words]

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls([ln.strip() for ln in lines if ln.strip()])

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n")


def default_vocabulary(colors: Sequence[str], shapes: Sequence[str]) -> Vocabulary:
    return Vocabulary([SOT, PAD, "a", "and", *colors, *shapes])


def split_words(prompt: str) -> list[str]:
    return prompt.lower().split()


@dataclass
class Subject:
    subject_id: str
    phrase: str
    reference_images: list[np.ndarray] = field(default_factory=list)
    token_indices: list[int] = field(default_factory=list)


class SubjectSet:
    """Ordered subjects; phrases are matched left to right in the prompt."""

    def __init__(self, subjects: Sequence[Subject]):
        ids = [s.subject_id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate subject ids: {ids}")
        self.subjects = list(subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def spans(self) -> list[tuple[str, list[int]]]:
        return [(s.subject_id, list(s.token_indices)) for s in self.subjects]

    def locate(self, words: Sequence[str], offset: int = 1) -> None:
        """Fill each subject's token indices from its phrase.

        ``offset`` accounts for the start token prepended to ``words``.
        Repeated phrases take successive occurrences.
        """
        used: set[int] = set()
        for s in self.subjects:
            target = split_words(s.phrase)
            k = len(target)
            for i in range(len(words) - k + 1):
                if list(words[i:i + k]) == target and not used.intersection(range(i, i + k)):
                    s.token_indices = [offset + j for j in range(i, i + k)]
                    used.update(range(i, i + k))
                    break
            else:
                raise ValueError(f"subject phrase {s.phrase!r} not found in prompt {' '.join(words)!r}")


@dataclass
class TextEmbedding:
    tokens: list[int]
    features: torch.Tensor | None  # [N, d]
    sot_index: int = 0
    subject_spans: list[tuple[str, list[int]]] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.tokens)
        if n < 2:
            raise ValueError("a text embedding needs the start token plus at least one word")
        if self.sot_index != 0:
            raise ValueError("start token must sit at index 0")
        for sid, idx in self.subject_spans:
            if not idx or min(idx) < 1 or max(idx) >= n:
                raise ValueError(f"subject {sid!r} span {idx} outside [1, {n})")

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)


class TextEncoder(nn.Module):
    """Token embedding + causal self-attention stack (``layers`` deep)."""

    def __init__(self, vocab_size: int, dim: int = 64, max_len: int = 16, layers: int = 2, heads: int = 2):
        super().__init__()
        self.max_len = max_len
        self.embed = nn.Embedding(vocab_size, dim)
        self.pos = nn.Parameter(torch.randn(max_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(dim, heads, dim_feedforward=2 * dim, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        n = ids.shape[-1]
        if n > self.max_len:
            raise ValueError(f"prompt has {n} tokens; encoder handles at most {self.max_len}")
        h = self.embed(ids) + self.pos[:n]
        causal = torch.triu(torch.full((n, n), float("-inf"), device=ids.device), diagonal=1)
        return self.norm(self.blocks(h, mask=causal))


def encode_text(prompt: str, vocabulary: Vocabulary, encoder: TextEncoder | None = None,
                subjects: SubjectSet | None = None) -> TextEmbedding:
    words = split_words(prompt)
    if not words:
        raise ValueError("empty prompt")
    ids = [vocabulary.sot_id, *vocabulary.encode(words)]
    spans = []
    if subjects is not None:
        subjects.locate(words)
        spans = subjects.spans()
    feats = None
    if encoder is not None:
        feats = encoder(torch.tensor([ids]))[0]
    return TextEmbedding(ids, feats, 0, spans)


class ImageEncoder(nn.Module):
    """Four stride-2 conv blocks, global pooling, projection to ``tokens`` text-width tokens."""

    def __init__(self, dim: int = 64, tokens: int = 4, width: int = 32):
        super().__init__()
        chans = [3, width // 2, width, 2 * width, 2 * width]
        blocks = []
        for ci, co in zip(chans[:-1], chans[1:]):
            blocks += [nn.Conv2d(ci, co, 3, stride=2, padding=1), nn.GroupNorm(4, co), nn.SiLU()]
        self.features = nn.Sequential(*blocks)
        self.tokens = tokens
        self.dim = dim
        self.proj = nn.Linear(chans[-1], tokens * dim)
        self.norm = nn.LayerNorm(dim)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        h = self.features((images - 0.5) * 2.0).mean(dim=(2, 3))
        return self.norm(self.proj(h).reshape(-1, self.tokens, self.dim))


def encode_image(image, encoder: ImageEncoder) -> torch.Tensor:
    """``[3, 64, 64]`` image in ``[0, 1]`` -> ``[m, d]`` prompt tokens."""
    x = torch.as_tensor(np.asarray(image), dtype=torch.float32)
    if x.shape != (3, 64, 64):
        raise ValueError(f"expected a [3, 64, 64] image, got {tuple(x.shape)}")
    if x.min() < 0 or x.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return encoder(x[None])[0]


@dataclass
class ImagePromptFeatures:
    per_subject: dict[str, torch.Tensor]  # subject_id -> [m, d]


@dataclass
class Conditioning:
    """Everything a denoiser pass attends to.

    ``images`` holds one ``[B, m, d]`` token tensor per subject, aligned with
    ``subject_ids``. ``text_mask`` marks real (non-padding) tokens.
    """

    text: torch.Tensor  # [B, N, d]
    images: list[torch.Tensor] = field(default_factory=list)
    lam: float = 0.0
    subject_ids: list[str] = field(default_factory=list)
    text_mask: torch.Tensor | None = None
    image_masks: list[torch.Tensor] | None = None  # per subject [B, m], training batches only
    image_keep: torch.Tensor | None = None  # [B] per-sample image-branch switch

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


Injector = Callable[[list[torch.Tensor], LayerId, tuple[int, int]], list[torch.Tensor]]


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).transpose(1, 2)


def attention_probs(q: torch.Tensor, k: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
    """``softmax(q k^T / sqrt(d'))`` for ``q: [B, h, L, d']``, ``k: [B, h, N, d']``."""
    logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    if key_mask is not None:
        logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    return logits.softmax(dim=-1)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, h, n, c = x.shape
    return x.transpose(1, 2).reshape(b, n, h * c)


def cross_attention(f: torch.Tensor, c: torch.Tensor, weights: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
                    heads: int = 1, key_mask: torch.Tensor | None = None,
                    publish: Callable[[torch.Tensor], None] | None = None) -> torch.Tensor:
    """Single- or multi-head cross-attention with matrices ``(W_q, W_k, W_v)``.

    ``f`` is ``[B, HW, C]`` or ``[HW, C]``; ``c`` is ``[B, N, d]`` or ``[N, d]``.
    The probabilities ``[B, heads, HW, N]`` go to ``publish`` before the
    value product.
    """
    squeeze = f.ndim == 2
    if squeeze:
        f, c = f[None], c[None]
    w_q, w_k, w_v = weights
    q = _split_heads(f @ w_q.T, heads)
    probs = attention_probs(q, _split_heads(c @ w_k.T, heads), key_mask)
    if publish is not None:
        publish(probs)
    out = _merge_heads(probs @ _split_heads(c @ w_v.T, heads))
    return out[0] if squeeze else out


class CrossAttentionBlock(nn.Module):
    """Decoupled cross-attention: text branch ``(W_k, W_v)`` plus image branch ``(W'_k, W'_v)``
    sharing one query projection. Residual output ``x + W_o(z)``.
    """

    def __init__(self, channels: int, context_dim: int, layer_id: LayerId, resolution: int,
                 attn_dim: int = 32, heads: int = 1):
        super().__init__()
        if attn_dim % heads or channels % heads:
            raise ValueError("attn_dim and channels must divide evenly into heads")
        self.layer_id = layer_id
        self.resolution = resolution
        self.heads = heads
        self.norm = nn.GroupNorm(8, channels)
        self.to_q = nn.Linear(channels, attn_dim, bias=False)
        self.to_k = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_k_ip = nn.Linear(context_dim, attn_dim, bias=False)
        self.to_v_ip = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)

    @property
    def text_weights(self):
        return self.to_q.weight, self.to_k.weight, self.to_v.weight

    @property
    def image_weights(self):
        return self.to_q.weight, self.to_k_ip.weight, self.to_v_ip.weight

    def forward(self, x: torch.Tensor, cond: Conditioning, store: AttentionStore | None = None,
                injector: Injector | None = None) -> torch.Tensor:
        b, c, h, w = x.shape
        f = self.norm(x).flatten(2).transpose(1, 2)
        publish = None
        if store is not None:
            if b != 1:
                raise ValueError("attention recording supports one sample per pass")

            def publish(probs):
                store.record(AttentionRecord(self.layer_id, self.resolution, probs[0]))

        z = decoupled_attention(f, cond, self, publish=publish, injector=injector, size=(h, w))
        return x + self.to_out(z).transpose(1, 2).reshape(b, c, h, w)


def decoupled_attention(f: torch.Tensor, cond: Conditioning, block: CrossAttentionBlock,
                        publish=None, injector: Injector | None = None,
                        size: tuple[int, int] | None = None) -> torch.Tensor:
    """``z^T + lam * sum_i z^I_i`` with each subject's image attention computed separately.

    ``injector`` rewrites the per-subject image outputs before the sum
    (masked injection); with ``lam == 0`` or no image prompts the image branch
    is skipped and the text output returned as is.
    """
    if cond.lam < 0:
        raise ValueError("lambda must be non-negative")
    z = cross_attention(f, cond.text, block.text_weights, block.heads, cond.text_mask, publish)
    if cond.lam == 0 or not cond.images:
        return z
    masks = cond.image_masks or [None] * len(cond.images)
    z_img = [cross_attention(f, tokens, block.image_weights, block.heads, m)
             for tokens, m in zip(cond.images, masks)]
    if injector is not None:
        if size is None:
            side = int(math.isqrt(f.shape[-2]))
            size = (side, side)
        z_img = injector(z_img, block.layer_id, size)
    z_sum = torch.stack(z_img).sum(dim=0)
    if cond.image_keep is not None:
        z_sum = z_sum * cond.image_keep[:, None, None]
    return z + cond.lam * z_sum
