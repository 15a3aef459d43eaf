"""The generator bundle: encoders, denoiser, null embedding and latent codec."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion_core import Denoiser, DenoiserConfig, LatentCodec
from .prompt_adapter import (
    Conditioning,
    ImageEncoder,
    SubjectSet,
    TextEmbedding,
    TextEncoder,
    Vocabulary,
    default_vocabulary,
    encode_text,
)
from .harness.synth import PALETTE, SHAPES


@dataclass(frozen=True)
class ModelConfig:
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    text_layers: int = 2
    text_heads: int = 2
    max_tokens: int = 16
    image_tokens: int = 4
    image_width: int = 32

    def to_dict(self) -> dict:
        d = asdict(self)
        d["denoiser"]["channels"] = list(d["denoiser"]["channels"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        den = dict(d.pop("denoiser", {}))
        if "channels" in den:
            den["channels"] = tuple(den["channels"])
        return cls(denoiser=DenoiserConfig(**den), **d)


class SubjectDiffusionModel(nn.Module):
    def __init__(self, vocab: Vocabulary | None = None, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        self.vocab = vocab or default_vocabulary(tuple(PALETTE), SHAPES)
        self.cfg = cfg
        d = cfg.denoiser.context_dim
        self.text_encoder = TextEncoder(len(self.vocab), d, cfg.max_tokens, cfg.text_layers, cfg.text_heads)
        self.image_encoder = ImageEncoder(d, cfg.image_tokens, cfg.image_width)
        self.denoiser = Denoiser(cfg.denoiser)
        self.null_text = nn.Parameter(torch.randn(1, d) * 0.02)
        self.codec = LatentCodec(cfg.denoiser.latent_channels)

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        c = self.cfg.denoiser
        return (c.latent_channels, c.latent_size, c.latent_size)

    def encode_prompt(self, prompt: str, subjects: SubjectSet | None = None) -> TextEmbedding:
        return encode_text(prompt, self.vocab, self.text_encoder, subjects)

    def subject_tokens(self, views: list[np.ndarray]) -> torch.Tensor:
        """Tokens of all reference views of one subject, concatenated: ``[views * m, d]``."""
        dtype = next(self.image_encoder.parameters()).dtype
        x = torch.as_tensor(np.stack(views), dtype=dtype)
        return self.image_encoder(x).reshape(-1, self.cfg.denoiser.context_dim)

    def unconditional(self) -> Conditioning:
        return Conditioning(self.null_text[None])

    @torch.no_grad()
    def conditioning(self, prompt: str, subjects: SubjectSet | None = None, lam: float = 0.0):
        """``(text_embedding, cond, uncond)`` for one prompt and its reference images."""
        emb = self.encode_prompt(prompt, subjects)
        images, ids = [], []
        if subjects is not None and lam > 0:
            for s in subjects:
                if s.reference_images:
                    images.append(self.subject_tokens(s.reference_images)[None])
                    ids.append(s.subject_id)
        cond = Conditioning(emb.features[None], images, lam, ids)
        return emb, cond, self.unconditional()

    def decode(self, z: torch.Tensor) -> np.ndarray:
        return self.codec.decode(z[None] if z.ndim == 3 else z)[0].detach().numpy()

    def save(self, path: str | Path, extra: dict | None = None) -> Path:
        meta = {"vocab": self.vocab.tokens, **(extra or {})}
        return save_checkpoint(path, {"kind": "subject_diffusion", **self.cfg.to_dict()}, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "SubjectDiffusionModel":
        arch, state, extra = load_checkpoint(path)
        arch = dict(arch)
        if arch.pop("kind", None) != "subject_diffusion":
            raise ValueError(f"{path} is not a generator checkpoint")
        model = cls(Vocabulary(extra["vocab"]), ModelConfig.from_dict(arch))
        model.load_state_dict(state)
        model.eval()
        return model
