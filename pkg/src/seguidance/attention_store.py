"""Cross-attention recording, aggregation and per-subject map extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F


class LayerId(NamedTuple):
    group: str  # "down" | "mid" | "up"
    level: int

    def __str__(self) -> str:
        return self.group if self.group == "mid" else f"{self.group}_{self.level}"


class AttentionStoreError(RuntimeError):
    pass


@dataclass
class AttentionRecord:
    layer_id: LayerId
    resolution: int
    probs: torch.Tensor  # [heads, P*P, N]

    def __post_init__(self):
        if self.probs.ndim != 3 or self.probs.shape[1] != self.resolution ** 2:
            raise ValueError(
                f"record for {self.layer_id} has shape {tuple(self.probs.shape)}, "
                f"expected [heads, {self.resolution ** 2}, N]")


@dataclass
class AggregatedAttention:
    per_resolution: dict[int, torch.Tensor]  # P -> [P*P, N]
    timestep: int
    sot_index: int = 0

    def at(self, resolution: int) -> torch.Tensor:
        if resolution not in self.per_resolution:
            raise KeyError(f"resolution {resolution} not aggregated; have {sorted(self.per_resolution)}")
        return self.per_resolution[resolution]


@dataclass
class SubjectMaps:
    maps: dict[str, torch.Tensor]  # subject_id -> [P, P]
    resolution: int


class AttentionStore:
    """Per-generation store of the cross-attention maps of one denoiser pass.

    ``registry`` maps every cross-attention block's LayerId to its patch
    grid side; aggregation refuses to run until each block has reported.
    """

    def __init__(self, registry: dict[LayerId, int]):
        self.registry = dict(registry)
        self.records: dict[LayerId, AttentionRecord] = {}

    def record(self, rec: AttentionRecord) -> None:
        if rec.layer_id not in self.registry:
            raise AttentionStoreError(f"unregistered layer {rec.layer_id}")
        if rec.layer_id in self.records:
            raise AttentionStoreError(f"duplicate record for {rec.layer_id} within one step")
        if self.registry[rec.layer_id] != rec.resolution:
            raise AttentionStoreError(
                f"{rec.layer_id} registered at P={self.registry[rec.layer_id]}, recorded at P={rec.resolution}")
        self.records[rec.layer_id] = rec

    def reset(self) -> None:
        self.records.clear()

    def __len__(self) -> int:
        return len(self.records)

    def aggregate(self, t: int, sot_index: int = 0) -> AggregatedAttention:
        missing = [lid for lid in self.registry if lid not in self.records]
        if missing:
            raise AttentionStoreError(f"missing attention records for {', '.join(map(str, missing))}")
        grouped: dict[int, list[torch.Tensor]] = {}
        for lid, rec in self.records.items():
            grouped.setdefault(rec.resolution, []).append(rec.probs)
        per_res = {}
        for res, probs in sorted(grouped.items(), reverse=True):
            per_res[res] = torch.stack(probs).mean(dim=(0, 1))
        return AggregatedAttention(per_res, t, sot_index)


def reweight_excluding_sot(agg: AggregatedAttention) -> AggregatedAttention:
    """Zero the start-token column and renormalize each patch row."""
    out = {}
    for res, a in agg.per_resolution.items():
        if a.shape[-1] < 2:
            raise ValueError("prompt holds only the start token; nothing left after exclusion")
        keep = torch.ones(a.shape[-1], dtype=a.dtype, device=a.device)
        keep[agg.sot_index] = 0.0
        a = a * keep
        out[res] = a / a.sum(dim=-1, keepdim=True).clamp_min(1e-12)
    return AggregatedAttention(out, agg.timestep, agg.sot_index)


@dataclass(frozen=True)
class GaussianSpec:
    kernel_size: int = 3
    sigma: float = 0.5

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")


IDENTITY_SMOOTHING = GaussianSpec(kernel_size=1, sigma=0.0)


def gaussian_kernel(spec: GaussianSpec) -> torch.Tensor:
    """Normalized 2-D kernel; ``sigma == 0`` or a 1x1 size gives the identity."""
    if spec.kernel_size == 1 or spec.sigma == 0.0:
        k = torch.zeros(spec.kernel_size, spec.kernel_size, dtype=torch.float64)
        c = spec.kernel_size // 2
        k[c, c] = 1.0
        return k
    r = spec.kernel_size // 2
    x = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-(x ** 2) / (2 * spec.sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def _symmetric_index(n: int, r: int) -> torch.Tensor:
    # half-sample symmetric extension: (c b a | a b c | c b a)
    idx = torch.arange(-r, n + r)
    period = 2 * n
    idx = idx % period
    return torch.where(idx >= n, period - 1 - idx, idx)


def smooth(m: torch.Tensor, spec: GaussianSpec) -> torch.Tensor:
    """Convolve a ``[P, P]`` map with a normalized Gaussian.

    Borders use half-sample symmetric padding (edge pixel repeated), under
    which a symmetric kernel conserves the total mass exactly.
    """
    k = gaussian_kernel(spec).to(m.dtype).to(m.device)
    r = spec.kernel_size // 2
    if r == 0:
        return m * k[0, 0]
    rows = _symmetric_index(m.shape[0], r).to(m.device)
    cols = _symmetric_index(m.shape[1], r).to(m.device)
    padded = m[rows][:, cols]
    return F.conv2d(padded[None, None], k[None, None])[0, 0]


def subject_maps(agg: AggregatedAttention, subjects: list[tuple[str, list[int]]], resolution: int,
                 smoothing: GaussianSpec = GaussianSpec()) -> SubjectMaps:
    """Per-subject ``[P, P]`` maps: average the span's token columns, reshape, smooth.

    ``subjects`` holds ``(subject_id, token_indices)`` pairs; multi-token words
    contribute the mean of their columns.
    """
    a = agg.at(resolution)
    n_tokens = a.shape[-1]
    p = int(math.isqrt(a.shape[0]))
    maps = {}
    for sid, idx in subjects:
        if not idx or min(idx) < 0 or max(idx) >= n_tokens:
            raise IndexError(f"subject {sid!r} span {idx} outside [0, {n_tokens})")
        col = a[:, list(idx)].mean(dim=-1)
        maps[sid] = smooth(col.reshape(p, p), smoothing)
    return SubjectMaps(maps, resolution)


def dump_subject_maps(maps: SubjectMaps, out_dir: str | Path, step: int) -> list[Path]:
    """Write each subject map as an 8-bit grayscale PNG scaled by its own max."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for sid, m in maps.maps.items():
        arr = m.detach().cpu().double().numpy()
        peak = arr.max()
        arr = arr / peak if peak > 0 else arr
        img = Image.fromarray(np.round(arr * 255).astype(np.uint8), mode="L")
        path = out_dir / f"step{step:03d}_{sid}.png"
        img.save(path)
        paths.append(path)
    return paths
