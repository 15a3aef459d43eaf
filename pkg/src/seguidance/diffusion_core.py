"""Desk-scale latent diffusion: schedule, codec, denoiser, loss and DDIM."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention_store import AttentionStore, LayerId
from .prompt_adapter import Conditioning, CrossAttentionBlock, Injector


class DivergenceError(FloatingPointError):
    pass


class NonFiniteLatentError(FloatingPointError):
    def __init__(self, step_index: int, where: str = "sampler"):
        self.step_index = step_index
        super().__init__(f"non-finite latent after {where} at step {step_index}")


@dataclass(frozen=True)
class NoiseSchedule:
    num_train_steps: int
    alphas: np.ndarray  # signal scale per timestep
    sigmas: np.ndarray  # noise scale per timestep
    kind: str = "cosine"

    def __post_init__(self):
        a, s = np.asarray(self.alphas), np.asarray(self.sigmas)
        if a.shape != (self.num_train_steps,) or s.shape != (self.num_train_steps,):
            raise ValueError("alphas/sigmas must have num_train_steps entries")
        if not (np.all(a > 0) and np.all(a <= 1) and np.all(s >= 0) and np.all(s < 1)):
            raise ValueError("need alphas in (0, 1] and sigmas in [0, 1)")
        if not (np.all(np.diff(a) < 0) and np.all(np.diff(s) > 0)):
            raise ValueError("alphas must strictly decrease and sigmas strictly increase")
        if np.max(np.abs(a ** 2 + s ** 2 - 1)) > 1e-6:
            raise ValueError("schedule is not variance preserving")

    def alpha(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alphas[t])

    def sigma(self, t: int) -> float:
        return 0.0 if t < 0 else float(self.sigmas[t])


def cosine_alpha_bar(u: np.ndarray, s: float = 0.008) -> np.ndarray:
    f = np.cos((u + s) / (1 + s) * np.pi / 2) ** 2
    return f / np.cos(s / (1 + s) * np.pi / 2) ** 2


def make_noise_schedule(num_train_steps: int = 1000, kind: str = "cosine") -> NoiseSchedule:
    """Variance-preserving schedule with ``alphas[t]**2 + sigmas[t]**2 == 1``.

    ``cosine`` evaluates the squared-cosine signal curve at ``t / T`` so the
    first step is noiseless; ``linear`` is the 1000-step curve of linearly
    spaced betas (1e-4 to 0.02) read off at fraction ``(t + 1) / T``, with
    log-linear interpolation when ``T != 1000``.
    """
    if num_train_steps < 2:
        raise ValueError("num_train_steps must be at least 2")
    t = np.arange(num_train_steps, dtype=np.float64)
    if kind == "cosine":
        alpha_bar = cosine_alpha_bar(t / num_train_steps)
    elif kind == "linear":
        ref = np.concatenate([[0.0], np.cumsum(np.log1p(-np.linspace(1e-4, 0.02, 1000)))])
        alpha_bar = np.exp(np.interp((t + 1) / num_train_steps, np.arange(1001) / 1000, ref))
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alphas = np.sqrt(alpha_bar)
    sigmas = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(num_train_steps, alphas, sigmas, kind)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """``alphas[t] * z0 + sigmas[t] * eps``; ``t`` is an int or a ``[B]`` index tensor."""
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: z0 {tuple(z0.shape)} vs eps {tuple(eps.shape)}")
    tt = torch.as_tensor(t)
    if tt.numel() and (tt.min() < 0 or tt.max() >= sched.num_train_steps):
        raise IndexError(f"timestep out of range [0, {sched.num_train_steps})")
    if tt.ndim == 0:
        return float(sched.alphas[int(tt)]) * z0 + float(sched.sigmas[int(tt)]) * eps
    if tt.shape[0] != z0.shape[0]:
        raise ValueError("need one timestep per batch element")
    # move batch to the trailing axis so the per-sample coefficient broadcasts
    zb = z0.movedim(0, -1)
    eb = eps.movedim(0, -1)
    a = torch.as_tensor(sched.alphas.astype(np.float32))[tt]
    s = torch.as_tensor(sched.sigmas.astype(np.float32))[tt]
    return (a * zb + s * eb).movedim(-1, 0)


class LatentCodec:
    """Fixed image <-> latent map standing in for a trained autoencoder.

    Encoding: rescale to ``[-1, 1]``, 2x2 average pool, then a fixed 1x1 lift
    from 3 to ``channels`` with orthonormal columns. Decoding applies the
    transpose and nearest-neighbour upsampling, so ``decode(encode(x))`` is
    the pooled image.

    Latents are multiplied by ``scale`` so a typical scene has roughly unit
    variance, like the scale factor applied to autoencoder latents. Unscaled,
    the flat gray scenes sit near zero and the x0 estimate at high noise is
    dominated by amplified noise-prediction error.
    """

    def __init__(self, channels: int = 4, factor: int = 2, seed: int = 0, scale: float = 5.0):
        if channels < 3:
            raise ValueError("need at least 3 latent channels")
        g = torch.Generator().manual_seed(seed)
        q, _ = torch.linalg.qr(torch.randn(channels, 3, generator=g, dtype=torch.float64))
        self.lift = q.float()  # [channels, 3]
        self.channels = channels
        self.factor = factor
        self.scale = scale

    @property
    def bound(self) -> float:
        """Largest latent magnitude any image in range can produce."""
        return self.scale * float(self.lift.abs().sum(dim=1).max())

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        x = F.avg_pool2d(images * 2.0 - 1.0, self.factor)
        return self.scale * torch.einsum("kc,bchw->bkhw", self.lift, x)

    def project(self, latents: torch.Tensor) -> torch.Tensor:
        """Nearest latent that decodes to an in-range image: drops the
        component outside the lift's span and clips colors to ``[-1, 1]``."""
        x = torch.einsum("kc,...khw->...chw", self.lift, latents / self.scale).clamp(-1.0, 1.0)
        return self.scale * torch.einsum("kc,...chw->...khw", self.lift, x)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        x = torch.einsum("kc,bkhw->bchw", self.lift, latents / self.scale)
        x = F.interpolate(x, scale_factor=self.factor, mode="nearest")
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(8, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x))) + self.t_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    latent_size: int = 32
    channels: tuple[int, int, int] = (16, 32, 64)
    context_dim: int = 64
    attn_dim: int = 32
    heads: int = 1
    t_dim: int = 64


class Denoiser(nn.Module):
    """Three-level UNet (P = 32, 16, 8) with one cross-attention block per level
    on the way down, one in the middle and one per level on the way up.
    """

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        c0, c1, c2 = cfg.channels
        res = [cfg.latent_size // 2 ** k for k in range(3)]
        self.resolutions = res
        self.t_mlp = nn.Sequential(nn.Linear(cfg.t_dim, cfg.t_dim), nn.SiLU(), nn.Linear(cfg.t_dim, cfg.t_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, c0, 3, padding=1)

        def attn(ch, group, level):
            return CrossAttentionBlock(ch, cfg.context_dim, LayerId(group, level), res[level],
                                       cfg.attn_dim, cfg.heads)

        chans = [c0, c1, c2]
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = c0
        for k, ch in enumerate(chans):
            self.down.append(ResBlock(prev, ch, cfg.t_dim))
            self.down_attn.append(attn(ch, "down", k))
            prev = ch
        self.mid1 = ResBlock(c2, c2, cfg.t_dim)
        self.mid_attn = attn(c2, "mid", 2)
        self.mid2 = ResBlock(c2, c2, cfg.t_dim)
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        prev = c2
        for k in (2, 1, 0):
            self.up.append(ResBlock(prev + chans[k], chans[k], cfg.t_dim))
            self.up_attn.append(attn(chans[k], "up", k))
            prev = chans[k]
        self.norm_out = nn.GroupNorm(8, c0)
        self.conv_out = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    @property
    def attention_blocks(self) -> list[CrossAttentionBlock]:
        return [*self.down_attn, self.mid_attn, *self.up_attn]

    @property
    def attention_registry(self) -> dict[LayerId, int]:
        return {b.layer_id: b.resolution for b in self.attention_blocks}

    def forward(self, z: torch.Tensor, t, cond: Conditioning, store: AttentionStore | None = None,
                injector: Injector | None = None) -> torch.Tensor:
        t = torch.as_tensor(t).reshape(-1).expand(z.shape[0])
        temb = self.t_mlp(timestep_embedding(t, self.cfg.t_dim).to(z.dtype))
        h = self.conv_in(z)
        skips = []
        for k in range(3):
            h = self.down_attn[k](self.down[k](h, temb), cond, store, injector)
            skips.append(h)
            if k < 2:
                h = F.avg_pool2d(h, 2)
        h = self.mid2(self.mid_attn(self.mid1(h, temb), cond, store, injector), temb)
        for i, k in enumerate((2, 1, 0)):
            h = self.up[i](torch.cat([h, skips[k]], dim=1), temb)
            h = self.up_attn[i](h, cond, store, injector)
            if k > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
        return self.conv_out(F.silu(self.norm_out(h)))


def training_loss(model, batch, sched: NoiseSchedule, generator: torch.Generator | None = None) -> torch.Tensor:
    """Noise-prediction MSE at uniformly drawn timesteps."""
    z0, cond = batch
    b = z0.shape[0]
    t = torch.randint(0, sched.num_train_steps, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    zt = add_noise(z0, eps, t, sched)
    loss = F.mse_loss(model(zt, t, cond), eps)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss.item()}")
    return loss


@dataclass(frozen=True)
class LatentState:
    z: torch.Tensor  # [C, H, W]
    t: int
    rng_seed: int
    step_index: int = 0


def inference_timesteps(sched: NoiseSchedule, num_inference_steps: int) -> list[int]:
    """Evenly spaced training timesteps, noisiest first; the step after the
    last one lands on the noiseless end (index -1 means clean)."""
    if not 1 <= num_inference_steps <= sched.num_train_steps:
        raise ValueError("num_inference_steps must lie in [1, num_train_steps]")
    stride = sched.num_train_steps // num_inference_steps
    return [(num_inference_steps - i) * stride - 1 for i in range(num_inference_steps)]


def initial_state(seed: int, sched: NoiseSchedule, num_inference_steps: int,
                  shape: tuple[int, int, int] = (4, 32, 32)) -> LatentState:
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(shape, generator=g)
    return LatentState(z, inference_timesteps(sched, num_inference_steps)[0], seed, 0)


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor | None, scale: float) -> torch.Tensor:
    if scale == 1.0:
        return eps_cond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def predict_noise(state: LatentState, model: Denoiser, cond: Conditioning, uncond: Conditioning | None,
                  guidance_scale: float, store: AttentionStore | None = None,
                  injector: Injector | None = None) -> torch.Tensor:
    if guidance_scale != 1.0 and uncond is None:
        raise ValueError("classifier-free guidance needs an unconditional embedding")
    z = state.z[None]
    eps_c = model(z, state.t, cond, store, injector)
    eps_u = model(z, state.t, uncond) if guidance_scale != 1.0 else None
    return cfg_combine(eps_c, eps_u, guidance_scale)[0]


def ddim_update(state: LatentState, eps: torch.Tensor, sched: NoiseSchedule, t_prev: int,
                clip: float | Callable | None = None) -> LatentState:
    a, s = sched.alpha(state.t), sched.sigma(state.t)
    a_prev, s_prev = sched.alpha(t_prev), sched.sigma(t_prev)
    x0 = (state.z - s * eps) / a
    if clip is not None:
        x0 = clip(x0) if callable(clip) else x0.clamp(-clip, clip)
        if s > 0:
            # keep the direction consistent with the clipped estimate
            eps = (state.z - a * x0) / s
    z_prev = a_prev * x0 + s_prev * eps
    return replace(state, z=z_prev, t=max(t_prev, 0), step_index=state.step_index + 1)


@torch.no_grad()
def ddim_step(state: LatentState, model: Denoiser, cond: Conditioning, sched: NoiseSchedule, step_index: int,
              num_inference_steps: int, guidance_scale: float, uncond: Conditioning | None = None,
              store: AttentionStore | None = None, injector: Injector | None = None,
              clip: float | Callable | None = None) -> LatentState:
    """One deterministic DDIM step with classifier-free guidance."""
    if num_inference_steps > sched.num_train_steps:
        raise ValueError("more inference steps than training steps")
    ts = inference_timesteps(sched, num_inference_steps)
    if state.t != ts[step_index]:
        state = replace(state, t=ts[step_index])
    state = replace(state, step_index=step_index)
    eps = predict_noise(state, model, cond, uncond, guidance_scale, store, injector)
    t_prev = ts[step_index + 1] if step_index + 1 < num_inference_steps else -1
    new = ddim_update(state, eps, sched, t_prev, clip)
    if not torch.isfinite(new.z).all():
        raise NonFiniteLatentError(step_index)
    return new


def sample(model: Denoiser, cond: Conditioning, uncond: Conditioning | None, sched: NoiseSchedule, seed: int,
           num_inference_steps: int = 50, guidance_scale: float = 7.5, shape=(4, 32, 32),
           clip: float | Callable | None = None) -> LatentState:
    """Plain text(+image)-conditioned sampling; the unguided reference pipeline."""
    state = initial_state(seed, sched, num_inference_steps, shape)
    for i in range(num_inference_steps):
        state = ddim_step(state, model, cond, sched, i, num_inference_steps, guidance_scale, uncond, clip=clip)
    return state
