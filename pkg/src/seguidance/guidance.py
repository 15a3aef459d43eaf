"""Subject-enhanced attention guidance at sampling time.

Forward guidance confines each subject's image-attention output to the
region its text token attends to; backward guidance nudges the latent until
every subject token owns at least one strongly attending patch.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .attention_store import (
    AttentionStore,
    GaussianSpec,
    LayerId,
    SubjectMaps,
    dump_subject_maps,
    reweight_excluding_sot,
    subject_maps,
)
from .diffusion_core import (
    LatentState,
    NoiseSchedule,
    NonFiniteLatentError,
    ddim_step,
    inference_timesteps,
    initial_state,
)
from .prompt_adapter import Conditioning, SubjectSet

log = logging.getLogger(__name__)

LAYER_GROUPS = ("down", "mid", "up")


@dataclass
class GuidanceConfig:
    lam: float = 1.0
    mu: float = 0.8
    eta0: float = 20.0
    eta_decay: str = "linear"
    mask_threshold_rule: str = "half_max"
    forward_layers: frozenset = frozenset(LAYER_GROUPS)
    forward_enabled: bool = True
    backward_enabled: bool = True
    refine_steps: dict = field(default_factory=lambda: {5: 0.5, 10: 0.8})
    max_refine_iters: int = 20
    guided_step_window: int = 25
    resolution: int = 16
    smoothing: GaussianSpec = field(default_factory=GaussianSpec)
    reweight_sot: bool = True
    num_inference_steps: int = 50
    guidance_scale: float = 7.5

    def __post_init__(self):
        self.forward_layers = frozenset(self.forward_layers)
        self.refine_steps = {int(k): float(v) for k, v in self.refine_steps.items()}
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.mu <= 1.0:
            raise ValueError("mu must lie in [0, 1]")
        if self.eta0 <= 0:
            raise ValueError("eta0 must be > 0")
        if self.eta_decay not in ("linear", "sqrt_alpha"):
            raise ValueError(f"unknown eta_decay {self.eta_decay!r}")
        if self.mask_threshold_rule != "half_max":
            raise ValueError(f"unknown mask_threshold_rule {self.mask_threshold_rule!r}")
        if not self.forward_layers <= set(LAYER_GROUPS):
            raise ValueError(f"forward_layers must be a subset of {LAYER_GROUPS}")
        if any(not 0.0 < v <= 1.0 for v in self.refine_steps.values()):
            raise ValueError("refinement thresholds must lie in (0, 1]")
        if self.max_refine_iters < 1:
            raise ValueError("max_refine_iters must be >= 1")
        if self.guided_step_window < 0:
            raise ValueError("guided_step_window must be >= 0")

    def echo(self) -> dict:
        """JSON-friendly copy of every field."""
        return {
            "lambda": self.lam, "mu": self.mu, "eta0": self.eta0, "eta_decay": self.eta_decay,
            "mask_threshold_rule": self.mask_threshold_rule,
            "forward_layers": sorted(self.forward_layers, key=LAYER_GROUPS.index),
            "forward_enabled": self.forward_enabled, "backward_enabled": self.backward_enabled,
            "refine_steps": {str(k): v for k, v in sorted(self.refine_steps.items())},
            "max_refine_iters": self.max_refine_iters, "guided_step_window": self.guided_step_window,
            "resolution": self.resolution,
            "smoothing": {"kernel_size": self.smoothing.kernel_size, "sigma": self.smoothing.sigma},
            "reweight_sot": self.reweight_sot, "num_inference_steps": self.num_inference_steps,
            "guidance_scale": self.guidance_scale,
        }


def compute_mask(a: torch.Tensor) -> torch.Tensor:
    """Binary mask of patches above half the map's maximum."""
    if not torch.isfinite(a).all() or (a < 0).any():
        raise ValueError("attention map must be finite and non-negative")
    peak = a.max()
    if peak <= 0:
        raise ValueError("all-zero attention map; cannot locate the subject")
    return (a > peak / 2).to(a.dtype)


def resize_mask(mask: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(mask.shape) == tuple(size):
        return mask
    return F.interpolate(mask[None, None], size=size, mode="nearest")[0, 0]


def forward_inject(z_img: list[torch.Tensor], masks: list[torch.Tensor], mu: float,
                   size: tuple[int, int]) -> list[torch.Tensor]:
    """``(1 - mu) * z + mu * M * z`` per subject.

    ``z_img`` entries are ``[..., H*W, C]``; masks are resampled (nearest) to
    ``size`` first.
    """
    if len(z_img) != len(masks):
        raise ValueError(f"{len(z_img)} image outputs but {len(masks)} masks")
    if mu == 0.0:
        return list(z_img)
    out = []
    for z, m in zip(z_img, masks):
        m = resize_mask(m, size).reshape(-1, 1).to(z.dtype)
        if m.shape[0] != z.shape[-2]:
            raise ValueError(f"mask covers {m.shape[0]} patches, features have {z.shape[-2]}")
        out.append((1.0 - mu) * z + mu * (m * z))
    return out


class ForwardInjector:
    """Applies ``forward_inject`` inside the selected layer groups."""

    def __init__(self, masks: dict[str, torch.Tensor], subject_ids: list[str], mu: float, layers):
        self.masks = [masks[sid] for sid in subject_ids]
        self.mu = mu
        self.layers = frozenset(layers)
        self.calls: list[LayerId] = []

    def __call__(self, z_img, layer_id: LayerId, size):
        if layer_id.group not in self.layers:
            return z_img
        self.calls.append(layer_id)
        return forward_inject(z_img, self.masks, self.mu, size)


def subject_scores(maps: SubjectMaps) -> dict[str, torch.Tensor]:
    """Each subject's strongest patch."""
    return {sid: m.max() for sid, m in maps.maps.items()}


def backward_loss(maps: SubjectMaps) -> torch.Tensor:
    """``1 - min over subjects of (max over patches)``."""
    if not maps.maps:
        raise ValueError("backward loss needs at least one subject")
    return 1.0 - torch.stack(list(subject_scores(maps).values())).min()


def latent_update(state: LatentState, loss_grad: torch.Tensor, eta_t: float) -> LatentState:
    """One gradient-descent step on the latent; timestep is kept."""
    if eta_t <= 0:
        raise ValueError("step size must be > 0")
    if loss_grad.shape != state.z.shape:
        raise ValueError(f"gradient shape {tuple(loss_grad.shape)} != latent shape {tuple(state.z.shape)}")
    if not torch.isfinite(loss_grad).all():
        raise FloatingPointError(f"non-finite gradient at step {state.step_index}")
    return replace(state, z=state.z - eta_t * loss_grad)


def eta_schedule(step_index: int, num_inference_steps: int, cfg: GuidanceConfig,
                 sched: NoiseSchedule | None = None) -> float:
    if not 0 <= step_index < num_inference_steps:
        raise ValueError("step_index outside the sampling run")
    if cfg.eta_decay == "linear":
        return cfg.eta0 * (1.0 - step_index / num_inference_steps)
    if sched is None:
        raise ValueError("sqrt_alpha decay needs the noise schedule")
    t = inference_timesteps(sched, num_inference_steps)[step_index]
    return cfg.eta0 * float(np.sqrt(1.0 - sched.alphas[t]))


def attention_maps(denoiser, z: torch.Tensor, t: int, cond: Conditioning, spans, cfg: GuidanceConfig,
                   injector=None) -> SubjectMaps:
    """Run the conditional branch once and return smoothed per-subject maps."""
    store = AttentionStore(denoiser.attention_registry)
    denoiser(z[None], t, cond, store, injector)
    return maps_from_store(store, t, spans, cfg)


def maps_from_store(store: AttentionStore, t: int, spans, cfg: GuidanceConfig) -> SubjectMaps:
    agg = store.aggregate(t)
    if cfg.reweight_sot:
        agg = reweight_excluding_sot(agg)
    return subject_maps(agg, spans, cfg.resolution, cfg.smoothing)


def loss_and_grad(state: LatentState, denoiser, cond: Conditioning, spans, cfg: GuidanceConfig):
    z = state.z.detach().requires_grad_(True)
    with torch.enable_grad():
        loss = backward_loss(attention_maps(denoiser, z, state.t, cond, spans, cfg))
        (grad,) = torch.autograd.grad(loss, z)
    return loss.detach(), grad


@dataclass
class RefineResult:
    state: LatentState
    step_index: int
    iterations: int
    loss: float
    initial_min_attention: float
    final_min_attention: float
    threshold: float
    reached: bool


def refine_until_threshold(state: LatentState, step_index: int, denoiser, cond: Conditioning, cfg: GuidanceConfig,
                           spans, sched: NoiseSchedule | None = None) -> RefineResult:
    """Repeat loss -> gradient -> latent update until every subject's peak
    attention reaches the threshold for this step, or the iteration cap."""
    if step_index not in cfg.refine_steps:
        raise ValueError(f"step {step_index} has no refinement threshold")
    threshold = cfg.refine_steps[step_index]
    eta = eta_schedule(step_index, cfg.num_inference_steps, cfg, sched)
    loss, grad = loss_and_grad(state, denoiser, cond, spans, cfg)
    initial = 1.0 - float(loss)
    iters = 0
    while 1.0 - float(loss) < threshold and iters < cfg.max_refine_iters:
        state = latent_update(state, grad, eta)
        if not torch.isfinite(state.z).all():
            raise NonFiniteLatentError(step_index, "refinement")
        iters += 1
        loss, grad = loss_and_grad(state, denoiser, cond, spans, cfg)
    reached = 1.0 - float(loss) >= threshold
    if not reached:
        log.info("refinement at step %d stopped after %d iterations at min attention %.3f (< %.2f)",
                 step_index, iters, 1.0 - float(loss), threshold)
    return RefineResult(state, step_index, iters, float(loss), initial, 1.0 - float(loss), threshold, reached)


@dataclass
class GenerationResult:
    image: np.ndarray
    latent: torch.Tensor
    seconds: float
    refinements: list[RefineResult] = field(default_factory=list)
    min_attention: list[float] = field(default_factory=list)  # per backward-guided step, before update
    injected_layers: list[LayerId] = field(default_factory=list)


def guided_generate(prompt: str, subjects: SubjectSet, cfg: GuidanceConfig, model, sched: NoiseSchedule,
                    seed: int, dump_attn: str | None = None) -> GenerationResult:
    """Sample one image with forward and/or backward guidance.

    Per step inside the guided window: (1) backward guidance updates the
    latent (threshold refinement at the configured steps, one update
    elsewhere); (2) the denoiser pass injects image features through masks
    taken from the previous step's attention; (3) DDIM update.
    """
    start = time.perf_counter()
    emb, cond, uncond = model.conditioning(prompt, subjects, cfg.lam)
    spans = emb.subject_spans
    den = model.denoiser
    n = cfg.num_inference_steps
    clip = model.codec.project
    state = initial_state(seed, sched, n, model.latent_shape)
    state = replace(state, step_index=0)
    masks: dict[str, torch.Tensor] | None = None
    result = GenerationResult(np.empty(0), state.z, 0.0)
    for i in range(n):
        ts = inference_timesteps(sched, n)
        state = replace(state, t=ts[i], step_index=i)
        guided = i < cfg.guided_step_window
        if cfg.backward_enabled and guided and spans:
            if i in cfg.refine_steps:
                r = refine_until_threshold(state, i, den, cond, cfg, spans, sched)
                result.refinements.append(r)
                result.min_attention.append(r.initial_min_attention)
                state = r.state
            else:
                loss, grad = loss_and_grad(state, den, cond, spans, cfg)
                result.min_attention.append(1.0 - float(loss))
                state = latent_update(state, grad, eta_schedule(i, n, cfg, sched))
        forward = cfg.forward_enabled and guided and cond.images and spans
        injector = None
        if forward and masks is not None:
            injector = ForwardInjector(masks, cond.subject_ids, cfg.mu, cfg.forward_layers)
        store = AttentionStore(den.attention_registry) if (forward or dump_attn) else None
        state = ddim_step(state, den, cond, sched, i, n, cfg.guidance_scale, uncond, store, injector, clip)
        if injector is not None:
            result.injected_layers.extend(injector.calls)
        if store is not None:
            with torch.no_grad():
                maps = maps_from_store(store, ts[i], spans, cfg)
            if forward:
                masks = {sid: compute_mask(m) for sid, m in maps.maps.items()}
            if dump_attn:
                dump_subject_maps(maps, dump_attn, i)
    result.latent = state.z
    result.image = model.decode(state.z)
    result.seconds = time.perf_counter() - start
    return result


def baseline_generate(prompt: str, subjects: SubjectSet | None, model, sched: NoiseSchedule, seed: int,
                      lam: float = 0.0, num_inference_steps: int = 50, guidance_scale: float = 7.5):
    """Unguided sampler, kept separate from the guided loop for equivalence checks."""
    from .diffusion_core import sample

    _, cond, uncond = model.conditioning(prompt, subjects, lam)
    state = sample(model.denoiser, cond, uncond, sched, seed, num_inference_steps, guidance_scale,
                   model.latent_shape, model.codec.project)
    return model.decode(state.z), state.z
