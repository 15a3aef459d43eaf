"""Training loops for the generator bundle and the evaluation embedders."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ..diffusion_core import LatentCodec, NoiseSchedule, make_noise_schedule, training_loss
from ..pipeline import ModelConfig, SubjectDiffusionModel
from ..prompt_adapter import Conditioning, split_words
from ..metrics import ToyEmbedder, crop, preprocess
from .synth import DatasetSpec, SyntheticScene, caption_for, render_reference, synth_dataset

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 12000
    batch_size: int = 32
    lr: float = 2e-3
    warmup: int = 200
    ema_decay: float = 0.999
    num_scenes: int = 8000
    p_image: float = 0.7  # single-subject scenes that get reference views
    p_two_views: float = 0.5
    p_colorless: float = 0.3  # caption drops colors when references are attached
    p_null_text: float = 0.1
    schedule: str = "cosine"
    num_train_steps: int = 1000
    seed: int = 0


@dataclass
class Batch:
    z0: torch.Tensor
    ids: torch.Tensor
    text_mask: torch.Tensor
    null_text: torch.Tensor  # [B] bool
    views: torch.Tensor  # [B, 2, 3, H, W]
    view_mask: torch.Tensor  # [B, 2] bool
    keep_image: torch.Tensor  # [B] float


def make_batch(scenes: list[SyntheticScene], rng: np.random.Generator, model: SubjectDiffusionModel,
               cfg: TrainConfig, batch_size: int) -> Batch:
    idx = rng.integers(0, len(scenes), size=batch_size)
    images = torch.as_tensor(np.stack([scenes[i].image for i in idx]))
    canvas = images.shape[-1]
    token_rows, views = [], np.zeros((batch_size, 2, 3, canvas, canvas), np.float32)
    view_mask = np.zeros((batch_size, 2), bool)
    keep = np.zeros(batch_size, np.float32)
    null = rng.random(batch_size) < cfg.p_null_text
    for b, i in enumerate(idx):
        sc = scenes[i]
        caption = sc.caption
        if len(sc.subjects) == 1 and rng.random() < cfg.p_image:
            s = sc.subjects[0]
            n_views = 2 if rng.random() < cfg.p_two_views else 1
            for v in range(n_views):
                views[b, v] = render_reference(s.color, s.shape, rng, canvas)
                view_mask[b, v] = True
            keep[b] = 1.0
            if rng.random() < cfg.p_colorless:
                caption = caption_for(sc.subjects, with_color=False)
        token_rows.append([model.vocab.sot_id, *model.vocab.encode(split_words(caption))])
    n = max(len(r) for r in token_rows)
    ids = torch.full((batch_size, n), model.vocab.pad_id, dtype=torch.long)
    mask = torch.zeros((batch_size, n), dtype=torch.bool)
    for b, r in enumerate(token_rows):
        ids[b, :len(r)] = torch.tensor(r)
        mask[b, :len(r)] = True
    mask[torch.as_tensor(null), 1:] = False
    return Batch(model.codec.encode(images), ids, mask, torch.as_tensor(null), torch.as_tensor(views),
                 torch.as_tensor(view_mask), torch.as_tensor(keep))


def batch_conditioning(model: SubjectDiffusionModel, batch: Batch) -> Conditioning:
    feats = model.text_encoder(batch.ids)
    null = model.null_text[None].expand(feats.shape[0], 1, -1)
    first = torch.where(batch.null_text[:, None, None], null, feats[:, :1])
    feats = torch.cat([first, feats[:, 1:]], dim=1)
    b, v = batch.views.shape[:2]
    m = model.cfg.image_tokens
    tokens = model.image_encoder(batch.views.flatten(0, 1)).reshape(b, v * m, -1)
    tok_mask = batch.view_mask.repeat_interleave(m, dim=1)
    # samples without views still need one valid key; their output is zeroed by image_keep
    tok_mask[:, 0] = True
    return Conditioning(feats, [tokens], 1.0, ["s0"], batch.text_mask, [tok_mask], batch.keep_image)


class EMA:
    """Parameter average whose decay ramps up so the random init washes out."""

    def __init__(self, model: torch.nn.Module, decay: float):
        self.decay = decay
        self.updates = 0
        self.shadow = copy.deepcopy(model).eval()
        for p in self.shadow.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: torch.nn.Module) -> None:
        self.updates += 1
        d = min(self.decay, (1 + self.updates) / (10 + self.updates))
        for s, p in zip(self.shadow.parameters(), model.parameters()):
            s.lerp_(p, 1.0 - d)


def train_generator(cfg: TrainConfig, dataset_spec: DatasetSpec | None = None,
                    model_cfg: ModelConfig = ModelConfig(), loss_csv: str | Path | None = None,
                    sched: NoiseSchedule | None = None) -> SubjectDiffusionModel:
    torch.manual_seed(cfg.seed)
    spec = dataset_spec or DatasetSpec(num_scenes=cfg.num_scenes)
    scenes = synth_dataset(spec, cfg.seed)
    sched = sched or make_noise_schedule(cfg.num_train_steps, cfg.schedule)
    model = SubjectDiffusionModel(cfg=model_cfg)
    ema = EMA(model, cfg.ema_decay)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)

    def lr_at(step):
        if step < cfg.warmup:
            return (step + 1) / cfg.warmup
        return 0.5 * (1 + math.cos(math.pi * (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)))

    sched_lr = torch.optim.lr_scheduler.LambdaLR(opt, lr_at)
    rng = np.random.default_rng(cfg.seed + 1)
    gen = torch.Generator().manual_seed(cfg.seed + 2)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        batch = make_batch(scenes, rng, model, cfg, cfg.batch_size)
        cond = batch_conditioning(model, batch)
        loss = training_loss(model.denoiser, (batch.z0, cond), sched, gen)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        sched_lr.step()
        ema.update(model)
        rows.append((step, loss.item()))
        if step % 100 == 0 or step == cfg.steps - 1:
            recent = np.mean([r[1] for r in rows[-100:]])
            log.info("step %d loss %.4f (%.0fs)", step, recent, time.perf_counter() - t0)
    if loss_csv is not None:
        Path(loss_csv).parent.mkdir(parents=True, exist_ok=True)
        with open(loss_csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            w.writerows(rows)
    return ema.shadow


@dataclass
class EmbedderConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    dim: int = 64
    num_scenes: int = 4000
    seed: int = 0


def _embedder_sample(scenes, rng, codec):
    """One (image, caption, identity key) triple: a scene, a subject crop or a reference view."""
    sc = scenes[rng.integers(len(scenes))]
    kind = rng.integers(3)
    if kind == 0:
        img, subs = sc.image, sc.subjects
    else:
        s = sc.subjects[rng.integers(len(sc.subjects))]
        subs = (s,)
        if kind == 1:
            x0, y0, x1, y1 = s.box
            pad = int(rng.integers(0, 4))
            h = sc.image.shape[-1]
            img = crop(sc.image, (max(0, x0 - pad), max(0, y0 - pad), min(h, x1 + pad), min(h, y1 + pad)))
        else:
            img = render_reference(s.color, s.shape, rng, sc.image.shape[-1])
    x = preprocess(np.clip(img, 0, 1))
    if rng.random() < 0.5:  # match the blockiness of decoded latents
        x = codec.decode(codec.encode(x[None]))[0]
    key = tuple(sorted(s.phrase for s in subs))
    return x, caption_for(subs), key


def train_embedder(cfg: EmbedderConfig = EmbedderConfig(), name: str = "clip",
                   dataset_spec: DatasetSpec | None = None) -> ToyEmbedder:
    """Contrastive image/text training with soft targets over identical subject sets."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    scenes = synth_dataset(dataset_spec or DatasetSpec(num_scenes=cfg.num_scenes), cfg.seed + 7)
    codec = LatentCodec()
    emb = ToyEmbedder(dim=cfg.dim, name=name)
    opt = torch.optim.AdamW(emb.parameters(), lr=cfg.lr)
    lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, cfg.steps)
    for step in range(cfg.steps):
        xs, caps, keys = zip(*(_embedder_sample(scenes, rng, codec) for _ in range(cfg.batch_size)))
        img = emb.image_features(torch.stack(xs))
        txt = emb.text_features(*emb.tokenize(caps))
        same = torch.tensor([[a == b for b in keys] for a in keys], dtype=torch.float32)
        target = same / same.sum(1, keepdim=True)
        scale = emb.logit_scale.exp().clamp(max=100.0)
        loss = 0.0
        for logits in (scale * img @ txt.T, scale * txt @ img.T, scale * img @ img.T):
            loss = loss + -(target * F.log_softmax(logits, dim=1)).sum(1).mean()
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr.step()
        if step % 250 == 0:
            log.info("embedder %s step %d loss %.4f", name, step, loss.item())
    return emb.eval()
