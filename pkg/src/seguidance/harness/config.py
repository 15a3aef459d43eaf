"""Experiment configuration: one YAML file with nested sections.

Schema (every key optional, defaults shown by ``ExperimentConfig().to_dict()``)::

    seed: 0
    output_dir: runs/default
    checkpoint: runs/default/generator.ckpt
    dataset:   {shapes, colors, canvas, num_scenes, two_subject_fraction, min_size, max_size}
    model:     {channels, latent_channels, latent_size, context_dim, attn_dim, heads, t_dim,
                text_layers, text_heads, max_tokens, image_tokens, image_width}
    train:     {steps, batch_size, lr, warmup, ema_decay, num_scenes, p_image, p_two_views,
                p_colorless, p_null_text, schedule, num_train_steps}
    guidance:  {lambda, mu, eta0, eta_decay, mask_threshold_rule, forward_layers, forward_enabled,
                backward_enabled, refine_steps, max_refine_iters, guided_step_window, resolution,
                smoothing: {kernel_size, sigma}, reweight_sot, num_inference_steps, guidance_scale}
    eval:      {suite, num_prompts, images_per_prompt, num_views, benchmark_seed,
                clip_embedder, dino_embedder, embedder_steps}

Unknown keys and wrongly typed values raise ``ConfigError`` naming the field.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..attention_store import GaussianSpec
from ..diffusion_core import DenoiserConfig
from ..guidance import GuidanceConfig
from ..pipeline import ModelConfig
from .synth import DatasetSpec
from .train import EmbedderConfig, TrainConfig


class ConfigError(ValueError):
    pass


SUITES = ("two_subject", "single_subject")


@dataclass
class EvalSpec:
    suite: str = "two_subject"
    num_prompts: int = 200
    images_per_prompt: int = 4
    num_views: int = 1
    benchmark_seed: int = 1234
    clip_embedder: str | None = None
    dino_embedder: str | None = None
    embedder_steps: int = 600

    def __post_init__(self):
        if self.suite not in SUITES:
            raise ValueError(f"suite must be one of {SUITES}")
        if self.num_prompts < 1 or self.images_per_prompt < 1:
            raise ValueError("num_prompts and images_per_prompt must be >= 1")
        if self.num_views < 1:
            raise ValueError("num_views must be >= 1")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    eval: EvalSpec = field(default_factory=EvalSpec)

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.output_dir) / "generator.ckpt"

    def embedder_path(self, name: str) -> Path:
        explicit = self.eval.clip_embedder if name == "clip" else self.eval.dino_embedder
        return Path(explicit) if explicit else Path(self.output_dir) / f"{name}_embedder.ckpt"

    def embedder_config(self, name: str) -> EmbedderConfig:
        # the two embedders differ only in their seed
        return EmbedderConfig(steps=self.eval.embedder_steps, seed=self.seed + (0 if name == "clip" else 1000))

    def to_dict(self) -> dict:
        d = self.model.to_dict()
        model = {**d.pop("denoiser"), **d}
        ds = asdict(self.dataset)
        ds.pop("palette")
        ds["shapes"], ds["colors"] = list(ds["shapes"]), list(ds["colors"])
        return {
            "seed": self.seed, "output_dir": self.output_dir, "checkpoint": self.checkpoint,
            "dataset": ds, "model": model, "train": asdict(self.train),
            "guidance": self.guidance.echo(), "eval": asdict(self.eval),
        }

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path


def _check_type(name: str, value: Any, default: Any) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
    elif isinstance(default, (list, tuple, frozenset, set)):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
    elif isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{name}: expected a mapping, got {value!r}")
    return value


def _section(name: str, raw: Any, defaults: Any, aliases: dict[str, str] | None = None) -> dict:
    """Validate a mapping against a dataclass instance's fields."""
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(raw).__name__}")
    aliases = aliases or {}
    known = {f.name for f in fields(defaults)}
    out = {}
    for key, value in raw.items():
        attr = aliases.get(key, key)
        if attr not in known:
            raise ConfigError(f"{name}.{key}: unknown field")
        out[attr] = _check_type(f"{name}.{key}", value, getattr(defaults, attr))
    return out


def _build(name: str, cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    raw = dict(raw or {})
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    base = ExperimentConfig()
    top = {}
    for key in ("seed", "output_dir", "checkpoint"):
        if key in raw:
            top[key] = _check_type(key, raw.pop(key), getattr(base, key))
    sections = {k: raw.pop(k) for k in ("dataset", "model", "train", "guidance", "eval") if k in raw}
    if raw:
        raise ConfigError(f"{sorted(raw)[0]}: unknown field")

    ds = _section("dataset", sections.get("dataset"), base.dataset)
    ds.pop("palette", None)
    for k in ("shapes", "colors"):
        if k in ds:
            ds[k] = tuple(ds[k])
    dataset = _build("dataset", DatasetSpec, ds)
    try:
        dataset.validate()
    except ValueError as exc:
        raise ConfigError(f"dataset: {exc}") from exc

    den_defaults, mod_defaults = DenoiserConfig(), base.model
    model_raw = sections.get("model") or {}
    if not isinstance(model_raw, dict):
        raise ConfigError("model: expected a mapping")
    den_keys = {f.name for f in fields(DenoiserConfig)}
    den = _section("model", {k: v for k, v in model_raw.items() if k in den_keys}, den_defaults)
    rest = _section("model", {k: v for k, v in model_raw.items() if k not in den_keys}, mod_defaults)
    rest.pop("denoiser", None)
    if "channels" in den:
        den["channels"] = tuple(den["channels"])
    model = _build("model", ModelConfig, {"denoiser": _build("model", DenoiserConfig, den), **rest})

    train = _build("train", TrainConfig, _section("train", sections.get("train"), base.train))

    g = _section("guidance", sections.get("guidance"), base.guidance, {"lambda": "lam"})
    if "smoothing" in g:
        sm = _section("guidance.smoothing", g["smoothing"], GaussianSpec())
        g["smoothing"] = _build("guidance.smoothing", GaussianSpec, sm)
    if "forward_layers" in g:
        g["forward_layers"] = frozenset(g["forward_layers"])
    guidance = _build("guidance", GuidanceConfig, g)

    ev = _build("eval", EvalSpec, _section("eval", sections.get("eval"), base.eval))
    return ExperimentConfig(dataset=dataset, model=model, train=train, guidance=guidance, eval=ev, **top)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def with_guidance(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, guidance=replace(cfg.guidance, **changes))
