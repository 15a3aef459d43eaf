"""Benchmark suites, batch generation with a manifest, and evaluation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from ..diffusion_core import NoiseSchedule, make_noise_schedule
from ..guidance import GenerationResult, GuidanceConfig, guided_generate
from ..metrics import (
    Detector,
    Embedder,
    MetricsReport,
    OracleDetector,
    ToyEmbedder,
    grounding_result,
    image_alignment,
    text_alignment,
)
from ..pipeline import SubjectDiffusionModel
from ..prompt_adapter import Subject, SubjectSet
from .config import ExperimentConfig
from .synth import DatasetSpec, SceneSubject, caption_for, random_subjects, render, render_reference

log = logging.getLogger(__name__)


@dataclass
class BenchmarkCase:
    """One prompt with its subjects' reference views and evaluation targets."""

    prompt: str
    subject_ids: list[str]
    words: list[str]  # token in the prompt each subject binds to
    phrases: list[str]  # detector phrase per subject
    references: list[list[np.ndarray]]
    targets: list[np.ndarray]  # clean object-centric rendering per subject

    def subject_set(self, num_views: int | None = None) -> SubjectSet:
        return SubjectSet([
            Subject(sid, word, list(refs[:num_views] if num_views else refs))
            for sid, word, refs in zip(self.subject_ids, self.words, self.references)
        ])


def _target(s: SceneSubject, canvas: int) -> np.ndarray:
    return render_reference(s.color, s.shape, np.random.default_rng(0), canvas, nuisance=False)


def two_subject_benchmark(n: int, seed: int, spec: DatasetSpec | None = None, num_views: int = 1) -> list[BenchmarkCase]:
    """Colored two-subject prompts, each subject with its own reference views."""
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        subs = random_subjects(rng, 2, spec)
        cases.append(BenchmarkCase(
            caption_for(subs), ["s0", "s1"], [s.shape for s in subs], [s.phrase for s in subs],
            [[render_reference(s.color, s.shape, rng, spec.canvas) for _ in range(num_views)] for s in subs],
            [_target(s, spec.canvas) for s in subs],
        ))
    return cases


def single_subject_suite(n: int, seed: int, spec: DatasetSpec | None = None, num_views: int = 2) -> list[BenchmarkCase]:
    """Colorless single-subject prompts: the subject's color is only in the references."""
    spec = spec or DatasetSpec()
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(n):
        subs = random_subjects(rng, 1, spec)
        s = subs[0]
        cases.append(BenchmarkCase(
            caption_for(subs, with_color=False), ["s0"], [s.shape], [s.phrase],
            [[render_reference(s.color, s.shape, rng, spec.canvas) for _ in range(num_views)]],
            [_target(s, spec.canvas)],
        ))
    return cases


def benchmark_for(cfg: ExperimentConfig) -> list[BenchmarkCase]:
    if cfg.eval.suite == "two_subject":
        return two_subject_benchmark(cfg.eval.num_prompts, cfg.eval.benchmark_seed, cfg.dataset, cfg.eval.num_views)
    return single_subject_suite(cfg.eval.num_prompts, cfg.eval.benchmark_seed, cfg.dataset, max(2, cfg.eval.num_views))


def composite(subjects: list[SceneSubject], canvas: int = 64) -> np.ndarray:
    return render(subjects, canvas)


@dataclass
class GeneratedImage:
    case_index: int
    sample: int
    seed: int
    image: np.ndarray
    seconds: float
    result: GenerationResult | None = None


def generate_suite(model: SubjectDiffusionModel, cases: list[BenchmarkCase], gcfg: GuidanceConfig,
                   images_per_prompt: int = 1, seed: int = 0, num_views: int | None = None,
                   sched: NoiseSchedule | None = None) -> list[GeneratedImage]:
    """Seeds are ``seed + case * images_per_prompt + k`` so every config sees the same noise."""
    sched = sched or make_noise_schedule()
    out = []
    for ci, case in enumerate(cases):
        for k in range(images_per_prompt):
            s = seed + ci * images_per_prompt + k
            r = guided_generate(case.prompt, case.subject_set(num_views), gcfg, model, sched, s)
            out.append(GeneratedImage(ci, k, s, r.image, r.seconds, r))
    return out


@dataclass
class Evaluator:
    clip: Embedder
    dino: Embedder
    detector: Detector = field(default_factory=OracleDetector)

    def score(self, image: np.ndarray, case: BenchmarkCase) -> dict:
        image = np.clip(image, 0.0, 1.0)
        sources = dict(zip(case.subject_ids, case.targets))
        phrases = dict(zip(case.subject_ids, case.phrases))
        row = {"CLIP-T": text_alignment(image, case.prompt, self.clip)}
        for name, emb in (("CLIP", self.clip), ("DINO", self.dino)):
            row[f"{name}-I"] = float(np.mean([image_alignment(image, t, emb) for t in case.targets]))
            gr = grounding_result(image, sources, phrases, self.detector, emb)
            row[f"{name}-GS"] = gr.score
            row["presence"] = gr.presence
        return row

    def report(self, images: list[GeneratedImage], cases: list[BenchmarkCase], config: dict | None = None) -> MetricsReport:
        """Per image, then per prompt, then over the suite."""
        per_image, by_case = [], {}
        for g in images:
            row = {"case": g.case_index, "sample": g.sample, "seed": g.seed, "seconds": g.seconds,
                   **self.score(g.image, cases[g.case_index])}
            per_image.append(row)
            by_case.setdefault(g.case_index, []).append(row)
        keys = ("CLIP-T", "CLIP-I", "DINO-I", "CLIP-GS", "DINO-GS", "presence")
        prompt_means = {k: [np.mean([r[k] for r in rows]) for rows in by_case.values()] for k in keys}
        m = {k: float(np.mean(v)) for k, v in prompt_means.items()}
        return MetricsReport(m["CLIP-T"], m["CLIP-I"], m["DINO-I"], m["CLIP-GS"], m["DINO-GS"],
                            per_image, config or {}, m["presence"])


def load_or_train_embedders(cfg: ExperimentConfig) -> tuple[ToyEmbedder, ToyEmbedder]:
    from .train import train_embedder

    out = []
    for name in ("clip", "dino"):
        path = cfg.embedder_path(name)
        if path.exists():
            out.append(ToyEmbedder.load(path))
        else:
            log.info("training %s embedder -> %s", name, path)
            emb = train_embedder(cfg.embedder_config(name), name, cfg.dataset)
            emb.save(path)
            out.append(emb)
    return out[0], out[1]


def load_generator(cfg: ExperimentConfig) -> SubjectDiffusionModel:
    path = cfg.checkpoint_path
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return SubjectDiffusionModel.load(path)


def save_png(image: np.ndarray, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (np.clip(image, 0.0, 1.0).transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


def load_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


MANIFEST = "manifest.json"


def write_manifest(out_dir: str | Path, images: list[GeneratedImage], cases: list[BenchmarkCase],
                   config: dict) -> Path:
    """Images, references and targets as PNGs plus a JSON index tying them together."""
    out_dir = Path(out_dir)
    entries, case_rows = [], []
    for ci, case in enumerate(cases):
        refs = [[str(save_png(v, out_dir / "refs" / f"{ci:04d}_{sid}_{j}.png").relative_to(out_dir))
                 for j, v in enumerate(views)] for sid, views in zip(case.subject_ids, case.references)]
        tgts = [str(save_png(t, out_dir / "refs" / f"{ci:04d}_{sid}_target.png").relative_to(out_dir))
                for sid, t in zip(case.subject_ids, case.targets)]
        case_rows.append({"prompt": case.prompt, "subject_ids": case.subject_ids, "words": case.words,
                          "phrases": case.phrases, "references": refs, "targets": tgts})
    for g in images:
        p = save_png(g.image, out_dir / "images" / f"{g.case_index:04d}_{g.sample}.png")
        entries.append({"case": g.case_index, "sample": g.sample, "seed": g.seed, "seconds": g.seconds,
                        "file": str(p.relative_to(out_dir))})
    path = out_dir / MANIFEST
    path.write_text(json.dumps({"config": config, "cases": case_rows, "images": entries}, indent=2))
    return path


def read_manifest(out_dir: str | Path) -> tuple[list[GeneratedImage], list[BenchmarkCase], dict]:
    out_dir = Path(out_dir)
    path = out_dir / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {out_dir}")
    data = json.loads(path.read_text())
    cases = [BenchmarkCase(c["prompt"], c["subject_ids"], c["words"], c["phrases"],
                           [[load_png(out_dir / f) for f in views] for views in c["references"]],
                           [load_png(out_dir / f) for f in c["targets"]]) for c in data["cases"]]
    images = [GeneratedImage(e["case"], e["sample"], e["seed"], load_png(out_dir / e["file"]), e["seconds"])
              for e in data["images"]]
    return images, cases, data.get("config", {})


def guidance_off(gcfg: GuidanceConfig) -> GuidanceConfig:
    return replace(gcfg, forward_enabled=False, backward_enabled=False)
