"""
Subject guidance step by step
=============================

Generates the same two-subject prompt four ways: no guidance, feature
injection only, latent refinement only, and both. The per-step attention
maps of the last run are dumped so the masks can be inspected.
"""

import logging
from dataclasses import replace
from pathlib import Path

from seguidance.diffusion_core import make_noise_schedule
from seguidance.guidance import GuidanceConfig, guided_generate
from seguidance.harness.experiments import save_png, two_subject_benchmark
from seguidance.pipeline import SubjectDiffusionModel

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path(__file__).resolve().parents[1]
out = root / "notebooks" / "out"
model = SubjectDiffusionModel.load(root / "checkpoints" / "generator.ckpt")
sched = make_noise_schedule()

case = two_subject_benchmark(1, seed=14)[0]
subjects = case.subject_set()
print("prompt:", case.prompt)

base = GuidanceConfig()
settings = {
    "neither": replace(base, forward_enabled=False, backward_enabled=False),
    "forward": replace(base, backward_enabled=False),
    "backward": replace(base, forward_enabled=False),
    "both": base,
}
for name, cfg in settings.items():
    dump = str(out / "attn") if name == "both" else None
    r = guided_generate(case.prompt, subjects, cfg, model, sched, seed=0, dump_attn=dump)
    save_png(r.image, out / f"guided_{name}.png")
    # refinement results tell how far the weakest subject's attention was pushed
    steps = [(x.step_index, round(x.initial_min_attention, 3), round(x.final_min_attention, 3), x.iterations)
             for x in r.refinements]
    print(f"{name:9s} {r.seconds:5.1f}s injected layers {len(r.injected_layers):3d} refinements {steps}")
