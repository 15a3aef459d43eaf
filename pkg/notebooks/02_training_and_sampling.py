"""
Training the generator and sampling from it
===========================================

Trains a small denoiser on synthetic scenes, then draws a few unguided DDIM
samples. A short run is enough to see shapes appear; the checkpoint under
``checkpoints/generator.ckpt`` is used instead when it exists.
"""

import logging
from pathlib import Path

from seguidance.diffusion_core import make_noise_schedule
from seguidance.guidance import baseline_generate
from seguidance.harness.experiments import save_png
from seguidance.harness.train import TrainConfig, train_generator
from seguidance.pipeline import SubjectDiffusionModel

logging.basicConfig(level=logging.INFO, format="%(message)s")
root = Path(__file__).resolve().parents[1]
out = root / "notebooks" / "out"
ckpt = root / "checkpoints" / "generator.ckpt"

if ckpt.exists():
    model = SubjectDiffusionModel.load(ckpt)
else:
    # 300 steps take a few minutes on one core and give blurry but recognisable blobs
    model = train_generator(TrainConfig(steps=300, seed=0), loss_csv=out / "loss.csv")

sched = make_noise_schedule()
for i, prompt in enumerate(["a red circle", "a blue square", "a green triangle and a yellow circle"]):
    image, _ = baseline_generate(prompt, None, model, sched, seed=i, num_inference_steps=50)
    save_png(image, out / f"sample_{i}.png")
    print(prompt, "->", out / f"sample_{i}.png")
