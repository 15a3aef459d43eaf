"""Ablation sweeps over guidance settings, each written as JSON + CSV."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..guidance import GuidanceConfig
from .config import ExperimentConfig
from .experiments import (
    Evaluator,
    benchmark_for,
    generate_suite,
    load_generator,
    load_or_train_embedders,
)

log = logging.getLogger(__name__)

KINDS = ("fwbw", "lambda_sweep", "step_sweep", "layer_sweep")
LAMBDAS = (0.0, 0.25, 0.5, 0.75, 1.0)
WINDOWS = (5, 10, 15, 25, 50)
LAYER_COMBOS = (("down",), ("mid",), ("up",), ("down", "mid"), ("mid", "up"), ("down", "mid", "up"))


def ablation_settings(kind: str, base: GuidanceConfig) -> list[tuple[dict, GuidanceConfig]]:
    """``(row labels, config)`` for every row of one sweep."""
    if kind == "fwbw":
        return [({"setting": name, "Fw": fw, "Bw": bw}, replace(base, forward_enabled=fw, backward_enabled=bw))
                for name, fw, bw in (("neither", False, False), ("Fw", True, False),
                                     ("Bw", False, True), ("both", True, True))]
    if kind == "lambda_sweep":
        rows = []
        for lam in LAMBDAS:
            rows.append(({"setting": "baseline", "lambda": lam},
                         replace(base, lam=lam, forward_enabled=False, backward_enabled=False)))
            rows.append(({"setting": "guided", "lambda": lam},
                         replace(base, lam=lam, forward_enabled=True, backward_enabled=True)))
        return rows
    if kind == "step_sweep":
        return [({"setting": f"first {w}", "guided_steps": w}, replace(base, guided_step_window=w)) for w in WINDOWS]
    if kind == "layer_sweep":
        return [({"setting": "+".join(c), "forward_layers": "+".join(c)},
                 replace(base, forward_layers=frozenset(c), forward_enabled=True))
                for c in LAYER_COMBOS]
    raise ValueError(f"unknown ablation kind {kind!r}; expected one of {KINDS}")


@dataclass
class AblationReport:
    kind: str
    rows: list[dict] = field(default_factory=list)

    def write(self, out_dir: str | Path) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"ablation_{self.kind}.json"
        jpath.write_text(json.dumps({"kind": self.kind, "rows": self.rows}, indent=2))
        cpath = out_dir / f"ablation_{self.kind}.csv"
        flat = [{k: (json.dumps(v, sort_keys=True) if isinstance(v, dict) else v) for k, v in r.items()}
                for r in self.rows]
        names = list(dict.fromkeys(k for r in flat for k in r))
        with open(cpath, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=names)
            w.writeheader()
            w.writerows(flat)
        return jpath, cpath


def run_ablation(kind: str, cfg: ExperimentConfig, model=None, evaluator: Evaluator | None = None,
                 out_dir: str | Path | None = None) -> AblationReport:
    """Generate the configured suite under every setting of one sweep and score it.

    Each row carries the full guidance config it ran with; seconds per image
    is the median wall time over the suite.
    """
    settings = ablation_settings(kind, cfg.guidance)
    model = model if model is not None else load_generator(cfg)
    if evaluator is None:
        evaluator = Evaluator(*load_or_train_embedders(cfg))
    cases = benchmark_for(cfg)
    report = AblationReport(kind)
    for labels, gcfg in settings:
        log.info("%s: %s", kind, labels)
        images = generate_suite(model, cases, gcfg, cfg.eval.images_per_prompt, cfg.seed, cfg.eval.num_views)
        m = evaluator.report(images, cases)
        report.rows.append({
            **labels, "CLIP-T": m.clip_t, "CLIP-I": m.clip_i, "DINO-I": m.dino_i,
            "CLIP-GS": m.clip_gs, "DINO-GS": m.dino_gs, "presence": m.presence,
            "seconds_per_image": float(np.median([g.seconds for g in images])),
            "config": gcfg.echo(),
        })
    if out_dir is not None:
        report.write(out_dir)
    return report
