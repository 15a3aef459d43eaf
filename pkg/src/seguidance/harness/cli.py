"""Command line entry point: ``seguidance <subcommand> --config run.yaml ...``.

Subcommands: synth, train, generate, evaluate, ablate, report. Every one
reads the experiment config and applies flag overrides on top of it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..diffusion_core import make_noise_schedule
from ..guidance import guided_generate
from ..prompt_adapter import Subject, SubjectSet
from .config import ConfigError, ExperimentConfig, load_config

log = logging.getLogger("seguidance")


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    g = {}
    if getattr(args, "mu", None) is not None:
        g["mu"] = args.mu
    if getattr(args, "lam", None) is not None:
        g["lam"] = args.lam
    if getattr(args, "no_forward", False):
        g["forward_enabled"] = False
    if getattr(args, "no_backward", False):
        g["backward_enabled"] = False
    if getattr(args, "forward_layers", None):
        g["forward_layers"] = frozenset(x.strip() for x in args.forward_layers.split(",") if x.strip())
    if getattr(args, "checkpoint", None):
        cfg = replace(cfg, checkpoint=args.checkpoint)
    if g:
        try:
            cfg = replace(cfg, guidance=replace(cfg.guidance, **g))
        except ValueError as exc:
            raise ConfigError(f"guidance: {exc}") from exc
    return cfg


def _subject_images(specs: list[str]) -> SubjectSet | None:
    """``id=path`` pairs; repeating an id adds views. The id (minus any
    ``.N`` suffix) is the prompt word the images bind to."""
    from .experiments import load_png

    views: dict[str, list[np.ndarray]] = {}
    for spec in specs or []:
        if "=" not in spec:
            raise ConfigError(f"--subject-image expects id=path, got {spec!r}")
        sid, path = spec.split("=", 1)
        views.setdefault(sid, []).append(load_png(path))
    if not views:
        return None
    return SubjectSet([Subject(sid, sid.split(".")[0], v) for sid, v in views.items()])


def cmd_synth(args) -> None:
    from .experiments import save_png
    from .synth import synth_dataset

    cfg = _config(args)
    out = Path(args.out)
    scenes = synth_dataset(cfg.dataset, cfg.seed)
    rows = []
    for i, sc in enumerate(scenes):
        f = save_png(sc.image, out / "scenes" / f"{i:05d}.png")
        rows.append({"file": str(f.relative_to(out)), "caption": sc.caption,
                     "subjects": [{"phrase": s.phrase, "box": list(s.box)} for s in sc.subjects]})
    (out / "scenes.json").write_text(json.dumps(rows, indent=1))
    print(f"wrote {len(rows)} scenes to {out}")


def cmd_train(args) -> None:
    from .train import train_embedder, train_generator

    cfg = _config(args)
    out = Path(args.out)
    if args.embedder:
        emb = train_embedder(cfg.embedder_config(args.embedder), args.embedder, cfg.dataset)
        emb.save(out)
    else:
        tcfg = replace(cfg.train, seed=cfg.seed)
        model = train_generator(tcfg, cfg.dataset, cfg.model, out.with_suffix(".loss.csv"),
                                make_noise_schedule(tcfg.num_train_steps, tcfg.schedule))
        model.save(out, {"train": cfg.to_dict()["train"]})
    print(f"wrote {out}")


def cmd_generate(args) -> None:
    from .experiments import benchmark_for, generate_suite, load_generator, save_png, write_manifest

    cfg = _config(args)
    model = load_generator(cfg)
    out = Path(args.out)
    sched = make_noise_schedule(cfg.train.num_train_steps, cfg.train.schedule)
    if args.prompt:
        subjects = _subject_images(args.subject_image)
        if subjects is None:
            subjects = SubjectSet([])
        r = guided_generate(args.prompt, subjects, cfg.guidance, model, sched, cfg.seed, args.dump_attn)
        path = save_png(r.image, out / "image.png")
        (out / "generation.json").write_text(json.dumps(
            {"prompt": args.prompt, "seed": cfg.seed, "seconds": r.seconds,
             "refinements": [{"step": x.step_index, "iterations": x.iterations, "reached": x.reached,
                              "min_attention": x.final_min_attention} for x in r.refinements],
             "guidance": cfg.guidance.echo()}, indent=2))
        print(f"wrote {path}")
        return
    cases = benchmark_for(cfg)
    images = generate_suite(model, cases, cfg.guidance, cfg.eval.images_per_prompt, cfg.seed,
                            cfg.eval.num_views, sched)
    path = write_manifest(out, images, cases, cfg.to_dict())
    print(f"wrote {len(images)} images, manifest {path}")


def cmd_evaluate(args) -> None:
    from .experiments import Evaluator, load_or_train_embedders, read_manifest

    cfg = _config(args)
    images, cases, gen_config = read_manifest(args.images)
    report = Evaluator(*load_or_train_embedders(cfg)).report(images, cases, gen_config)
    out = Path(args.out)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "metrics.csv")
    print(json.dumps(report.row()))


def cmd_ablate(args) -> None:
    from .ablation import KINDS, run_ablation

    cfg = _config(args)
    kinds = KINDS if args.kind == "all" else (args.kind,)
    for kind in kinds:
        rep = run_ablation(kind, cfg, out_dir=args.out)
        print(f"{kind}: {len(rep.rows)} rows")


def _markdown_table(rows: list[dict], columns: list[str]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    lines += ["| " + " | ".join(fmt(r.get(c, "")) for c in columns) + " |" for r in rows]
    return "\n".join(lines)


def cmd_report(args) -> None:
    src = Path(args.reports or _config(args).output_dir)
    parts = ["# Results", ""]
    found = False
    metrics = src / "metrics.json"
    if metrics.exists():
        found = True
        m = json.loads(metrics.read_text())
        row = {"CLIP-T": m["clip_t"], "CLIP-I": m["clip_i"], "DINO-I": m["dino_i"],
               "CLIP-GS": m["clip_gs"], "DINO-GS": m["dino_gs"]}
        parts += ["## Metrics", "", _markdown_table([row], list(row)), ""]
    for path in sorted(src.glob("ablation_*.json")):
        found = True
        data = json.loads(path.read_text())
        cols = [c for c in data["rows"][0] if c != "config"]
        parts += [f"## {data['kind']}", "", _markdown_table(data["rows"], cols), ""]
    if not found:
        raise FileNotFoundError(f"no metrics.json or ablation_*.json in {src}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(parts))
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="seguidance", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="experiment YAML file")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--seed", type=int)
        return sp

    def guidance_flags(sp):
        sp.add_argument("--checkpoint", help="generator checkpoint (overrides config)")
        sp.add_argument("--mu", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--no-forward", action="store_true")
        sp.add_argument("--no-backward", action="store_true")
        sp.add_argument("--forward-layers", help="comma list from down,mid,up")

    common(sub.add_parser("synth", help="render the synthetic dataset"), "output directory")
    t = common(sub.add_parser("train", help="train the generator or an evaluation embedder"), "checkpoint path")
    t.add_argument("--embedder", choices=("clip", "dino"), help="train this embedder instead of the generator")
    g = common(sub.add_parser("generate", help="sample one prompt or the configured benchmark"), "output directory")
    guidance_flags(g)
    g.add_argument("--prompt")
    g.add_argument("--subject-image", action="append", metavar="ID=PATH",
                   help="reference image for a subject; repeat an id for multiple views")
    g.add_argument("--dump-attn", metavar="DIR", help="write per-step subject attention maps as PNG")
    e = common(sub.add_parser("evaluate", help="score a generated benchmark directory"), "report directory")
    e.add_argument("--images", required=True, help="directory written by generate")
    a = common(sub.add_parser("ablate", help="run an ablation sweep"), "report directory")
    guidance_flags(a)
    a.add_argument("--kind", default="all", choices=("fwbw", "lambda_sweep", "step_sweep", "layer_sweep", "all"))
    r = common(sub.add_parser("report", help="collect reports into a markdown summary"), "markdown file")
    r.add_argument("--reports", help="directory holding metrics/ablation JSON (default: output_dir)")
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "ablate": cmd_ablate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
