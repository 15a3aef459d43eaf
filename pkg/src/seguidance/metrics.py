"""Text/image alignment scores and the crop-based grounding score.

Embedders and detectors are duck-typed interfaces (see ``Embedder`` and
``Detector``) so other implementations can be slotted in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .checkpoint import load_checkpoint, save_checkpoint
from .harness.synth import BACKGROUND, PALETTE, SHAPES, shape_mask
from .prompt_adapter import Vocabulary, default_vocabulary, split_words

BOX_THRESHOLD = 0.35
TEXT_THRESHOLD = 0.25
TABLE_COLUMNS = ("CLIP-T", "CLIP-I", "DINO-I", "CLIP-GS", "DINO-GS")

Box = tuple[int, int, int, int]


class Embedder(Protocol):
    name: str

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass
class Detection:
    phrase: str
    box: Box
    confidence: float
    text_confidence: float = 1.0


class Detector(Protocol):
    def detect(self, image: np.ndarray, phrases: Sequence[str], box_threshold: float = BOX_THRESHOLD,
               text_threshold: float = TEXT_THRESHOLD) -> list[Detection]: ...


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.clip(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)), -1.0, 1.0))


def pad_to_square(image: np.ndarray, fill: float = BACKGROUND) -> np.ndarray:
    _, h, w = image.shape
    side = max(h, w)
    out = np.full((image.shape[0], side, side), fill, dtype=np.float32)
    y0, x0 = (side - h) // 2, (side - w) // 2
    out[:, y0:y0 + h, x0:x0 + w] = image
    return out


def preprocess(image: np.ndarray, size: int = 64) -> torch.Tensor:
    """Aspect-preserving pad to a square, then bilinear resize to ``size``."""
    x = torch.as_tensor(pad_to_square(np.asarray(image, np.float32)))[None]
    if x.shape[-1] != size:
        x = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=True)
    return x[0]


class ConvTower(nn.Module):
    def __init__(self, dim: int = 64, width: int = 32):
        super().__init__()
        chans = [3, width // 2, width, 2 * width, 2 * width]
        layers = []
        for ci, co in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(ci, co, 3, stride=2, padding=1), nn.GroupNorm(4, co), nn.SiLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1] * 4, dim)

    def forward(self, x):
        h = self.features((x - 0.5) * 2.0)
        h = F.adaptive_avg_pool2d(h, 2).flatten(1)
        return self.head(h)


class ToyEmbedder(nn.Module):
    """Dual-tower contrastive embedder (CLIP-style) over the shapes vocabulary."""

    def __init__(self, vocab: Vocabulary | None = None, dim: int = 64, name: str = "clip"):
        super().__init__()
        self.vocab = vocab or default_vocabulary(tuple(PALETTE), SHAPES)
        self.name = name
        self.dim = dim
        self.image_tower = ConvTower(dim)
        self.token_embed = nn.Embedding(len(self.vocab), dim)
        self.gru = nn.GRU(dim, dim, batch_first=True, bidirectional=True)
        self.text_head = nn.Linear(2 * dim, dim)
        self.logit_scale = nn.Parameter(torch.tensor(np.log(10.0), dtype=torch.float32))

    def image_features(self, images: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.image_tower(images), dim=-1)

    def text_features(self, ids: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        h, _ = self.gru(self.token_embed(ids))
        mask = (torch.arange(ids.shape[1])[None] < lengths[:, None]).float()[..., None]
        pooled = (h * mask).sum(1) / mask.sum(1)
        return F.normalize(self.text_head(pooled), dim=-1)

    def tokenize(self, texts: Sequence[str]) -> tuple[torch.Tensor, torch.Tensor]:
        rows = [self.vocab.encode(split_words(t)) for t in texts]
        n = max(len(r) for r in rows)
        ids = torch.full((len(rows), n), self.vocab.pad_id, dtype=torch.long)
        for i, r in enumerate(rows):
            ids[i, :len(r)] = torch.tensor(r)
        return ids, torch.tensor([len(r) for r in rows])

    @torch.no_grad()
    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.image_features(preprocess(image)[None])[0].double().numpy()

    @torch.no_grad()
    def embed_text(self, text: str) -> np.ndarray:
        return self.text_features(*self.tokenize([text]))[0].double().numpy()

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, {"kind": "toy_embedder", "dim": self.dim}, self.state_dict(),
                               {"vocab": self.vocab.tokens, "name": self.name})

    @classmethod
    def load(cls, path: str | Path) -> "ToyEmbedder":
        arch, state, extra = load_checkpoint(path)
        if arch.get("kind") != "toy_embedder":
            raise ValueError(f"{path} is not an embedder checkpoint")
        emb = cls(Vocabulary(extra["vocab"]), arch["dim"], extra["name"])
        emb.load_state_dict(state)
        return emb.eval()


def text_alignment(image: np.ndarray, prompt: str, emb: Embedder) -> float:
    return cosine(emb.embed_image(image), emb.embed_text(prompt))


def image_alignment(gen: np.ndarray, src, emb: Embedder) -> float:
    """Cosine between image embeddings; a list of sources gives the mean."""
    g = emb.embed_image(gen)
    if isinstance(src, (list, tuple)):
        return float(np.mean([cosine(g, emb.embed_image(s)) for s in src]))
    return cosine(g, emb.embed_image(src))


class UnknownPhraseError(ValueError):
    pass


class OracleDetector:
    """Color segmentation + shape template matching for rendered scenes.

    Pixels are assigned to the nearest palette color (or background). Each
    connected color region is scored against every shape template drawn in
    square candidate boxes; pixels of other subjects' colors inside a box
    count as possible occluders and are ignored. ``confidence`` is the IoU
    with the named shape's template, ``text_confidence`` a softmax over shapes.
    """

    name = "oracle"

    def __init__(self, palette: dict[str, tuple[float, float, float]] = PALETTE, shapes=SHAPES,
                 color_tol: float = 0.35, min_area: int = 16, temperature: float = 0.05):
        self.palette = dict(palette)
        self.shapes = tuple(shapes)
        self.color_tol = color_tol
        self.min_area = min_area
        self.temperature = temperature

    def parse(self, phrase: str) -> tuple[str | None, str]:
        words = split_words(phrase)
        shape = [w for w in words if w in self.shapes]
        color = [w for w in words if w in self.palette]
        other = [w for w in words if w not in self.shapes and w not in self.palette and w != "a"]
        if len(shape) != 1 or len(color) > 1 or other:
            raise UnknownPhraseError(f"cannot ground phrase {phrase!r}")
        return (color[0] if color else None), shape[0]

    def color_labels(self, image: np.ndarray) -> np.ndarray:
        """Per-pixel palette index, -1 for background/unassigned."""
        names = list(self.palette)
        refs = np.array([self.palette[n] for n in names] + [(BACKGROUND,) * 3], np.float32)
        px = np.moveaxis(np.asarray(image, np.float32), 0, -1)
        d = np.linalg.norm(px[..., None, :] - refs, axis=-1)
        lab = d.argmin(-1)
        lab[(lab == len(names)) | (d.min(-1) > self.color_tol)] = -1
        return lab

    def _candidate_boxes(self, box: Box, canvas: int) -> list[Box]:
        x0, y0, x1, y1 = box
        w, h = x1 - x0, y1 - y0
        side = min(max(w, h), canvas)
        cands = {box}
        for ax0 in {x0, x1 - side}:
            for ay0 in {y0, y1 - side}:
                bx0 = int(np.clip(ax0, 0, canvas - side))
                by0 = int(np.clip(ay0, 0, canvas - side))
                cands.add((bx0, by0, bx0 + side, by0 + side))
        return sorted(cands)

    def _shape_scores(self, comp: np.ndarray, occluder: np.ndarray, bbox: Box) -> tuple[dict, dict]:
        canvas = comp.shape[0]
        best, best_box = {}, {}
        for cand in self._candidate_boxes(bbox, canvas):
            for shape in self.shapes:
                t = shape_mask(shape, cand, canvas)
                care = ~(occluder & ~comp)
                inter = np.count_nonzero(t & comp)
                union = np.count_nonzero((t | comp) & care)
                iou = inter / union if union else 0.0
                if iou > best.get(shape, -1.0):
                    best[shape], best_box[shape] = iou, cand
        return best, best_box

    def detect(self, image: np.ndarray, phrases: Sequence[str], box_threshold: float = BOX_THRESHOLD,
               text_threshold: float = TEXT_THRESHOLD) -> list[Detection]:
        parsed = [(p, *self.parse(p)) for p in phrases]
        labels = self.color_labels(image)
        names = list(self.palette)
        out: list[Detection] = []
        for ci, cname in enumerate(names):
            wanted = [(p, s) for p, c, s in parsed if c in (None, cname)]
            if not wanted:
                continue
            comps, n = ndimage.label(labels == ci)
            occluder = (labels >= 0) & (labels != ci)
            for k in range(1, n + 1):
                comp = comps == k
                if np.count_nonzero(comp) < self.min_area:
                    continue
                ys, xs = np.nonzero(comp)
                bbox = (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)
                scores, boxes = self._shape_scores(comp, occluder, bbox)
                logits = np.array([scores[s] for s in self.shapes]) / self.temperature
                probs = np.exp(logits - logits.max())
                probs /= probs.sum()
                for phrase, shape in wanted:
                    conf = float(scores[shape])
                    text_conf = float(probs[self.shapes.index(shape)])
                    if conf >= box_threshold and text_conf >= text_threshold:
                        out.append(Detection(phrase, boxes[shape], conf, text_conf))
        return out


def crop(image: np.ndarray, box: Box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.asarray(image)[:, y0:y1, x0:x1]


@dataclass
class GroundingResult:
    per_subject: dict[str, tuple[Box, float] | None]

    @property
    def score(self) -> float:
        return float(np.mean([0.0 if v is None else v[1] for v in self.per_subject.values()]))

    @property
    def presence(self) -> float:
        return float(np.mean([v is not None for v in self.per_subject.values()]))


def grounding_result(gen: np.ndarray, sources: dict, phrases: dict[str, str], det: Detector, emb: Embedder,
                     box_threshold: float = BOX_THRESHOLD, text_threshold: float = TEXT_THRESHOLD) -> GroundingResult:
    """Detect each subject's phrase, crop its best box and compare with its source image(s);
    undetected subjects score 0."""
    if not phrases:
        raise ValueError("grounding score needs at least one subject")
    per = {}
    for sid, phrase in phrases.items():
        dets = [d for d in det.detect(gen, [phrase], box_threshold, text_threshold) if d.phrase == phrase]
        if not dets:
            per[sid] = None
            continue
        best = max(dets, key=lambda d: d.confidence)
        per[sid] = (best.box, image_alignment(crop(gen, best.box), sources[sid], emb))
    return GroundingResult(per)


def grounding_score(gen: np.ndarray, sources: dict, phrases: dict[str, str], det: Detector, emb: Embedder,
                    box_threshold: float = BOX_THRESHOLD, text_threshold: float = TEXT_THRESHOLD) -> float:
    return grounding_result(gen, sources, phrases, det, emb, box_threshold, text_threshold).score


@dataclass
class MetricsReport:
    clip_t: float
    clip_i: float
    dino_i: float
    clip_gs: float
    dino_gs: float
    per_image: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    presence: float | None = None  # fraction of subjects the detector found

    def row(self) -> dict[str, float]:
        return dict(zip(TABLE_COLUMNS, (self.clip_t, self.clip_i, self.dino_i, self.clip_gs, self.dino_gs)))

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, default=float))
        return path

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(TABLE_COLUMNS))
            w.writeheader()
            w.writerow({k: f"{v:.4f}" for k, v in self.row().items()})
        return path
