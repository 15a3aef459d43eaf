"""Synthetic colored-shape scenes with captions and ground-truth boxes.

Images are float32 arrays of shape ``[3, canvas, canvas]`` with values in
``[0, 1]`` on a flat gray background. Every shape is drawn inside a square
box ``(x0, y0, x1, y1)`` given in pixels, ``x1``/``y1`` exclusive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PALETTE: dict[str, tuple[float, float, float]] = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "blue": (0.15, 0.3, 0.9),
    "yellow": (0.9, 0.8, 0.15),
}
SHAPES: tuple[str, ...] = ("circle", "square", "triangle")
BACKGROUND = 0.5

Box = tuple[int, int, int, int]


class CanvasTooSmallError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSubject:
    color: str
    shape: str
    box: Box

    @property
    def phrase(self) -> str:
        return f"{self.color} {self.shape}"


@dataclass
class SyntheticScene:
    image: np.ndarray
    caption: str
    subjects: tuple[SceneSubject, ...]

    def __post_init__(self):
        canvas = self.image.shape[-1]
        for s in self.subjects:
            if s.shape not in self.caption:
                raise ValueError(f"subject {s.phrase!r} missing from caption {self.caption!r}")
            x0, y0, x1, y1 = s.box
            if not (0 <= x0 < x1 <= canvas and 0 <= y0 < y1 <= canvas):
                raise ValueError(f"box {s.box} outside canvas")


@dataclass
class DatasetSpec:
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(PALETTE)
    canvas: int = 64
    num_scenes: int = 1000
    two_subject_fraction: float = 0.5
    min_size: int = 16
    max_size: int = 26
    palette: dict[str, tuple[float, float, float]] = field(default_factory=lambda: dict(PALETTE))

    def validate(self) -> None:
        if len(self.shapes) < 2:
            raise ValueError("need at least 2 shape classes")
        if len(self.colors) < 2:
            raise ValueError("need at least 2 colors")
        unknown_shapes = [s for s in self.shapes if s not in SHAPES]
        if unknown_shapes:
            raise ValueError(f"unknown shapes: {unknown_shapes}")
        unknown_colors = [c for c in self.colors if c not in self.palette]
        if unknown_colors:
            raise ValueError(f"unknown colors: {unknown_colors}")
        if not 0 < self.min_size <= self.max_size:
            raise ValueError("need 0 < min_size <= max_size")
        if not 0.0 <= self.two_subject_fraction <= 1.0:
            raise ValueError("two_subject_fraction must lie in [0, 1]")


def shape_mask(shape: str, box: Box, canvas: int) -> np.ndarray:
    """Boolean ``[canvas, canvas]`` mask of ``shape`` drawn in ``box``."""
    x0, y0, x1, y1 = box
    ys, xs = np.mgrid[0:canvas, 0:canvas] + 0.5
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    if shape == "square":
        return inside
    if shape == "circle":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        r = (x1 - x0) / 2
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    if shape == "triangle":
        # apex at top-center, base along the bottom edge
        cx = (x0 + x1) / 2
        half = (x1 - x0) / 2
        frac = (ys - y0) / max(y1 - y0, 1)
        return inside & (np.abs(xs - cx) <= frac * half)
    raise ValueError(f"unknown shape {shape!r}")


def render(
    subjects: list[SceneSubject] | tuple[SceneSubject, ...],
    canvas: int = 64,
    palette: dict[str, tuple[float, float, float]] = PALETTE,
) -> np.ndarray:
    """Draw subjects in order (later ones occlude earlier ones)."""
    img = np.full((3, canvas, canvas), BACKGROUND, dtype=np.float32)
    for s in subjects:
        m = shape_mask(s.shape, s.box, canvas)
        img[:, m] = np.asarray(palette[s.color], dtype=np.float32)[:, None]
    return img


def caption_for(subjects, with_color: bool = True) -> str:
    parts = [f"a {s.color} {s.shape}" if with_color else f"a {s.shape}" for s in subjects]
    return " and ".join(parts)


def _overlap(a: Box, b: Box, margin: int) -> bool:
    return not (
        a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1]
    )


def sample_boxes(rng: np.random.Generator, count: int, canvas: int, min_size: int, max_size: int,
                 margin: int = 2, tries: int = 200) -> list[Box]:
    if canvas < min_size or count * (min_size + margin) > canvas * 2:
        raise CanvasTooSmallError(
            f"canvas {canvas} too small for {count} subjects of size >= {min_size}")
    for _ in range(tries):
        boxes: list[Box] = []
        for _ in range(count):
            size = int(rng.integers(min_size, min(max_size, canvas) + 1))
            x0 = int(rng.integers(0, canvas - size + 1))
            y0 = int(rng.integers(0, canvas - size + 1))
            box = (x0, y0, x0 + size, y0 + size)
            if any(_overlap(box, b, margin) for b in boxes):
                break
            boxes.append(box)
        if len(boxes) == count:
            return boxes
    raise CanvasTooSmallError(f"could not place {count} subjects on a {canvas}px canvas")


def random_subjects(rng: np.random.Generator, count: int, spec: DatasetSpec) -> list[SceneSubject]:
    """Distinct colors per scene so every subject phrase is unambiguous."""
    boxes = sample_boxes(rng, count, spec.canvas, spec.min_size, spec.max_size)
    colors = rng.choice(len(spec.colors), size=count, replace=False)
    shapes = rng.integers(0, len(spec.shapes), size=count)
    return [SceneSubject(spec.colors[c], spec.shapes[s], b) for c, s, b in zip(colors, shapes, boxes)]


def make_scene(subjects: list[SceneSubject], spec: DatasetSpec | None = None) -> SyntheticScene:
    spec = spec or DatasetSpec()
    return SyntheticScene(render(subjects, spec.canvas, spec.palette), caption_for(subjects), tuple(subjects))


def synth_dataset(spec: DatasetSpec, seed: int) -> list[SyntheticScene]:
    spec.validate()
    rng = np.random.default_rng(seed)
    scenes = []
    for _ in range(spec.num_scenes):
        count = 2 if rng.random() < spec.two_subject_fraction else 1
        scenes.append(make_scene(random_subjects(rng, count, spec), spec))
    return scenes


def render_reference(color: str, shape: str, rng: np.random.Generator, canvas: int = 64,
                     nuisance: bool = True,
                     palette: dict[str, tuple[float, float, float]] = PALETTE) -> np.ndarray:
    """Object-centric view of one subject, like a product photo.

    With ``nuisance`` the view gets a random scale and offset, a partial
    occluding band in background color (half the time) and pixel noise, so a
    single view carries an imperfect picture of the subject.
    """
    frac = rng.uniform(0.45, 0.75) if nuisance else 0.6
    size = int(round(frac * canvas))
    jitter = int(rng.integers(-4, 5)) if nuisance else 0
    jitter_y = int(rng.integers(-4, 5)) if nuisance else 0
    x0 = int(np.clip((canvas - size) // 2 + jitter, 0, canvas - size))
    y0 = int(np.clip((canvas - size) // 2 + jitter_y, 0, canvas - size))
    img = render([SceneSubject(color, shape, (x0, y0, x0 + size, y0 + size))], canvas, palette)
    if nuisance:
        if rng.random() < 0.5:
            band = int(rng.uniform(0.2, 0.4) * size)
            side = int(rng.integers(4))
            if side == 0:
                img[:, y0:y0 + band, :] = BACKGROUND
            elif side == 1:
                img[:, y0 + size - band:y0 + size, :] = BACKGROUND
            elif side == 2:
                img[:, :, x0:x0 + band] = BACKGROUND
            else:
                img[:, :, x0 + size - band:x0 + size] = BACKGROUND
        img = img + rng.normal(0.0, 0.05, img.shape).astype(np.float32)
        img = np.clip(img, 0.0, 1.0)
    return img.astype(np.float32)
