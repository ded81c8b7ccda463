"""Annotation ingestion, ground-truth label construction, and a deterministic
synthetic corpus generator.

The generator paints glyph-like stroke clusters inside annotated polygons and
adds unannotated distractor shapes (periodic stripe banks, rings) that share
stroke statistics with text.  A scene is a pure function of its spec, so equal
seeds give byte-identical images and annotations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import AxisRect, Polygon, RotatedRect, axis_aligned_bbox, rasterize

__all__ = [
    "IGNORE_SENTINEL",
    "MANIFEST_NAME",
    "ParseError",
    "Annotation",
    "InstanceLabel",
    "GroundTruth",
    "SceneSpec",
    "parse_annotation_line",
    "read_annotation_file",
    "make_ground_truth",
    "generate_scene",
    "write_dataset",
    "read_manifest",
    "load_image",
]

IGNORE_SENTINEL = "###"
MANIFEST_NAME = "manifest.tsv"


class ParseError(ValueError):
    """Annotation text that cannot be turned into a valid instance."""


@dataclass(frozen=True)
class Annotation:
    polygon: Polygon
    transcription: str

    @property
    def ignore(self) -> bool:
        return self.transcription == IGNORE_SENTINEL


@dataclass(frozen=True)
class InstanceLabel:
    polygon: Polygon
    box: AxisRect
    mask: np.ndarray


@dataclass
class GroundTruth:
    instances: list[InstanceLabel]
    global_map: np.ndarray
    ignore_regions: list[Polygon]


def parse_annotation_line(line: str, line_number: int = 1) -> Annotation:
    """Parse one ``x1,y1,...,xN,yN,transcription`` annotation line.

    The first 8 fields must be numeric; further leading numeric pairs are
    consumed as extra vertices as long as a transcription field remains.
    Commas inside the transcription are preserved.
    """
    fields = line.rstrip("\r\n").split(",")
    if len(fields) < 9:
        raise ParseError(
            f"line {line_number}: expected >= 9 comma-separated fields, got {len(fields)}"
        )
    coords: list[float] = []
    for i in range(8):
        try:
            coords.append(float(fields[i]))
        except ValueError:
            raise ParseError(
                f"line {line_number}: field {i + 1} is not numeric: {fields[i]!r}"
            ) from None
    pos = 8
    while pos + 2 < len(fields):
        try:
            x, y = float(fields[pos]), float(fields[pos + 1])
        except ValueError:
            break
        coords.extend((x, y))
        pos += 2
    transcription = ",".join(fields[pos:])
    pts = np.array(coords, dtype=np.float64).reshape(-1, 2)
    try:
        polygon = Polygon(pts)
    except ValueError as exc:
        raise ParseError(f"line {line_number}: {exc}") from exc
    return Annotation(polygon, transcription)


def read_annotation_file(path) -> list[Annotation]:
    path = Path(path)
    annotations = []
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if raw.strip():
            annotations.append(parse_annotation_line(raw, number))
    return annotations


def make_ground_truth(
    annotations: list[Annotation], image_size: tuple[int, int]
) -> GroundTruth:
    """Labels for one image: per-instance masks and boxes plus the pixelwise
    union of non-ignored masks.  Ignored annotations are kept apart so the
    evaluator and the segmentation loss can discount them.
    """
    height, width = image_size
    instances: list[InstanceLabel] = []
    ignore_regions: list[Polygon] = []
    global_map = np.zeros((height, width), dtype=bool)
    for ann in annotations:
        if ann.ignore:
            ignore_regions.append(ann.polygon)
            continue
        mask = rasterize(ann.polygon, height, width)
        instances.append(InstanceLabel(ann.polygon, axis_aligned_bbox(ann.polygon), mask))
        global_map |= mask
    return GroundTruth(instances, global_map, ignore_regions)


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one synthetic scene; the seed fully determines it."""

    seed: int
    image_size: int = 128
    n_horizontal: tuple[int, int] = (1, 2)
    n_rotated: tuple[int, int] = (0, 1)
    n_curved: tuple[int, int] = (0, 1)
    n_stripe_banks: tuple[int, int] = (1, 2)
    n_discs: tuple[int, int] = (1, 2)
    noise_sigma: float = 5.0
    ignore_fraction: float = 0.0

    def __post_init__(self) -> None:
        for name in ("n_horizontal", "n_rotated", "n_curved", "n_stripe_banks", "n_discs"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi):
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if not 0.0 <= self.ignore_fraction <= 1.0:
            raise ValueError("ignore_fraction must be in [0, 1]")


def _draw_segment(canvas: np.ndarray, p0, p1, value, thickness: int) -> None:
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    steps = max(2, int(np.hypot(*(p1 - p0)) * 2) + 1)
    h, w = canvas.shape[:2]
    for t in np.linspace(0.0, 1.0, steps):
        x, y = p0 + t * (p1 - p0)
        x0, y0 = int(x) - thickness // 2, int(y) - thickness // 2
        xs0, xs1 = max(0, x0), min(w, x0 + thickness)
        ys0, ys1 = max(0, y0), min(h, y0 + thickness)
        if xs0 < xs1 and ys0 < ys1:
            canvas[ys0:ys1, xs0:xs1] = value


def _stroke_color(rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.7:
        base = rng.uniform(15.0, 70.0)
    else:
        base = rng.uniform(195.0, 240.0)
    return base + rng.uniform(-8.0, 8.0, size=3)


def _paint_glyph_cell(canvas, rng, center, u_dir, v_dir, cell_w, cell_h, color) -> None:
    """2 to 4 short strokes, one of them spanning the cell height, the rest
    at mixed orientations; together they read as a glyph-like blob.
    """
    u_dir = np.asarray(u_dir)
    v_dir = np.asarray(v_dir)

    def at(u, v):
        return center + u * u_dir + v * v_dir

    hw, hh = cell_w / 2.0 - 0.5, cell_h / 2.0 - 0.5
    du = rng.uniform(-hw * 0.5, hw * 0.5)
    _draw_segment(canvas, at(du, -hh), at(du + rng.uniform(-1.5, 1.5), hh), color, 1)
    for _ in range(int(rng.integers(1, 4))):
        ua, va = rng.uniform(-hw, hw), rng.uniform(-hh, hh)
        ub, vb = rng.uniform(-hw, hw), rng.uniform(-hh, hh)
        _draw_segment(canvas, at(ua, va), at(ub, vb), color, 1)


def _quad_strip(rng: np.random.Generator, size: int, rotated: bool):
    """Rectangle strip polygon plus its glyph cells, fully inside the frame."""
    for shrink in (1.0, 0.85, 0.7, 0.55):
        length = rng.uniform(20.0, 46.0) * shrink
        height = rng.uniform(8.0, 13.0) * shrink
        angle = rng.uniform(-55.0, 55.0) if rotated else rng.uniform(-3.0, 3.0)
        cx = rng.uniform(length / 2 + 3, size - length / 2 - 3)
        cy = rng.uniform(length / 2 + 3, size - length / 2 - 3)
        rect = RotatedRect((cx, cy), length, height, angle)
        verts = rect.to_polygon().vertices
        if verts.min() >= 1.0 and verts.max() <= size - 1.0:
            poly = Polygon(np.round(verts, 2))
            t = np.deg2rad(rect.angle)
            u_dir = np.array([np.cos(t), np.sin(t)])
            v_dir = np.array([-np.sin(t), np.cos(t)])
            cell = max(4.0, height * 0.8)
            n_cells = max(2, int(length / cell))
            centers = [
                np.array([cx, cy]) + (-length / 2 + (i + 0.5) * length / n_cells) * u_dir
                for i in range(n_cells)
            ]
            cells = [(c, u_dir, v_dir, length / n_cells, height) for c in centers]
            return poly, cells
    raise RuntimeError("unreachable: strip always fits after shrinking")


def _arc_strip(rng: np.random.Generator, size: int):
    """Curved strip: an annular band polygon with at least 8 vertices."""
    for shrink in (1.0, 0.85, 0.7, 0.55):
        radius = rng.uniform(18.0, 38.0) * shrink
        band = rng.uniform(7.0, 11.0) * shrink
        half_span = np.deg2rad(rng.uniform(28.0, 60.0))
        theta0 = rng.uniform(0.0, 2 * np.pi)
        cx = rng.uniform(0.0, size)
        cy = rng.uniform(0.0, size)
        m = max(5, int(2 * half_span * radius / 7.0))
        thetas = theta0 + np.linspace(-half_span, half_span, m)
        r_out, r_in = radius + band / 2.0, radius - band / 2.0
        outer = np.stack([cx + r_out * np.cos(thetas), cy + r_out * np.sin(thetas)], axis=1)
        inner = np.stack([cx + r_in * np.cos(thetas[::-1]), cy + r_in * np.sin(thetas[::-1])], axis=1)
        verts = np.round(np.concatenate([outer, inner]), 2)
        if verts.min() >= 1.0 and verts.max() <= size - 1.0 and r_in > 2.0:
            poly = Polygon(verts)
            arc_len = 2 * half_span * radius
            cell = max(4.0, band * 0.8)
            n_cells = max(2, int(arc_len / cell))
            cells = []
            for i in range(n_cells):
                th = theta0 - half_span + (i + 0.5) * 2 * half_span / n_cells
                radial = np.array([np.cos(th), np.sin(th)])
                tangent = np.array([-np.sin(th), np.cos(th)])
                center = np.array([cx, cy]) + radius * radial
                cells.append((center, tangent, radial, arc_len / n_cells, band))
            return poly, cells
    return None


def _paint_stripe_bank(canvas: np.ndarray, rng: np.random.Generator, size: int) -> None:
    """Periodic parallel bars sharing stroke color and width with glyphs."""
    color = _stroke_color(rng)
    angle = rng.uniform(0.0, np.pi)
    u_dir = np.array([np.cos(angle), np.sin(angle)])
    v_dir = np.array([-np.sin(angle), np.cos(angle)])
    center = rng.uniform(12.0, size - 12.0, size=2)
    n_bars = int(rng.integers(4, 8))
    bar_len = rng.uniform(14.0, 34.0)
    spacing = rng.uniform(3.0, 6.0)
    for k in range(n_bars):
        offset = (k - (n_bars - 1) / 2.0) * spacing
        base = center + offset * v_dir
        _draw_segment(canvas, base - u_dir * bar_len / 2, base + u_dir * bar_len / 2,
                      color, 1)


def _paint_disc(canvas: np.ndarray, rng: np.random.Generator, size: int) -> None:
    """Concentric rings, like plates seen from above."""
    color = _stroke_color(rng)
    center = rng.uniform(12.0, size - 12.0, size=2)
    radius = rng.uniform(5.0, 13.0)
    radii = [radius] + ([radius * rng.uniform(0.55, 0.75)] if rng.random() < 0.7 else [])
    for r in radii:
        thetas = np.linspace(0.0, 2 * np.pi, max(10, int(2 * np.pi * r)))
        pts = center + np.stack([r * np.cos(thetas), r * np.sin(thetas)], axis=1)
        for a, b in zip(pts[:-1], pts[1:]):
            _draw_segment(canvas, a, b, color, 1)


def _random_word(rng: np.random.Generator) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    return "".join(letters[int(i)] for i in rng.integers(0, 26, size=int(rng.integers(3, 9))))


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[Annotation]]:
    """Render one scene.  Returns an (H, W, 3) uint8 image and the text
    annotations; distractor shapes are painted but never annotated.
    """
    rng = np.random.default_rng(np.random.PCG64(spec.seed))
    size = spec.image_size

    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    base = rng.uniform(115.0, 160.0)
    gx, gy = rng.uniform(-18.0, 18.0, size=2)
    canvas = base + gx * (xx / size - 0.5) + gy * (yy / size - 0.5)
    canvas = canvas[:, :, None] + rng.uniform(-6.0, 6.0, size=3)[None, None, :]
    canvas = canvas + rng.normal(0.0, spec.noise_sigma, size=(size, size, 3))

    for _ in range(int(rng.integers(spec.n_stripe_banks[0], spec.n_stripe_banks[1] + 1))):
        _paint_stripe_bank(canvas, rng, size)
    for _ in range(int(rng.integers(spec.n_discs[0], spec.n_discs[1] + 1))):
        _paint_disc(canvas, rng, size)

    counts = [
        ("horizontal", int(rng.integers(spec.n_horizontal[0], spec.n_horizontal[1] + 1))),
        ("rotated", int(rng.integers(spec.n_rotated[0], spec.n_rotated[1] + 1))),
        ("curved", int(rng.integers(spec.n_curved[0], spec.n_curved[1] + 1))),
    ]
    annotations: list[Annotation] = []
    placed_boxes: list[AxisRect] = []

    def overlaps_placed(poly: Polygon) -> bool:
        box = axis_aligned_bbox(poly)
        for other in placed_boxes:
            if (box.x_min < other.x_max + 2 and box.x_max > other.x_min - 2
                    and box.y_min < other.y_max + 2 and box.y_max > other.y_min - 2):
                return True
        return False

    for kind, count in counts:
        for _ in range(count):
            choice = None
            for attempt in range(80):
                if kind == "curved":
                    made = _arc_strip(rng, size)
                    if made is None:
                        continue
                else:
                    made = _quad_strip(rng, size, rotated=(kind == "rotated"))
                # last attempts accept overlap so the sampled count always lands
                if attempt >= 80 - 5 or not overlaps_placed(made[0]):
                    choice = made
                    break
            if choice is None:
                choice = _quad_strip(rng, size, rotated=False)
            poly, cells = choice
            color = _stroke_color(rng)
            for center, u_dir, v_dir, cw, ch in cells:
                _paint_glyph_cell(canvas, rng, center, u_dir, v_dir, cw, ch, color)
            placed_boxes.append(axis_aligned_bbox(poly))
            word = (IGNORE_SENTINEL if rng.random() < spec.ignore_fraction
                    else _random_word(rng))
            annotations.append(Annotation(poly, word))

    image = np.clip(canvas, 0.0, 255.0).astype(np.uint8)
    return image, annotations


def _format_annotation(ann: Annotation) -> str:
    coords = ",".join(f"{c:.2f}" for c in ann.polygon.vertices.ravel())
    return f"{coords},{ann.transcription}"


def write_dataset(specs: list[SceneSpec], directory) -> Path:
    """Render every spec into the directory as PNG + annotation text pairs;
    returns the path of the manifest that lists them.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, spec in enumerate(specs):
        image, annotations = generate_scene(spec)
        image_name, ann_name = f"img_{i:05d}.png", f"img_{i:05d}.txt"
        try:
            Image.fromarray(image).save(directory / image_name)
            (directory / ann_name).write_text(
                "".join(_format_annotation(a) + "\n" for a in annotations),
                encoding="utf-8",
            )
        except OSError as exc:
            raise OSError(f"failed writing sample under {directory}: {exc}") from exc
        lines.append(f"{image_name}\t{ann_name}\n")
    manifest = directory / MANIFEST_NAME
    try:
        manifest.write_text("".join(lines), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing manifest {manifest}: {exc}") from exc
    return manifest


def read_manifest(manifest_path) -> list[tuple[Path, Path]]:
    """Image/annotation path pairs, resolved relative to the manifest."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    pairs = []
    for number, raw in enumerate(manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise ParseError(f"line {number}: manifest rows are image<TAB>annotation")
        pairs.append((root / parts[0], root / parts[1]))
    return pairs


def load_image(path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))
