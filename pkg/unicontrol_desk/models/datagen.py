"""
Datagen - Procedural scenes and the nine condition maps derived from them
Scenes are rendered without antialiasing from a seeded xoshiro256++ stream.
Every condition comes from scene ground truth; only canny, outpainting and
sketch post-processing draw extra randomness.

Value ranges:
    images       (3, S, S) float32 in [-1, 1]
    conditions   (3, S, S) float32 in [0, 1]
"""

import logging
import math
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.color import rgb2gray
from skimage.draw import disk, line, polygon, polygon_perimeter

from unicontrol_desk.models.errors import ConfigError, DatasetError, FormatError, UnknownTaskError
from unicontrol_desk.models.records import SampleRecord
from unicontrol_desk.models.rng import Xoshiro256PlusPlus, derive_seed
from unicontrol_desk.models.tasks import DEFAULT_REGISTRY, fnv1a64

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

PALETTE: Dict[str, Tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (50, 80, 220),
    "yellow": (235, 210, 50),
    "magenta": (200, 60, 200),
    "white": (245, 245, 245),
}
BACKGROUNDS: Dict[str, Tuple[int, int, int]] = {
    "gray": (110, 110, 110),
    "black": (15, 15, 15),
    "teal": (20, 110, 120),
}
ALL_COLORS: Tuple[str, ...] = tuple(PALETTE) + tuple(BACKGROUNDS)
SHAPES: Tuple[str, ...] = ("circle", "rectangle", "triangle", "figure")
SHAPE_WORDS = {"circle": "circle", "rectangle": "rectangle", "triangle": "triangle", "figure": "stick figure"}

# Segmentation label colours; label 0 is background.
LABEL_COLORS = np.array(
    [(0, 0, 0), (255, 64, 64), (64, 255, 64), (64, 64, 255), (255, 255, 64), (64, 255, 255)],
    dtype=np.float32,
) / 255.0
LIMB_COLORS = np.array(
    [(255, 0, 0), (255, 170, 0), (170, 255, 0), (0, 255, 170), (0, 170, 255)], dtype=np.float32
) / 255.0
MAX_PRIMITIVES = 4
CONDITION_TASKS: Tuple[str, ...] = tuple(DEFAULT_REGISTRY.keys())
THREADS_ENV = "UNICONTROL_THREADS"
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class DatagenConfig:
    canvas_size: int = 32
    canny_low: Tuple[float, float] = (0.05, 0.2)
    canny_high: Tuple[float, float] = (0.2, 0.5)
    sketch_sigma: float = 1.0
    sketch_threshold: float = 0.3
    normal_strength: float = 4.0

    def __post_init__(self) -> None:
        if self.canvas_size < 8:
            raise ConfigError(f"canvas_size must be >= 8, got {self.canvas_size}")
        (low_min, low_max), (high_min, high_max) = self.canny_low, self.canny_high
        if not 0 < low_min <= low_max < 1 or not 0 < high_min <= high_max < 1:
            raise ConfigError("canny threshold ranges must lie in (0, 1) with min <= max")
        if low_min >= high_max or low_max > high_max:
            raise ConfigError("canny low range must sit below the high range")


# ----------------------------------------------------------------------
# Scenes
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    """
    One drawable shape; ``size`` is the half-extent of its bounding square.

    Rectangles use ``size`` as half-width and ``size2`` as half-height.
    """

    kind: str
    color: str
    cx: int
    cy: int
    size: int
    z: int
    size2: int = 0

    def figure_joints(self) -> Dict[str, Tuple[int, int]]:
        """(row, col) joints of a stick figure."""
        s = self.size
        head_r = max(1, s // 4)
        neck = self.cy - s + 2 * head_r
        hip = self.cy + s // 3
        hand_row = neck + (hip - neck) // 2
        return {
            "head": (self.cy - s + head_r, self.cx),
            "neck": (neck, self.cx),
            "hip": (hip, self.cx),
            "hand_l": (hand_row, self.cx - (2 * s) // 3),
            "hand_r": (hand_row, self.cx + (2 * s) // 3),
            "foot_l": (self.cy + s, self.cx - s // 2),
            "foot_r": (self.cy + s, self.cx + s // 2),
        }


FIGURE_LIMBS: Tuple[Tuple[str, str], ...] = (
    ("neck", "hip"),
    ("neck", "hand_l"),
    ("neck", "hand_r"),
    ("hip", "foot_l"),
    ("hip", "foot_r"),
)


@dataclass(frozen=True)
class Scene:
    """Background colour plus primitives sorted back to front (z = 0..P-1)."""

    canvas_size: int
    background: str
    primitives: Tuple[Primitive, ...] = ()


@dataclass(frozen=True, eq=False)
class RenderedScene:
    scene: Scene
    image: np.ndarray
    labels: np.ndarray
    prompt: str


def _color01(name: str) -> np.ndarray:
    rgb = PALETTE.get(name) or BACKGROUNDS[name]
    return np.array(rgb, dtype=np.float32) / 255.0


def primitive_mask(prim: Primitive, size: int) -> np.ndarray:
    """Boolean (S, S) mask of the pixels a primitive covers."""
    mask = np.zeros((size, size), dtype=bool)
    if prim.kind == "circle":
        rr, cc = disk((prim.cy, prim.cx), prim.size + 0.5, shape=mask.shape)
        keep = (rr - prim.cy) ** 2 + (cc - prim.cx) ** 2 <= prim.size**2
        mask[rr[keep], cc[keep]] = True
    elif prim.kind == "rectangle":
        half_h = prim.size2 or prim.size
        mask[prim.cy - half_h : prim.cy + half_h + 1, prim.cx - prim.size : prim.cx + prim.size + 1] = True
    elif prim.kind == "triangle":
        rows = [prim.cy - prim.size, prim.cy + prim.size, prim.cy + prim.size]
        cols = [prim.cx, prim.cx - prim.size, prim.cx + prim.size]
        rr, cc = polygon(rows, cols, shape=mask.shape)
        mask[rr, cc] = True
        rr, cc = polygon_perimeter(rows, cols, shape=mask.shape)
        mask[rr, cc] = True
    elif prim.kind == "figure":
        joints = prim.figure_joints()
        head_r = max(1, prim.size // 4)
        rr, cc = disk(joints["head"], head_r + 0.5, shape=mask.shape)
        mask[rr, cc] = True
        for a, b in FIGURE_LIMBS:
            rr, cc = line(*joints[a], *joints[b])
            mask[rr, cc] = True
    else:
        raise ValueError(f"unknown primitive kind: {prim.kind!r}")
    return mask


def render_scene(scene: Scene) -> Tuple[np.ndarray, np.ndarray]:
    """
    Paint primitives back to front.

    Returns:
        (image in [-1, 1] of shape (3, S, S), label map where label i+1 is
        the i-th primitive and 0 the background)
    """
    s = scene.canvas_size
    canvas = np.broadcast_to(_color01(scene.background)[:, None, None], (3, s, s)).copy()
    labels = np.zeros((s, s), dtype=np.int32)
    for index, prim in enumerate(scene.primitives):
        mask = primitive_mask(prim, s)
        canvas[:, mask] = _color01(prim.color)[:, None]
        labels[mask] = index + 1
    return (canvas * 2.0 - 1.0).astype(np.float32), labels


def scene_prompt(scene: Scene) -> str:
    items = [f"a {prim.color} {SHAPE_WORDS[prim.kind]}" for prim in scene.primitives]
    return f"{' and '.join(items)} on a {scene.background} background"


def synth_scene(seed: int, canvas_size: int = 32) -> RenderedScene:
    """
    Draw a scene of 1-4 primitives from ``seed``.

    Primitives keep a one-pixel background ring, never share a colour, and
    are dropped if another primitive hides them completely.
    """
    rng = Xoshiro256PlusPlus.from_seed(seed)
    count = rng.integers(1, MAX_PRIMITIVES + 1)
    background = rng.choice(tuple(BACKGROUNDS))
    colors = list(PALETTE)
    rng.shuffle(colors)
    lo = max(2, canvas_size // 8)
    hi = max(lo, canvas_size // 4)

    drafts = []
    for i in range(count):
        kind = rng.choice(SHAPES)
        size = rng.integers(lo, hi + 1)
        cx = rng.integers(size + 1, canvas_size - 1 - size)
        cy = rng.integers(size + 1, canvas_size - 1 - size)
        size2 = rng.integers(max(1, size // 2), size + 1) if kind == "rectangle" else 0
        drafts.append((kind, colors[i], cx, cy, size, size2))
    order = list(range(count))
    rng.shuffle(order)

    stacked = [drafts[i] for i in sorted(range(count), key=lambda i: order[i])]
    prims = tuple(
        Primitive(kind, color, cx, cy, size, z, size2)
        for z, (kind, color, cx, cy, size, size2) in enumerate(stacked)
    )
    _, labels = render_scene(Scene(canvas_size, background, prims))
    visible = [p for i, p in enumerate(prims) if np.any(labels == i + 1)]
    if len(visible) != len(prims):
        logger.debug("seed %d: dropped %d hidden primitives", seed, len(prims) - len(visible))
        prims = tuple(
            Primitive(p.kind, p.color, p.cx, p.cy, p.size, z, p.size2) for z, p in enumerate(visible)
        )
    scene = Scene(canvas_size, background, prims)
    image, labels = render_scene(scene)
    return RenderedScene(scene, image, labels, scene_prompt(scene))


def segment_labels(scene: Scene) -> np.ndarray:
    """Integer label map; labels form the contiguous range 0..P."""
    return render_scene(scene)[1]


def color_classes(image: np.ndarray) -> np.ndarray:
    """Index into ALL_COLORS of the nearest scene colour at every pixel."""
    rgb = (np.clip(image, -1.0, 1.0) + 1.0) / 2.0
    table = np.stack([_color01(name) for name in ALL_COLORS])
    dist = ((rgb[None, :, :, :] - table[:, :, None, None]) ** 2).sum(axis=1)
    return np.argmin(dist, axis=0)


# ----------------------------------------------------------------------
# Condition maps
# ----------------------------------------------------------------------


def to_unit_range(image: np.ndarray) -> np.ndarray:
    return ((np.asarray(image, dtype=np.float32) + 1.0) / 2.0).astype(np.float32)


def _three(channel: np.ndarray) -> np.ndarray:
    return np.repeat(channel[None, :, :].astype(np.float32), 3, axis=0)


def draw_canny_thresholds(rng: Xoshiro256PlusPlus, config: DatagenConfig) -> Tuple[float, float]:
    """Low/high fractions of the peak gradient with low < high."""
    low = rng.uniform(*config.canny_low)
    high = rng.uniform(max(config.canny_high[0], low), config.canny_high[1])
    if high <= low:
        high = float(np.nextafter(low, np.inf))
    return low, high


def canny_edges(image: np.ndarray, low: float, high: float) -> np.ndarray:
    """
    Sobel magnitude, non-maximum suppression in four directions, then
    hysteresis between ``low`` and ``high`` (fractions of the peak).

    Returns:
        Boolean (S, S) edge mask; all False on a flat image
    """
    gray = rgb2gray(to_unit_range(image).transpose(1, 2, 0)).astype(np.float64)
    gx = ndimage.sobel(gray, axis=1)
    gy = ndimage.sobel(gray, axis=0)
    mag = np.hypot(gx, gy)
    peak = float(mag.max())
    if peak <= 1e-12:
        return np.zeros(gray.shape, dtype=bool)

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    p = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dr: int, dc: int) -> np.ndarray:
        return p[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]

    horizontal = (angle < 22.5) | (angle >= 157.5)
    diag_down = (angle >= 22.5) & (angle < 67.5)
    vertical = (angle >= 67.5) & (angle < 112.5)
    diag_up = (angle >= 112.5) & (angle < 157.5)
    ahead = np.select(
        [horizontal, diag_down, vertical, diag_up],
        [shifted(0, 1), shifted(1, 1), shifted(1, 0), shifted(1, -1)],
    )
    behind = np.select(
        [horizontal, diag_down, vertical, diag_up],
        [shifted(0, -1), shifted(-1, -1), shifted(-1, 0), shifted(-1, 1)],
    )
    thin = np.where((mag >= ahead) & (mag > behind), mag, 0.0)

    strong = thin >= high * peak
    weak = thin >= low * peak
    components, _ = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    keep = np.unique(components[strong])
    return np.isin(components, keep[keep > 0])


def boundary_map(labels: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbourhood contains a different label."""
    p = np.pad(labels, 1, mode="edge")
    center = p[1:-1, 1:-1]
    return (
        (center != p[:-2, 1:-1])
        | (center != p[2:, 1:-1])
        | (center != p[1:-1, :-2])
        | (center != p[1:-1, 2:])
    )


def gaussian_kernel(sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Normalized 1-D Gaussian taps, radius int(truncate * sigma + 0.5)."""
    if sigma == 0:
        return np.ones(1)
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def make_sketch(edge_map: np.ndarray, sigma: float, threshold: float) -> np.ndarray:
    """
    Blur an edge map with a 3-sigma truncated Gaussian and binarize it.

    Args:
        edge_map: (H, W) map in [0, 1]
        sigma: Blur width in pixels, >= 0 (0 leaves the map untouched)
        threshold: Binarization level in (0, 1)

    Returns:
        float32 map of zeros and ones
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    edges = np.asarray(edge_map, dtype=np.float64)
    blurred = ndimage.gaussian_filter(edges, sigma, mode="constant", truncate=3.0) if sigma > 0 else edges
    return (blurred >= threshold).astype(np.float32)


def depth_map(scene: Scene, labels: Optional[np.ndarray] = None) -> np.ndarray:
    """Nearest-primitive depth in [0, 1]: background 0, front-most primitive 1."""
    labels = segment_labels(scene) if labels is None else labels
    count = len(scene.primitives)
    if count == 0:
        return np.zeros(labels.shape, dtype=np.float32)
    return (labels / count).astype(np.float32)


def normal_map(depth: np.ndarray, strength: float = 4.0) -> np.ndarray:
    """
    Unit surface normals of a depth map by central differences.

    Returns:
        (3, H, W) array with components (nx, ny, nz), each vector unit length
    """
    dz_dy, dz_dx = np.gradient(np.asarray(depth, dtype=np.float64) * strength)
    normals = np.stack([-dz_dx, -dz_dy, np.ones_like(dz_dx)])
    return normals / np.linalg.norm(normals, axis=0, keepdims=True)


def bbox_map(scene: Scene, labels: np.ndarray) -> np.ndarray:
    """Outline of each primitive's visible extent in its own colour."""
    out = np.zeros((3,) + labels.shape, dtype=np.float32)
    for index, prim in enumerate(scene.primitives):
        rows, cols = np.nonzero(labels == index + 1)
        if rows.size == 0:
            continue
        r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
        rr, cc = polygon_perimeter([r0, r0, r1, r1], [c0, c1, c1, c0], shape=labels.shape)
        out[:, rr, cc] = _color01(prim.color)[:, None]
    return out


def pose_map(scene: Scene) -> np.ndarray:
    """Coloured limbs and white joints of every stick figure; empty otherwise."""
    s = scene.canvas_size
    out = np.zeros((3, s, s), dtype=np.float32)
    for prim in scene.primitives:
        if prim.kind != "figure":
            continue
        joints = prim.figure_joints()
        for limb, (a, b) in enumerate(FIGURE_LIMBS):
            rr, cc = line(*joints[a], *joints[b])
            out[:, rr, cc] = LIMB_COLORS[limb][:, None]
        for row, col in joints.values():
            out[:, row, col] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class OutpaintMask:
    """``mask`` is True where pixels are hidden; the kept window is centred."""

    mask: np.ndarray
    masked_image: np.ndarray

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def _centered_window(size: int, keep_area: float, aspect: float) -> Tuple[int, int]:
    """
    Window (height, width) closest to ``keep_area`` and ``aspect``.

    The window leaves at least one hidden pixel on every side. Canvases too
    small to meet the area within two percent get the closest window and a
    warning.

    Raises:
        ValueError: canvas smaller than 3x3
    """
    limit = size - 2
    if limit < 1:
        raise ValueError(f"canvas of size {size} leaves no room for an outpaint band")
    tolerance = 0.02 * size * size
    best: Optional[Tuple[Tuple[bool, float, float], int, int]] = None
    for height in range(1, limit + 1):
        width = min(max(int(round(keep_area / height)), 1), limit)
        error = abs(height * width - keep_area)
        skew = abs(math.log((width / height) / aspect))
        outside = error > tolerance
        key = (outside, error, skew) if outside else (outside, skew, error)
        if best is None or key < best[0]:
            best = (key, height, width)
    if best is None:
        raise ValueError(f"no outpaint window fits a canvas of size {size}")
    if best[0][0]:
        logger.warning(
            "outpaint window %dx%d keeps %d pixels, requested %.1f on a %dx%d canvas",
            best[1], best[2], best[1] * best[2], keep_area, size, size,
        )
    return best[1], best[2]


def make_outpaint_mask(seed: int, fraction: float, image: np.ndarray) -> OutpaintMask:
    """
    Border-band mask hiding ``fraction`` of the canvas around a centred window.

    Args:
        seed: Draws the aspect ratio of the kept window
        fraction: Hidden share of the canvas, in [0.2, 0.8]
        image: (3, S, S) image in [-1, 1]

    Raises:
        ValueError: fraction outside [0.2, 0.8]
    """
    if not 0.2 <= fraction <= 0.8:
        raise ValueError(f"outpaint fraction must lie in [0.2, 0.8], got {fraction}")
    size = image.shape[-1]
    rng = Xoshiro256PlusPlus.from_seed(seed)
    aspect = math.exp(rng.uniform(math.log(0.6), math.log(1.6)))
    height, width = _centered_window(size, (1.0 - fraction) * size * size, aspect)
    top, left = (size - height) // 2, (size - width) // 2
    mask = np.ones((size, size), dtype=bool)
    mask[top : top + height, left : left + width] = False
    masked = to_unit_range(image) * (~mask)[None, :, :]
    return OutpaintMask(mask=mask, masked_image=masked.astype(np.float32))


def derive_condition(
    scene: Scene,
    image: np.ndarray,
    task: str,
    rng: Xoshiro256PlusPlus,
    config: DatagenConfig = DatagenConfig(),
) -> np.ndarray:
    """
    Condition map of ``task`` for a rendered scene.

    Raises:
        UnknownTaskError: task is not one of the nine condition types
    """
    if task not in CONDITION_TASKS:
        raise UnknownTaskError(task)
    labels = segment_labels(scene)
    if task == "canny":
        low, high = draw_canny_thresholds(rng, config)
        return _three(canny_edges(image, low, high))
    if task == "hed":
        return _three(boundary_map(labels))
    if task == "hedsketch":
        hed = boundary_map(labels).astype(np.float32)
        return _three(make_sketch(hed, config.sketch_sigma, config.sketch_threshold))
    if task == "depth":
        return _three(depth_map(scene, labels))
    if task == "normal":
        normals = normal_map(depth_map(scene, labels), config.normal_strength)
        return ((normals + 1.0) / 2.0).astype(np.float32)
    if task == "seg":
        return LABEL_COLORS[np.minimum(labels, len(LABEL_COLORS) - 1)].transpose(2, 0, 1).copy()
    if task == "bbox":
        return bbox_map(scene, labels)
    if task == "pose":
        return pose_map(scene)
    fraction = rng.uniform(0.2, 0.8)
    return make_outpaint_mask(rng.next_u64(), fraction, image).masked_image


# ----------------------------------------------------------------------
# Zero-shot condition transforms
# ----------------------------------------------------------------------

ZERO_SHOT_TRANSFORMS = ("none", "gray", "blur", "hole")


def zero_shot_condition(image: np.ndarray, transform: str, blur_sigma: float = 1.5) -> np.ndarray:
    """
    Condition for an unseen task built from a clean image.

    "gray" feeds colourization, "blur" deblurring, and "hole" inpainting
    (a centred quarter of the canvas hidden).
    """
    unit = to_unit_range(image)
    if transform == "none":
        return unit
    if transform == "gray":
        return _three(rgb2gray(unit.transpose(1, 2, 0)))
    if transform == "blur":
        return np.stack(
            [ndimage.gaussian_filter(ch, blur_sigma, truncate=3.0) for ch in unit]
        ).astype(np.float32)
    if transform == "hole":
        size = unit.shape[-1]
        side = size // 2
        start = (size - side) // 2
        out = unit.copy()
        out[:, start : start + side, start : start + side] = 0.0
        return out
    raise ValueError(f"unknown zero-shot transform: {transform!r}")


# ----------------------------------------------------------------------
# Samples and datasets
# ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SceneSample:
    """Image, per-task condition maps and prompt of one scene."""

    image: np.ndarray
    conditions: Dict[str, np.ndarray]
    prompt: str
    seed: int
    scene: Scene


def task_stream(seed: int, task: str) -> Xoshiro256PlusPlus:
    """Per-(sample, task) stream, independent of which other tasks are derived."""
    return Xoshiro256PlusPlus.from_seed(seed ^ fnv1a64(task.encode("utf-8")))


def generate_sample(
    seed: int, tasks: Sequence[str], config: DatagenConfig = DatagenConfig()
) -> SceneSample:
    rendered = synth_scene(seed, config.canvas_size)
    conditions = {
        task: derive_condition(rendered.scene, rendered.image, task, task_stream(seed, task), config)
        for task in tasks
    }
    return SceneSample(rendered.image, conditions, rendered.prompt, seed, rendered.scene)


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    file: str
    task: str
    seed: int
    crc32: int

    def to_line(self) -> str:
        return f"{self.index}\t{self.file}\t{self.task}\t{self.seed}\t{self.crc32:08x}"

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise ValueError(f"manifest line needs 5 fields: {line!r}")
        return cls(int(parts[0]), parts[1], parts[2], int(parts[3]), int(parts[4], 16))


@dataclass
class DatasetManifest:
    directory: Path
    entries: List[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def resolve_workers(requested: Optional[int] = None) -> int:
    """Worker count capped by the UNICONTROL_THREADS environment variable."""
    limit = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            limit = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if limit < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {limit}")
    return max(1, min(limit, requested or limit))


def _write_sample(
    out_dir: Path, index: int, seed: int, tasks: Sequence[str], config: DatagenConfig
) -> List[ManifestEntry]:
    sample_seed = derive_seed(seed, index)
    sample = generate_sample(sample_seed, tasks, config)
    entries = []
    for task in tasks:
        payload = SampleRecord(sample.prompt, task, sample.image, sample.conditions[task]).to_bytes()
        name = f"{index:06d}_{task}.ucds"
        path = out_dir / name
        try:
            path.write_bytes(payload)
        except OSError as exc:
            raise DatasetError(f"cannot write record ({exc.strerror})", path) from exc
        entries.append(ManifestEntry(index, name, task, sample_seed, zlib.crc32(payload)))
    return entries


def write_dataset(
    out_dir: PathLike,
    count: int,
    seed: int,
    tasks: Sequence[str],
    config: DatagenConfig = DatagenConfig(),
    workers: Optional[int] = None,
) -> DatasetManifest:
    """
    Generate ``count`` scenes and one record per (scene, task).

    Samples are produced in parallel from per-index seeds; the manifest is
    written afterwards in index order, so the output does not depend on
    the worker count.

    Raises:
        UnknownTaskError: a task key is not registered
        DatasetError: a file cannot be written
    """
    for task in tasks:
        if task not in CONDITION_TASKS:
            raise UnknownTaskError(task)
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    directory = Path(out_dir)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory ({exc.strerror})", directory) from exc

    manifest = DatasetManifest(directory)
    n_workers = resolve_workers(workers)
    logger.info("writing %d samples x %d tasks to %s with %d threads", count, len(tasks), directory, n_workers)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        results = pool.map(
            lambda i: _write_sample(directory, i, seed, tasks, config), range(count)
        )
        for entries in results:
            manifest.entries.extend(entries)

    manifest_path = directory / MANIFEST_NAME
    try:
        manifest_path.write_text(
            "".join(entry.to_line() + "\n" for entry in manifest.entries), encoding="utf-8"
        )
    except OSError as exc:
        raise DatasetError(f"cannot write manifest ({exc.strerror})", manifest_path) from exc
    return manifest


@dataclass(frozen=True, eq=False)
class DatasetRecord:
    index: int
    task: str
    seed: int
    prompt: str
    image: np.ndarray
    condition: np.ndarray


class Dataset:
    """Records of a dataset directory grouped by task."""

    def __init__(self, records: Sequence[DatasetRecord]) -> None:
        self.records = list(records)
        self._by_task: Dict[str, List[DatasetRecord]] = {}
        for record in self.records:
            self._by_task.setdefault(record.task, []).append(record)

    def __len__(self) -> int:
        return len(self.records)

    def tasks(self) -> List[str]:
        return sorted(self._by_task)

    def by_task(self, task: str) -> List[DatasetRecord]:
        return self._by_task.get(task, [])

    @classmethod
    def from_samples(cls, samples: Sequence[SceneSample], tasks: Sequence[str]) -> "Dataset":
        """In-memory dataset, used for held-out evaluation and tests."""
        return cls(
            DatasetRecord(i, task, s.seed, s.prompt, s.image, s.conditions[task])
            for i, s in enumerate(samples)
            for task in tasks
        )


def load_dataset(directory: PathLike) -> Dataset:
    """
    Read every record listed in the manifest, verifying checksums.

    Raises:
        DatasetError: manifest or record unreadable
        FormatError: checksum mismatch or malformed record
    """
    root = Path(directory)
    manifest_path = root / MANIFEST_NAME
    try:
        lines = manifest_path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read manifest ({exc.strerror})", manifest_path) from exc

    records = []
    for line in lines:
        if not line.strip():
            continue
        try:
            entry = ManifestEntry.from_line(line)
        except ValueError as exc:
            raise FormatError(f"{manifest_path}: {exc}") from None
        path = root / entry.file
        try:
            payload = path.read_bytes()
        except OSError as exc:
            raise DatasetError(f"cannot read record ({exc.strerror})", path) from exc
        if zlib.crc32(payload) != entry.crc32:
            raise FormatError(f"{path}: checksum mismatch")
        record = SampleRecord.from_bytes(payload)
        records.append(
            DatasetRecord(entry.index, record.task, entry.seed, record.prompt, record.image, record.condition)
        )
    logger.info("loaded %d records from %s", len(records), root)
    return Dataset(records)
