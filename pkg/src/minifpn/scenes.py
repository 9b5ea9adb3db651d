"""Deterministic synthetic detection scenes with multi-scale objects.

Every sample is a pure function of (config seed, sample index): the rng is
seeded from a counter-style SeedSequence keyed by the index, so samples are
index-addressable in any order and safe to generate in parallel. Scenes are
a soft two-tone background gradient, a handful of colored shapes (red disks,
green squares, blue triangles) whose bounding-box sides are drawn from a
four-bucket size mixture, and per-pixel Gaussian noise.

Shapes use square bounding boxes: a disk of diameter s, an axis-aligned
square of side s, or an isosceles triangle inscribed in the box. Rendering
marks every pixel whose cell overlaps the shape (disks and squares exactly,
triangles via center-inside plus vertex-containing cells), which keeps the
rendered mask within one pixel of the stored box on every edge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import Tensor
from .errors import ConfigError
from .formats import read_gt_boxes, write_gt_boxes
from .head import GroundTruthBox, box_iou

log = logging.getLogger(__name__)

CLASS_NAMES = ("disk", "square", "triangle")
BUCKET_NAMES = ("tiny", "small", "medium", "large")
DEFAULT_SIZE_RANGES = ((4, 7), (8, 12), (13, 32), (33, 64))
MAX_GT_IOU = 0.3
PLACEMENT_ATTEMPTS = 100

# index-space offsets keeping sample streams and epoch shuffles disjoint
SAMPLE_KEY = 0
SHUFFLE_KEY = 1
VAL_START_INDEX = 1 << 20


@dataclass(frozen=True)
class SceneConfig:
    """Generator parameters; the seed fully determines every sample."""

    image_side: int = 128
    min_objects: int = 2
    max_objects: int = 6
    size_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    size_ranges: tuple = DEFAULT_SIZE_RANGES
    noise_std: float = 0.02
    seed: int = 0
    num_classes: int = len(CLASS_NAMES)

    def __post_init__(self):
        if self.image_side < 8:
            raise ConfigError(f"image_side must be >= 8, got {self.image_side}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ConfigError(
                f"need 0 <= min_objects <= max_objects, got "
                f"{self.min_objects}..{self.max_objects}")
        if len(self.size_weights) != len(self.size_ranges):
            raise ConfigError("size_weights and size_ranges must align")
        if abs(sum(self.size_weights) - 1.0) > 1e-9:
            raise ConfigError(f"size weights must sum to 1, got {self.size_weights}")
        if any(w < 0 for w in self.size_weights):
            raise ConfigError("size weights must be non-negative")
        previous_hi = 0
        for (lo, hi), weight in zip(self.size_ranges, self.size_weights):
            if lo <= previous_hi or hi < lo:
                raise ConfigError(f"size ranges must be ascending and disjoint, "
                                  f"got {self.size_ranges}")
            previous_hi = hi
            if weight > 0 and hi + 3 > self.image_side:
                raise ConfigError(
                    f"size bucket up to {hi} px cannot fit a {self.image_side} px "
                    f"image; zero its weight or shrink the range")
        if self.num_classes != len(CLASS_NAMES):
            raise ConfigError(f"exactly {len(CLASS_NAMES)} shape classes exist")


@dataclass
class Sample:
    """One image (1, 3, side, side in [0, 1]) with its ground-truth boxes."""

    image: Tensor
    boxes: list
    masks: list = field(default_factory=list)


def size_bucket(side_length: float) -> int:
    """Bucket index for a box side, matching the generator's ranges."""
    if side_length < 8:
        return 0
    if side_length < 13:
        return 1
    if side_length < 33:
        return 2
    return 3


def sample_rng(config: SceneConfig, index: int):
    """The per-sample generator: a pure function of (seed, index)."""
    seq = np.random.SeedSequence(entropy=config.seed,
                                 spawn_key=(SAMPLE_KEY, index))
    return np.random.default_rng(seq)


def epoch_permutation(seed: int, epoch: int, count: int):
    """Shuffled index order for one epoch; pure function of (seed, epoch)."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(SHUFFLE_KEY, epoch))
    return np.random.default_rng(seq).permutation(count)


def _background(rng, side):
    a = rng.uniform(0.15, 0.45, size=3)
    b = rng.uniform(0.15, 0.45, size=3)
    axis = rng.integers(0, 2)
    ramp = np.linspace(0.0, 1.0, side)
    grid = ramp.reshape(-1, 1) if axis == 0 else ramp.reshape(1, -1)
    image = a.reshape(3, 1, 1) + (b - a).reshape(3, 1, 1) * grid
    return np.broadcast_to(image, (3, side, side)).copy()


def _class_color(rng, class_id):
    strong = rng.uniform(0.75, 1.0)
    weak = rng.uniform(0.0, 0.25, size=2)
    color = np.empty(3)
    color[class_id] = strong
    color[[i for i in range(3) if i != class_id]] = weak
    return color


def _shape_mask(class_id, cx, cy, size, side):
    """Boolean pixel mask of one shape inside its square bounding box."""
    half = size / 2.0
    x0 = max(int(np.floor(cx - half)) - 1, 0)
    x1 = min(int(np.ceil(cx + half)) + 1, side - 1)
    y0 = max(int(np.floor(cy - half)) - 1, 0)
    y1 = min(int(np.ceil(cy + half)) + 1, side - 1)
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    gx, gy = np.meshgrid(xs, ys)
    mask = np.zeros((side, side), dtype=bool)

    if class_id == 0:
        # disk: pixel cell [x, x+1) x [y, y+1) touches the circle
        nx = np.clip(cx, gx, gx + 1.0)
        ny = np.clip(cy, gy, gy + 1.0)
        local = (nx - cx) ** 2 + (ny - cy) ** 2 <= half * half
    elif class_id == 1:
        # square: interval overlap on both axes
        lx = (gx + 1.0 > cx - half) & (gx < cx + half)
        ly = (gy + 1.0 > cy - half) & (gy < cy + half)
        local = lx & ly
    else:
        # triangle with apex up: half-plane test on pixel centers, then the
        # cells containing the three vertices so every box edge is reached
        px, py = gx + 0.5, gy + 0.5
        depth = py - (cy - half)
        halfwidth = half * depth / size
        local = (depth >= 0) & (py <= cy + half) & (np.abs(px - cx) <= halfwidth)
        # nudging each vertex toward the centroid resolves cell-boundary
        # vertices to the cell that actually holds shape mass
        tcx, tcy = cx, cy + half / 3.0
        for vx, vy in ((cx, cy - half), (cx - half, cy + half), (cx + half, cy + half)):
            nx = vx + (tcx - vx) * 1e-7
            ny = vy + (tcy - vy) * 1e-7
            ix = min(max(int(np.floor(nx)), x0), x1) - x0
            iy = min(max(int(np.floor(ny)), y0), y1) - y0
            local[iy, ix] = True

    mask[y0:y1 + 1, x0:x1 + 1] = local
    return mask


def generate_sample(config: SceneConfig, index: int, keep_masks=False) -> Sample:
    """Render scene `index`: background, placed shapes, then noise."""
    rng = sample_rng(config, index)
    side = config.image_side
    image = _background(rng, side)

    count = int(rng.integers(config.min_objects, config.max_objects + 1))
    boxes = []
    masks = []
    for _ in range(count):
        class_id = int(rng.integers(0, len(CLASS_NAMES)))
        bucket = int(rng.choice(len(config.size_weights), p=config.size_weights))
        lo, hi = config.size_ranges[bucket]
        size = float(rng.uniform(lo, hi + 1))
        color = _class_color(rng, class_id)
        placed = False
        for _attempt in range(PLACEMENT_ATTEMPTS):
            margin = size / 2 + 1
            cx = float(rng.uniform(margin, side - margin))
            cy = float(rng.uniform(margin, side - margin))
            candidate = (cx, cy, size, size)
            if all(float(box_iou(candidate, (b.cx, b.cy, b.w, b.h))) <= MAX_GT_IOU
                   for b in boxes):
                placed = True
                break
        if not placed:
            log.info("sample %d: dropped a %s after %d placement attempts",
                     index, CLASS_NAMES[class_id], PLACEMENT_ATTEMPTS)
            continue
        mask = _shape_mask(class_id, cx, cy, size, side)
        image[:, mask] = color.reshape(3, 1)
        boxes.append(GroundTruthBox(cx, cy, size, size, class_id))
        if keep_masks:
            masks.append(mask)

    if config.noise_std > 0:
        image = image + rng.normal(0.0, config.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(Tensor(image[None]), boxes, masks)


class SceneDataset:
    """Lazy view over a contiguous index range, with an in-memory cache."""

    def __init__(self, config: SceneConfig, count: int, start_index: int = 0,
                 cache: bool = True):
        if count < 1:
            raise ConfigError(f"dataset needs count >= 1, got {count}")
        self.config = config
        self.count = count
        self.start_index = start_index
        self._cache = {} if cache else None

    def __len__(self):
        return self.count

    def __getitem__(self, i) -> Sample:
        if not 0 <= i < self.count:
            raise IndexError(i)
        if self._cache is not None and i in self._cache:
            return self._cache[i]
        sample = generate_sample(self.config, self.start_index + i)
        if self._cache is not None:
            self._cache[i] = sample
        return sample

    def indices(self):
        return range(self.start_index, self.start_index + self.count)


def generate_split(config: SceneConfig, count: int, split: str = "train",
                   cache: bool = True) -> SceneDataset:
    """Dataset handle for a named split; splits never share a sample index."""
    starts = {"train": 0, "val": VAL_START_INDEX}
    if split not in starts:
        raise ConfigError(f"split must be one of {sorted(starts)}, got {split!r}")
    return SceneDataset(config, count, starts[split], cache=cache)


def save_sample(directory, index: int, sample: Sample) -> None:
    """Cache one sample: raw little-endian float32 image plus a gt sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    sample.image.data.astype("<f4").tofile(directory / f"sample_{index}.f32")
    write_gt_boxes(directory / f"sample_{index}.tsv", {index: sample.boxes})


def load_sample(directory, index: int, config: SceneConfig) -> Sample:
    """Read a cached sample back; image shape comes from the config."""
    directory = Path(directory)
    side = config.image_side
    raw = np.fromfile(directory / f"sample_{index}.f32", dtype="<f4")
    image = raw.reshape(1, 3, side, side).astype(np.float32)
    gts = read_gt_boxes(directory / f"sample_{index}.tsv")
    return Sample(Tensor(image), gts.get(index, []))
