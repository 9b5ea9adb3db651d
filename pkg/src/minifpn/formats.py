"""Tab-separated text formats for detections and ground-truth boxes.

Detections: one line per box with columns image_id, class_id, cx, cy, w, h,
score. Ground truth uses the same columns minus the score. Floats are
written with repr so reading restores them bitwise.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError
from .head import Detection, GroundTruthBox

DET_COLUMNS = ("image_id", "class_id", "cx", "cy", "w", "h", "score")
GT_COLUMNS = DET_COLUMNS[:-1]


def write_detections(path, dets_per_image) -> None:
    """Write {image_id: [Detection, ...]} sorted by image id."""
    lines = ["#" + "\t".join(DET_COLUMNS)]
    for image_id in sorted(dets_per_image):
        for d in dets_per_image[image_id]:
            lines.append("\t".join([str(image_id), str(d.class_id),
                                    repr(d.cx), repr(d.cy), repr(d.w), repr(d.h),
                                    repr(d.score)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_detections(path):
    """Read detections back into {image_id: [Detection, ...]}."""
    out = {}
    for parts in _rows(path, len(DET_COLUMNS)):
        image_id = int(parts[0])
        score = float(parts[6])
        det = Detection(float(parts[2]), float(parts[3]), float(parts[4]),
                        float(parts[5]), score, int(parts[1]), score)
        out.setdefault(image_id, []).append(det)
    return out


def write_gt_boxes(path, gts_per_image) -> None:
    """Write {image_id: [GroundTruthBox, ...]} sorted by image id."""
    lines = ["#" + "\t".join(GT_COLUMNS)]
    for image_id in sorted(gts_per_image):
        for g in gts_per_image[image_id]:
            lines.append("\t".join([str(image_id), str(g.class_id),
                                    repr(g.cx), repr(g.cy), repr(g.w), repr(g.h)]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_gt_boxes(path):
    """Read ground truth back into {image_id: [GroundTruthBox, ...]}."""
    out = {}
    for parts in _rows(path, len(GT_COLUMNS)):
        box = GroundTruthBox(float(parts[2]), float(parts[3]), float(parts[4]),
                             float(parts[5]), int(parts[1]))
        out.setdefault(int(parts[0]), []).append(box)
    return out


def _rows(path, expected):
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != expected:
            raise ConfigError(f"{path}:{lineno}: expected {expected} columns, "
                              f"got {len(parts)}")
        yield parts
