"""Anchor-based detection heads over the prediction feature maps.

Each prediction map gets a 1x1 conv emitting, per anchor prior, the channels
(tx, ty, tw, th, objectness, one logit per class). Box encoding follows the
usual single-shot convention: the center offsets pass through a sigmoid and
live in cell units, the sizes are log ratios against the anchor prior:

    cx = (col + sigmoid(tx)) * stride      w = prior_w * exp(tw)

Assignment, loss, decoding, and non-maximum suppression all operate on the
flat anchor ordering (level, row, col, prior), coarsest level first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor
from .errors import ConfigError, NumericsError, ShapeError
from .layers import PointwiseLayer
from .pyramid import PyramidConfig, PyramidModel

# fields per anchor before the class logits: tx, ty, tw, th, objectness
BOX_FIELDS = 5
IGNORE_IOU = 0.5


@dataclass(frozen=True)
class HeadConfig:
    """Head hyperparameters: classes, per-level priors, and loss weights."""

    num_classes: int
    priors_per_level: tuple
    lambda_box: float = 5.0
    lambda_obj: float = 1.0
    lambda_cls: float = 1.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        for level_priors in self.priors_per_level:
            for w, h in level_priors:
                if w <= 0 or h <= 0:
                    raise ConfigError(f"anchor priors must be positive, got {(w, h)}")


@dataclass(frozen=True)
class GroundTruthBox:
    """An axis-aligned target box in image pixels."""

    cx: float
    cy: float
    w: float
    h: float
    class_id: int


@dataclass(frozen=True)
class Detection:
    """A decoded box with objectness, class, and combined score."""

    cx: float
    cy: float
    w: float
    h: float
    objectness: float
    class_id: int
    score: float


@dataclass(frozen=True)
class Anchor:
    """One prior at one grid cell of one prediction level."""

    level: int
    row: int
    col: int
    prior_w: float
    prior_h: float
    level_index: int
    prior_index: int

    @property
    def stride(self) -> int:
        return 2 ** (self.level - 1)

    @property
    def cx(self) -> float:
        return (self.col + 0.5) * self.stride

    @property
    def cy(self) -> float:
        return (self.row + 0.5) * self.stride


@dataclass(frozen=True)
class LevelLayout:
    """Grid geometry of one prediction level's anchor block."""

    level: int
    side: int
    stride: int
    priors: np.ndarray
    offset: int

    @property
    def num_priors(self) -> int:
        return len(self.priors)

    @property
    def count(self) -> int:
        return self.side * self.side * self.num_priors


class AnchorSet:
    """All anchors of a model configuration, in flat (level, row, col, prior)
    order with the coarsest level first, plus vectorized geometry arrays."""

    def __init__(self, pyramid_config: PyramidConfig, image_side: int,
                 priors_per_level):
        if len(priors_per_level) != pyramid_config.num_maps:
            raise ConfigError(
                f"need one prior list per prediction level "
                f"({pyramid_config.num_maps}), got {len(priors_per_level)}")
        self.image_side = image_side
        self.layouts = []
        offset = 0
        for level in pyramid_config.prediction_levels():
            stride = 2 ** (level - 1)
            side = image_side // stride
            priors = np.asarray(priors_per_level[len(self.layouts)], dtype=np.float64)
            if priors.ndim != 2 or priors.shape[1] != 2:
                raise ConfigError(f"priors for level {level} must be (w, h) pairs")
            layout = LevelLayout(level, side, stride, priors, offset)
            self.layouts.append(layout)
            offset += layout.count
        self.total = offset
        self._anchors = None
        self._build_arrays()

    def _build_arrays(self):
        cx, cy, pw, ph = [], [], [], []
        for lay in self.layouts:
            cols, rows = np.meshgrid(np.arange(lay.side), np.arange(lay.side))
            centers_x = (cols.reshape(-1, 1) + 0.5) * lay.stride
            centers_y = (rows.reshape(-1, 1) + 0.5) * lay.stride
            ones = np.ones((lay.side * lay.side, 1))
            cx.append(np.broadcast_to(centers_x, (lay.side ** 2, lay.num_priors)).reshape(-1))
            cy.append(np.broadcast_to(centers_y, (lay.side ** 2, lay.num_priors)).reshape(-1))
            pw.append((ones * lay.priors[:, 0]).reshape(-1))
            ph.append((ones * lay.priors[:, 1]).reshape(-1))
        self.cx = np.concatenate(cx)
        self.cy = np.concatenate(cy)
        self.prior_w = np.concatenate(pw)
        self.prior_h = np.concatenate(ph)

    def __len__(self):
        return self.total

    def flat_index(self, level_index, row, col, prior_index):
        lay = self.layouts[level_index]
        return lay.offset + (row * lay.side + col) * lay.num_priors + prior_index

    def locate(self, flat):
        """Inverse of flat_index: (level_index, row, col, prior_index)."""
        for li, lay in enumerate(self.layouts):
            if flat < lay.offset + lay.count:
                local = flat - lay.offset
                cell, prior = divmod(local, lay.num_priors)
                row, col = divmod(cell, lay.side)
                return li, row, col, prior
        raise IndexError(flat)

    def anchors(self):
        """Materialize the flat list of Anchor records (cached)."""
        if self._anchors is None:
            out = []
            for li, lay in enumerate(self.layouts):
                for row in range(lay.side):
                    for col in range(lay.side):
                        for pi, (w, h) in enumerate(lay.priors):
                            out.append(Anchor(lay.level, row, col, float(w), float(h),
                                              li, pi))
            self._anchors = out
        return self._anchors


def gen_anchors(pyramid_config, image_side, priors_per_level):
    """Flat anchor list in (level, row, col, prior) order, coarsest first."""
    return AnchorSet(pyramid_config, image_side, priors_per_level).anchors()


def iou_centered(w1, h1, w2, h2):
    """IoU of two boxes sharing a center (vectorized over the first pair)."""
    inter = np.minimum(w1, w2) * np.minimum(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


def box_iou(a, b):
    """IoU of (cx, cy, w, h) boxes; `a` may be an array of boxes."""
    a = np.asarray(a, dtype=np.float64)
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx2, by2 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = np.clip(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0, None)
    ih = np.clip(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0, None)
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


NEGATIVE, POSITIVE, IGNORED = 0, 1, -1


@dataclass
class Assignments:
    """Per-anchor states plus the positive anchor -> ground-truth pairing."""

    state: np.ndarray
    gt_index: np.ndarray

    @property
    def positives(self):
        return np.nonzero(self.state == POSITIVE)[0]


def assign_targets(anchor_set: AnchorSet, gts) -> Assignments:
    """Pick one anchor per ground-truth box, then mark near-misses ignored.

    Boxes claim anchors sequentially: each takes the free anchor whose prior,
    centered at the box's cell on that level, has the highest IoU with the
    box (ties to the lowest anchor index). Unclaimed anchors overlapping any
    box above the ignore threshold are excluded from the objectness loss.
    """
    state = np.zeros(len(anchor_set), dtype=np.int8)
    gt_index = np.full(len(anchor_set), -1, dtype=np.int64)

    claimed = {}
    for gi, gt in enumerate(gts):
        best = None
        for li, lay in enumerate(anchor_set.layouts):
            col = int(gt.cx // lay.stride)
            row = int(gt.cy // lay.stride)
            if not (0 <= col < lay.side and 0 <= row < lay.side):
                continue
            ious = iou_centered(lay.priors[:, 0], lay.priors[:, 1], gt.w, gt.h)
            for pi in range(lay.num_priors):
                flat = anchor_set.flat_index(li, row, col, pi)
                if flat in claimed:
                    continue
                key = (-ious[pi], flat)
                if best is None or key < best[0]:
                    best = (key, flat)
        if best is not None:
            flat = best[1]
            claimed[flat] = gi
            state[flat] = POSITIVE
            gt_index[flat] = gi

    if gts:
        anchor_boxes = np.stack([anchor_set.cx, anchor_set.cy,
                                 anchor_set.prior_w, anchor_set.prior_h], axis=1)
        overlap = np.zeros(len(anchor_set))
        for gt in gts:
            overlap = np.maximum(overlap, box_iou(anchor_boxes,
                                                  (gt.cx, gt.cy, gt.w, gt.h)))
        ignore = (overlap > IGNORE_IOU) & (state != POSITIVE)
        state[ignore] = IGNORED
    return Assignments(state, gt_index)


def encode_box(gt: GroundTruthBox, anchor: Anchor):
    """Regression targets (tx, ty, tw, th) for a positive anchor."""
    tx = gt.cx / anchor.stride - anchor.col
    ty = gt.cy / anchor.stride - anchor.row
    tw = np.log(gt.w / anchor.prior_w)
    th = np.log(gt.h / anchor.prior_h)
    return tx, ty, tw, th


OBJECTNESS_PRIOR = 0.01


class DetectionHead:
    """One 1x1 conv per prediction level producing the raw anchor channels.

    Objectness biases start at the background prior logit so the untrained
    head marks almost everything background; without this, the sea of
    negative anchors dominates early objectness gradients and score ranking
    takes many epochs to separate objects from background.
    """

    def __init__(self, pyramid_config: PyramidConfig, head_config: HeadConfig,
                 rng, dtype=np.float32):
        if len(head_config.priors_per_level) != pyramid_config.num_maps:
            raise ConfigError(
                f"head has {len(head_config.priors_per_level)} prior lists for "
                f"{pyramid_config.num_maps} prediction levels")
        self.pyramid_config = pyramid_config
        self.head_config = head_config
        prior_logit = float(np.log(OBJECTNESS_PRIOR / (1.0 - OBJECTNESS_PRIOR)))
        self.layers = []
        for s, level in enumerate(pyramid_config.prediction_levels()):
            num_priors = len(head_config.priors_per_level[s])
            out_c = num_priors * (BOX_FIELDS + head_config.num_classes)
            layer = PointwiseLayer(
                f"head.level{level}", pyramid_config.head_channels, out_c, rng,
                dtype=dtype)
            obj_channels = _channel_groups(num_priors,
                                           head_config.num_classes)[2]
            layer.bias.data[0, obj_channels, 0, 0] = prior_logit
            self.layers.append(layer)

    def __call__(self, prediction_maps):
        """Raw per-level logit tensors, matching the prediction-map order."""
        raw = []
        for layer, fm in zip(self.layers, prediction_maps):
            if fm.shape[1] != self.pyramid_config.head_channels:
                raise ShapeError(
                    f"prediction map at level {fm.level} has {fm.shape[1]} channels, "
                    f"head expects {self.pyramid_config.head_channels}")
            raw.append(layer(fm.tensor))
        return raw

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out


def _channel_groups(num_priors, num_classes):
    """Channel index lists (xy, wh, obj, cls) for one level's raw tensor."""
    per = BOX_FIELDS + num_classes
    xy, wh, obj, cls = [], [], [], []
    for a in range(num_priors):
        base = a * per
        xy += [base, base + 1]
        wh += [base + 2, base + 3]
        obj.append(base + 4)
        cls += list(range(base + 5, base + 5 + num_classes))
    return xy, wh, obj, cls


def compute_loss(raw, anchor_set: AnchorSet, assignments_per_image,
                 gts_per_image, head_config: HeadConfig):
    """Scalar training loss plus a float breakdown of its three parts.

    Box and class terms sum over positive anchors. The objectness term sums
    over non-ignored anchors and is normalized by the image's positive count
    rather than its anchor count: with thousands of anchors per image a plain
    mean would shrink each positive's objectness gradient by three orders of
    magnitude relative to its box/class gradients, and confidence would train
    far slower than localization. The background-prior bias initialization
    keeps the summed negative side small at the start. Each image contributes
    equally (the batch mean is folded into the mask weights).
    """
    batch = raw[0].shape[0]
    if len(assignments_per_image) != batch or len(gts_per_image) != batch:
        raise ShapeError(
            f"batch size {batch} needs matching assignment/gt lists, got "
            f"{len(assignments_per_image)}/{len(gts_per_image)}")
    dtype = raw[0].data.dtype

    num_classes = head_config.num_classes
    targets = []
    for li, lay in enumerate(anchor_set.layouts):
        a = lay.num_priors
        side = lay.side
        targets.append({
            "t_xy": np.zeros((batch, 2 * a, side, side), dtype),
            "w_xy": np.zeros((batch, 2 * a, side, side), dtype),
            "t_wh": np.zeros((batch, 2 * a, side, side), dtype),
            "w_wh": np.zeros((batch, 2 * a, side, side), dtype),
            "t_obj": np.zeros((batch, a, side, side), dtype),
            "w_obj": np.zeros((batch, a, side, side), dtype),
            "t_cls": np.zeros((batch, a * num_classes, side, side), dtype),
            "w_cls": np.zeros((batch, a * num_classes, side, side), dtype),
        })

    anchors = anchor_set.anchors()
    for img, (assign, gts) in enumerate(zip(assignments_per_image, gts_per_image)):
        w_obj = head_config.lambda_obj / (batch * max(len(assign.positives), 1))
        for li, lay in enumerate(anchor_set.layouts):
            tgt = targets[li]
            block = assign.state[lay.offset:lay.offset + lay.count]
            grid_state = block.reshape(lay.side, lay.side, lay.num_priors)
            mask = (grid_state != IGNORED).transpose(2, 0, 1)
            tgt["w_obj"][img][mask] = w_obj
        for flat in assign.positives:
            li, row, col, pi = anchor_set.locate(flat)
            tgt = targets[li]
            anchor = anchors[flat]
            gt = gts[assign.gt_index[flat]]
            tx, ty, tw, th = encode_box(gt, anchor)
            tgt["t_xy"][img, 2 * pi, row, col] = tx
            tgt["t_xy"][img, 2 * pi + 1, row, col] = ty
            tgt["w_xy"][img, 2 * pi:2 * pi + 2, row, col] = head_config.lambda_box / batch
            tgt["t_wh"][img, 2 * pi, row, col] = tw
            tgt["t_wh"][img, 2 * pi + 1, row, col] = th
            tgt["w_wh"][img, 2 * pi:2 * pi + 2, row, col] = head_config.lambda_box / batch
            tgt["t_obj"][img, pi, row, col] = 1.0
            base = pi * num_classes
            tgt["t_cls"][img, base + gt.class_id, row, col] = 1.0
            tgt["w_cls"][img, base:base + num_classes, row, col] = \
                head_config.lambda_cls / batch

    def masked(term, weights):
        return engine.sum_all(engine.mul(term, Tensor(weights)))

    box = obj = cls = None
    for li, lay in enumerate(anchor_set.layouts):
        xy_idx, wh_idx, obj_idx, cls_idx = _channel_groups(lay.num_priors, num_classes)
        tgt = targets[li]
        level_raw = raw[li]
        xy = engine.sigmoid(engine.take_channels(level_raw, xy_idx))
        part = masked(engine.smooth_l1(xy - Tensor(tgt["t_xy"])), tgt["w_xy"])
        part = part + masked(
            engine.smooth_l1(engine.take_channels(level_raw, wh_idx) - Tensor(tgt["t_wh"])),
            tgt["w_wh"])
        box = part if box is None else box + part
        part = masked(engine.bce_with_logits(engine.take_channels(level_raw, obj_idx),
                                             Tensor(tgt["t_obj"])), tgt["w_obj"])
        obj = part if obj is None else obj + part
        part = masked(engine.bce_with_logits(engine.take_channels(level_raw, cls_idx),
                                             Tensor(tgt["t_cls"])), tgt["w_cls"])
        cls = part if cls is None else cls + part

    total = box + obj + cls
    breakdown = {"box": box.item(), "obj": obj.item(), "cls": cls.item(),
                 "total": total.item()}
    if not np.isfinite(breakdown["total"]):
        raise NumericsError(f"loss is not finite: {breakdown}")
    return total, breakdown


# exp() inputs are clipped so early-training garbage can't overflow float32
DECODE_SIZE_CLIP = 12.0


def decode(raw, anchor_set: AnchorSet, head_config: HeadConfig, score_thresh):
    """Per-image detections above `score_thresh`, grouped by level."""
    batch = raw[0].shape[0]
    per_image = [[] for _ in range(batch)]
    for li, lay in enumerate(anchor_set.layouts):
        data = raw[li].data
        a, k = lay.num_priors, head_config.num_classes
        fields = data.reshape(batch, a, BOX_FIELDS + k, lay.side, lay.side)
        sig = 1.0 / (1.0 + np.exp(-np.clip(fields, -60, 60)))
        cols = np.arange(lay.side).reshape(1, 1, 1, -1)
        rows = np.arange(lay.side).reshape(1, 1, -1, 1)
        cx = (cols + sig[:, :, 0]) * lay.stride
        cy = (rows + sig[:, :, 1]) * lay.stride
        pw = lay.priors[:, 0].reshape(1, a, 1, 1)
        ph = lay.priors[:, 1].reshape(1, a, 1, 1)
        w = pw * np.exp(np.clip(fields[:, :, 2], -DECODE_SIZE_CLIP, DECODE_SIZE_CLIP))
        h = ph * np.exp(np.clip(fields[:, :, 3], -DECODE_SIZE_CLIP, DECODE_SIZE_CLIP))
        objness = sig[:, :, 4]
        cls_prob = sig[:, :, 5:]
        class_id = cls_prob.argmax(axis=2)
        best_prob = np.take_along_axis(cls_prob, class_id[:, :, None], axis=2)[:, :, 0]
        score = objness * best_prob
        for img in range(batch):
            keep = np.argwhere(score[img] >= score_thresh)
            for pi, row, col in keep:
                per_image[img].append(Detection(
                    float(cx[img, pi, row, col]), float(cy[img, pi, row, col]),
                    float(w[img, pi, row, col]), float(h[img, pi, row, col]),
                    float(objness[img, pi, row, col]),
                    int(class_id[img, pi, row, col]),
                    float(score[img, pi, row, col])))
    return per_image


def nms(dets, iou_thresh):
    """Greedy per-class suppression; ties keep the earlier detection."""
    if not 0 < iou_thresh < 1:
        raise ConfigError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([(d.cx, d.cy, d.w, d.h) for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    alive = np.ones(len(dets), dtype=bool)
    kept = []
    for i in order:
        if not alive[i]:
            continue
        di = dets[i]
        kept.append(di)
        rivals = alive & (classes == di.class_id)
        rivals[i] = False
        idx = np.nonzero(rivals)[0]
        if idx.size:
            overlap = box_iou(boxes[idx], (di.cx, di.cy, di.w, di.h))
            alive[idx[overlap > iou_thresh]] = False
    return kept


def top_detections(dets, limit):
    """The `limit` highest-scoring detections, in their original order."""
    if limit is None or len(dets) <= limit:
        return list(dets)
    ranked = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    return [dets[i] for i in sorted(ranked[:limit])]


class Detector:
    """Pyramid model plus detection head, with a shared parameter list."""

    def __init__(self, pyramid_config: PyramidConfig, head_config: HeadConfig,
                 seed: int = 0, dtype=np.float32):
        self.pyramid_config = pyramid_config
        self.head_config = head_config
        self.pyramid = PyramidModel(pyramid_config, seed=seed, dtype=dtype)
        self.head = DetectionHead(pyramid_config, head_config,
                                  np.random.default_rng((seed, 1)), dtype=dtype)

    def forward(self, images: Tensor):
        return self.head(self.pyramid.forward(images))

    def params(self):
        return self.pyramid.params() + self.head.params()
