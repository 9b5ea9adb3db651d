"""Deterministic SGD training with per-epoch checkpoints and resumable state.

Everything that influences parameter values is a pure function of the run
configuration: model init comes from train.seed, scene content from
data.seed, and the per-epoch shuffle from (train.seed, epoch). The optimizer
state sidecar (velocity plus an epoch/best-AP record) makes `train 30` and
`train 15, resume 15` produce bitwise-identical final checkpoints.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_arrays, load_params, save_arrays, save_params
from .config import RunConfig
from .engine import Tensor
from .errors import CheckpointMismatchError
from .head import (AnchorSet, assign_targets, compute_loss, decode, nms,
                   top_detections)
from .metrics import EvalConfig, EvalResult, evaluate
from .optim import SGD
from .scenes import CLASS_NAMES, epoch_permutation, generate_split

log = logging.getLogger(__name__)

STATE_SUFFIX = ".state"
FINAL_NAME = "final.mfpn"
BEST_NAME = "best.mfpn"
LOG_NAME = "train_log.txt"


def state_path(checkpoint_path) -> Path:
    return Path(str(checkpoint_path) + STATE_SUFFIX)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    box: float
    obj: float
    cls: float
    seconds: float
    val_ap: float | None = None


@dataclass
class TrainResult:
    epochs_run: int
    first_epoch_loss: float
    final_loss: float
    final_val: EvalResult
    best_val_ap: float
    best_epoch: int
    records: list
    output_dir: Path


class ValRunner:
    """Shared val-split evaluation used by training and the eval command."""

    def __init__(self, run_config: RunConfig):
        self.run_config = run_config
        scene = run_config.scene_config()
        self.dataset = generate_split(scene, run_config.data.val_count, "val")
        self.head_config = run_config.head_config()
        self.anchor_set = AnchorSet(run_config.pyramid_config(),
                                    scene.image_side,
                                    self.head_config.priors_per_level)

    def __call__(self, detector):
        """(EvalResult, detections per image, gts, mean forward seconds)."""
        eval_cfg = self.run_config.eval
        dets, gts = {}, {}
        forward_seconds = 0.0
        for i in range(len(self.dataset)):
            sample = self.dataset[i]
            start = time.perf_counter()
            raw = detector.forward(sample.image)
            forward_seconds += time.perf_counter() - start
            decoded = decode(raw, self.anchor_set, self.head_config,
                             eval_cfg.score_thresh)[0]
            shortlist = top_detections(decoded, eval_cfg.pre_nms_topk)
            dets[i] = nms(shortlist, eval_cfg.nms_iou)[:eval_cfg.max_dets]
            gts[i] = sample.boxes
        result = evaluate(dets, gts, EvalConfig(num_classes=len(CLASS_NAMES)))
        return result, dets, gts, forward_seconds / len(self.dataset)


def _restore_state(path, optimizer, params):
    stored = load_arrays(path)
    if "meta" not in stored:
        raise CheckpointMismatchError(f"{path}: missing meta record")
    problems = []
    for p in params:
        key = "velocity." + p.name
        if key not in stored:
            problems.append(f"missing {key}")
        elif stored[key].shape != p.data.shape:
            problems.append(f"shape mismatch for {key}")
    extras = set(stored) - {"meta"} - {"velocity." + p.name for p in params}
    problems.extend(f"unexpected {name}" for name in sorted(extras))
    if problems:
        raise CheckpointMismatchError(
            f"{path}: optimizer state does not fit the model: "
            + "; ".join(problems))
    for p in params:
        optimizer.velocity[p.name][...] = stored["velocity." + p.name]
    meta = stored["meta"]
    return int(meta[0]), float(meta[1]), int(meta[2])


def _save_state(path, optimizer, next_epoch, best_ap, best_epoch):
    arrays = {"meta": np.array([next_epoch, best_ap, best_epoch],
                               dtype=np.float32)}
    for name, velocity in optimizer.velocity.items():
        arrays["velocity." + name] = velocity
    save_arrays(path, arrays)


def run_training(run_config: RunConfig, resume_from=None,
                 progress=None) -> TrainResult:
    """Train per the config; optionally resume from a params checkpoint."""
    out_dir = Path(run_config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_file = out_dir / LOG_NAME

    def emit(line):
        with log_file.open("a", encoding="utf-8") as fh:
            fh.write(line + "\n")
        log.info("%s", line)
        if progress is not None:
            progress(line)

    detector = run_config.build_detector()
    params = detector.params()
    train_cfg = run_config.train
    optimizer = SGD(params, lr=train_cfg.lr, momentum=train_cfg.momentum)

    start_epoch = 0
    best_ap = -1.0
    best_epoch = 0
    if resume_from is not None:
        side = state_path(resume_from)
        if not side.is_file():
            raise CheckpointMismatchError(
                f"cannot resume: optimizer state file missing at {side}")
        load_params(resume_from, params)
        start_epoch, best_ap, best_epoch = _restore_state(
            side, optimizer, params)
        emit(f"resumed=1 checkpoint={resume_from} next_epoch={start_epoch + 1}")

    scene = run_config.scene_config()
    train_ds = generate_split(scene, run_config.data.train_count, "train")
    head_config = run_config.head_config()
    anchor_set = AnchorSet(run_config.pyramid_config(), scene.image_side,
                           head_config.priors_per_level)
    val_runner = ValRunner(run_config)
    assignment_cache = {}

    def assignments_for(index):
        if index not in assignment_cache:
            assignment_cache[index] = assign_targets(anchor_set,
                                                     train_ds[index].boxes)
        return assignment_cache[index]

    final_path = out_dir / FINAL_NAME
    if start_epoch == 0:
        save_params(final_path, params)
        _save_state(state_path(final_path), optimizer, 0, best_ap, best_epoch)

    records = []
    first_epoch_loss = None
    final_loss = None
    final_val = None
    batch = train_cfg.batch_size
    for epoch_index in range(start_epoch, train_cfg.epochs):
        epoch = epoch_index + 1
        optimizer.lr = train_cfg.lr_at(epoch)
        order = epoch_permutation(train_cfg.seed, epoch_index, len(train_ds))
        sums = {"total": 0.0, "box": 0.0, "obj": 0.0, "cls": 0.0}
        steps = 0
        started = time.perf_counter()
        for lo in range(0, len(order), batch):
            chunk = [int(i) for i in order[lo:lo + batch]]
            images = np.concatenate([train_ds[i].image.data for i in chunk])
            raw = detector.forward(Tensor(images))
            loss, parts = compute_loss(
                raw, anchor_set, [assignments_for(i) for i in chunk],
                [train_ds[i].boxes for i in chunk], head_config)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            for key in sums:
                sums[key] += parts[key]
            steps += 1
        seconds = time.perf_counter() - started

        record = EpochRecord(epoch=epoch, lr=optimizer.lr,
                             loss=sums["total"] / steps,
                             box=sums["box"] / steps, obj=sums["obj"] / steps,
                             cls=sums["cls"] / steps, seconds=seconds)
        if first_epoch_loss is None:
            first_epoch_loss = record.loss
        final_loss = record.loss

        run_val = (train_cfg.val_interval > 0
                   and epoch % train_cfg.val_interval == 0)
        if run_val or epoch == train_cfg.epochs:
            result, _, _, _ = val_runner(detector)
            record.val_ap = result.ap
            final_val = result if epoch == train_cfg.epochs else final_val
            if result.ap > best_ap:
                best_ap = result.ap
                best_epoch = epoch
                save_params(out_dir / BEST_NAME, params)

        save_params(final_path, params)
        _save_state(state_path(final_path), optimizer, epoch, best_ap,
                    best_epoch)
        records.append(record)
        line = (f"epoch={record.epoch} lr={record.lr:g} "
                f"loss={record.loss:.6f} box={record.box:.6f} "
                f"obj={record.obj:.6f} cls={record.cls:.6f} "
                f"seconds={record.seconds:.2f}")
        if record.val_ap is not None:
            line += f" val_ap={record.val_ap:.6f}"
        emit(line)

    if train_cfg.epochs == 0:
        emit("epochs=0 note=initial-checkpoint-only")

    return TrainResult(epochs_run=train_cfg.epochs - start_epoch,
                       first_epoch_loss=first_epoch_loss,
                       final_loss=final_loss, final_val=final_val,
                       best_val_ap=best_ap, best_epoch=best_epoch,
                       records=records, output_dir=out_dir)
