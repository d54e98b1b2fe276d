"""Two-step supervised training (pose first, then heatmap on a frozen backbone) and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample, augment
from .geometry import heatmap_target, is_success
from .model import (
    HEATMAP_STRIDE,
    BackboneConfig,
    Params,
    copy_params,
    detections_from,
    encode,
    group,
    locnet_forward,
    normalize_rect,
    pose_heads,
)
from .optim import make_optimizer, step_decay

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "split", "loss_name", "value")


def fmt(v: float) -> str:
    """Locale-independent float text used in every CSV/JSON artifact."""
    return repr(float(v))


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr_pose: float = 1e-4
    lr_loc: float = 3e-4
    decay_every: int = 20
    decay_factor: float = 0.5
    epochs_pose: int = 60
    epochs_loc: int = 30
    optimizer: str = "adam"
    seed: int = 0
    augment: bool = True
    max_shift: int = 4

    def __post_init__(self):
        if self.lr_pose <= 0 or self.lr_loc <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainResult:
    params: Params
    log: list[tuple] = field(default_factory=list)

    def losses(self, name: str) -> list[float]:
        return [r[4] for r in self.log if r[3] == name]


def write_log(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for step, epoch, split, name, value in rows:
            w.writerow([step, epoch, split, name, fmt(value)])


# ---------------------------------------------------------------- batching


def stack_inputs(samples: Sequence[Sample], cfg: BackboneConfig):
    rgb = np.stack([s.rgb for s in samples]).astype(ad.DTYPE)
    if not cfg.use_depth_branch:
        return rgb, None
    missing = [s.id for s in samples if s.depth is None]
    if missing:
        raise ValueError(f"depth branch enabled but samples {missing[:3]} have no depth")
    return rgb, np.stack([s.depth for s in samples]).astype(ad.DTYPE)


def annotation_targets(samples: Sequence[Sample], cfg: BackboneConfig):
    """Batch index, x, y and normalized pose target for every annotation."""
    bi, xs, ys, tg = [], [], [], []
    for i, s in enumerate(samples):
        for a in s.annotations:
            bi.append(i)
            xs.append(a.x)
            ys.append(a.y)
            tg.append(normalize_rect(a, cfg))
    return (
        np.asarray(bi, dtype=np.int64),
        np.asarray(xs, dtype=np.float64),
        np.asarray(ys, dtype=np.float64),
        np.asarray(tg, dtype=ad.DTYPE).reshape(-1, 3),
    )


def pose_loss(stages: Sequence[ad.Tensor], target: np.ndarray) -> ad.Tensor:
    """Sum over pyramid stages of the mean smooth-L1 against normalized targets."""
    t = ad.Tensor(target)
    total = ad.smooth_l1(stages[0], t)
    for s in stages[1:]:
        total = ad.add(total, ad.smooth_l1(s, t))
    return total


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


def _augmented(samples, rng, tc: TrainConfig):
    if not tc.augment:
        return list(samples)
    out = []
    for s in samples:
        a = augment(s, int(rng.integers(2**31)), rotate=False, max_shift=tc.max_shift, photometric=True)
        out.append(a if a.labelled else s)
    return out


# ---------------------------------------------------------------- step 1: pose


def train_posenet(
    d_l: Sequence[Sample],
    cfg: BackboneConfig,
    tc: TrainConfig,
    params: Optional[Params] = None,
    epochs: Optional[int] = None,
    callback=None,
) -> TrainResult:
    """Backbone and pose heads trained on annotated locations."""
    if not d_l:
        raise ValueError("train_posenet needs at least one labelled sample")
    unlabelled = [s.id for s in d_l if not s.labelled]
    if unlabelled:
        raise ValueError(f"train_posenet got unlabelled samples {unlabelled[:3]}")
    from .model import init_params

    params = params if params is not None else init_params(cfg, tc.seed)
    names = group(params, "enc.") + group(params, "pose.")
    opt = make_optimizer(tc.optimizer, params, names, tc.lr_pose)
    rng = np.random.default_rng([tc.seed, 1])
    rows: list[tuple] = []
    step = 0
    n_epochs = tc.epochs_pose if epochs is None else epochs
    for epoch in range(n_epochs):
        opt.lr = step_decay(tc.lr_pose, epoch, tc.decay_every, tc.decay_factor)
        for idx in _batches(len(d_l), tc.batch_size, rng):
            batch = _augmented([d_l[i] for i in idx], rng, tc)
            rgb, depth = stack_inputs(batch, cfg)
            bi, xs, ys, tgt = annotation_targets(batch, cfg)
            opt.zero_grad()
            feats = encode(rgb, depth, params, cfg)
            loss = pose_loss(pose_heads(feats, bi, xs, ys, params, cfg), tgt)
            loss.backward()
            opt.step()
            rows.append((step, epoch, "train", "pose", float(loss.data)))
            step += 1
        if callback is not None:
            callback(epoch, params, rows)
    return TrainResult(params, rows)


# ---------------------------------------------------------------- step 2: heatmap


def heatmap_batch_targets(samples: Sequence[Sample], cfg: BackboneConfig) -> np.ndarray:
    hs = cfg.heatmap_size
    return np.stack(
        [heatmap_target(s.annotations, hs, hs, HEATMAP_STRIDE, cfg.r_ball).grid for s in samples]
    )[:, None].astype(ad.DTYPE)


def train_locnet(
    d_l: Sequence[Sample],
    pose_params: Params,
    cfg: BackboneConfig,
    tc: TrainConfig,
    epochs: Optional[int] = None,
) -> TrainResult:
    """Decoder trained with cross-entropy on r-ball targets; backbone copied and frozen."""
    if not d_l:
        raise ValueError("train_locnet needs at least one labelled sample")
    backbone = group(pose_params, "enc.")
    if not backbone:
        raise ValueError("pose parameters carry no backbone ('enc.*') entries")
    params = copy_params(pose_params)
    names = group(params, "loc.")
    opt = make_optimizer(tc.optimizer, params, names, tc.lr_loc)
    rng = np.random.default_rng([tc.seed, 2])
    rows: list[tuple] = []
    step = 0
    n_epochs = tc.epochs_loc if epochs is None else epochs
    cached = None
    if not tc.augment:
        cached = _frozen_features(d_l, params, cfg)
    for epoch in range(n_epochs):
        opt.lr = step_decay(tc.lr_loc, epoch, tc.decay_every, tc.decay_factor)
        for idx in _batches(len(d_l), tc.batch_size, rng):
            if cached is not None:
                feats = [ad.Tensor(f[idx]) for f in cached]
                target = heatmap_batch_targets([d_l[i] for i in idx], cfg)
            else:
                batch = _augmented([d_l[i] for i in idx], rng, tc)
                with ad.no_grad():
                    rgb, depth = stack_inputs(batch, cfg)
                    feats = [ad.Tensor(f.data) for f in encode(rgb, depth, params, cfg)]
                target = heatmap_batch_targets(batch, cfg)
            opt.zero_grad()
            loss = ad.bce(locnet_forward(feats, params), ad.Tensor(target))
            loss.backward()
            opt.step()
            rows.append((step, epoch, "train", "loc_bce", float(loss.data)))
            step += 1
    return TrainResult(params, rows)


def _frozen_features(samples, params, cfg, chunk: int = 32):
    outs = None
    with ad.no_grad():
        for i in range(0, len(samples), chunk):
            rgb, depth = stack_inputs(samples[i : i + chunk], cfg)
            f = [t.data for t in encode(rgb, depth, params, cfg)]
            outs = f if outs is None else [np.concatenate([a, b]) for a, b in zip(outs, f)]
    return outs


def train_two_step(d_l, cfg: BackboneConfig, tc: TrainConfig) -> tuple[Params, list[tuple]]:
    pose = train_posenet(d_l, cfg, tc)
    loc = train_locnet(d_l, pose.params, cfg, tc)
    offset = len(pose.log)
    rows = pose.log + [(s + offset, e, sp, n, v) for s, e, sp, n, v in loc.log]
    return loc.params, rows


# ---------------------------------------------------------------- evaluation


def _smooth_l1_np(pred: np.ndarray, target: np.ndarray) -> float:
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    return float(np.where(d < 1, 0.5 * d * d, d - 0.5).mean())


def stagewise_loss(per_stage: np.ndarray, target: np.ndarray) -> float:
    """Average over stages of the smooth-L1 between a stage's pose and the target."""
    return float(np.mean([_smooth_l1_np(p, target) for p in per_stage]))


@dataclass
class EvalReport:
    success_rate: float
    pose_loss_all: float
    pose_loss_most_certain: float
    records: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        d = {
            "success_rate": self.success_rate,
            "pose_loss_all": self.pose_loss_all,
            "pose_loss_most_certain": self.pose_loss_most_certain,
            "n_samples": len(self.records),
        }
        return json.dumps(d, indent=2, sort_keys=True)

    def write(self, json_path, csv_path) -> None:
        Path(json_path).write_text(self.to_json() + "\n")
        cols = ["id", "n_detections", "success", "m_uc", "loss_most_certain", "loss_all", "x", "y", "theta", "w", "h"]
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([r[c] if isinstance(r[c], (str, int)) else fmt(r[c]) for c in cols])


def _nearest(annotations, x, y):
    return min(annotations, key=lambda a: (a.x - x) ** 2 + (a.y - y) ** 2)


def evaluate_detections(samples: Sequence[Sample], detections: Sequence[list], cfg: BackboneConfig) -> EvalReport:
    """Score precomputed ranked detections (most certain first) against annotations."""
    records = []
    wins = 0
    loss_mc, loss_all = [], []
    for s, dets in zip(samples, detections):
        rec = {"id": s.id, "n_detections": len(dets), "success": 0, "m_uc": math.nan,
               "loss_most_certain": math.nan, "loss_all": math.nan,
               "x": math.nan, "y": math.nan, "theta": math.nan, "w": math.nan, "h": math.nan}
        if dets:
            best = dets[0]
            ok = is_success(best.rect, s.annotations)
            wins += ok
            per = []
            for d in dets:
                if d.pose is None:
                    continue
                t = normalize_rect(_nearest(s.annotations, d.rect.x, d.rect.y), cfg)
                per.append(stagewise_loss(d.pose.per_stage, t))
            rec.update(success=int(ok), m_uc=best.m_uc, x=best.rect.x, y=best.rect.y,
                       theta=best.rect.theta, w=best.rect.w, h=best.rect.h)
            if per:
                rec.update(loss_most_certain=per[0], loss_all=float(np.mean(per)))
                loss_mc.append(per[0])
                loss_all.append(float(np.mean(per)))
        records.append(rec)
    n = len(samples)
    return EvalReport(
        success_rate=wins / n if n else 0.0,
        pose_loss_all=float(np.mean(loss_all)) if loss_all else math.nan,
        pose_loss_most_certain=float(np.mean(loss_mc)) if loss_mc else math.nan,
        records=records,
    )


def batch_detect(samples: Sequence[Sample], params: Params, cfg: BackboneConfig, top_n: int, chunk: int = 32):
    """Ranked detections per sample, computed in chunks."""
    out = []
    for i in range(0, len(samples), chunk):
        part = samples[i : i + chunk]
        rgb, depth = stack_inputs(part, cfg)
        with ad.no_grad():
            feats = encode(rgb, depth, params, cfg)
            heat = locnet_forward(feats, params).data[:, 0]
        for j in range(len(part)):
            single = [ad.Tensor(f.data[j : j + 1]) for f in feats]
            out.append(detections_from(single, heat[j], params, cfg, top_n))
    return out


def evaluate(params: Params, d_eval: Sequence[Sample], cfg: BackboneConfig, top_n: int = 5) -> EvalReport:
    """Success of the most certain detection; pose losses against the nearest annotation."""
    d_eval = sorted(d_eval, key=lambda s: s.id)
    return evaluate_detections(d_eval, batch_detect(d_eval, params, cfg, top_n), cfg)
