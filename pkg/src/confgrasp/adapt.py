"""Semi-supervised adaptation of the pose heads to a new domain.

A student and an EMA teacher share a frozen backbone.  The student is trained
on a handful of labelled target samples plus a consistency term that pulls its
mean pose towards the teacher's under independent flip/shift perturbations.
``confidence_mt`` restricts the consistency term to unlabelled images whose
teacher uncertainty falls below a threshold; ``mean_teacher`` uses every image
with at least one detection; ``direct`` drops the term altogether.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import Sample, Transform, augment
from .model import (
    BackboneConfig,
    Params,
    copy_params,
    encode,
    group,
    mean_pose,
    pose_heads,
    strip_depth_branch,
)
from .optim import make_optimizer
from .trainer import (
    TrainConfig,
    annotation_targets,
    batch_detect,
    fmt,
    pose_loss,
    stack_inputs,
    train_locnet,
)

log = logging.getLogger(__name__)

METHODS = ("direct", "mean_teacher", "confidence_mt")
METHOD_ALIASES = {"direct": "direct", "mt": "mean_teacher", "mean_teacher": "mean_teacher",
                  "cmt": "confidence_mt", "confidence_mt": "confidence_mt"}
CURVE_COLUMNS = ("epoch", "method", "eval_loss", "pool_size", "alpha", "threshold", "eval_loss_stages")


class AdaptError(ValueError):
    pass


def resolve_method(name: str) -> str:
    try:
        return METHOD_ALIASES[name]
    except KeyError:
        raise AdaptError(f"unknown method {name!r}; expected one of {sorted(METHOD_ALIASES)}") from None


@dataclass
class AdaptConfig:
    method: str = "confidence_mt"
    alpha_start: float = 0.5
    alpha_end: float = 0.99
    alpha_ramp_steps: int = 500
    threshold_policy: str = "auto"  # "auto", "inf", or a number
    consistency_weight: float = 1.0
    n_labelled_batch: int = 6
    n_pseudo_batch: int = 2
    top_k: int = 3
    epochs: int = 40
    steps_per_epoch: int = 25
    lr: float = 1e-4
    optimizer: str = "adam"
    max_shift: int = 4
    photometric: bool = True
    augment_labelled: bool = True
    loc_epochs: int = 30
    loc_finetune_n: int = 18
    seed: int = 0

    def __post_init__(self):
        self.method = resolve_method(self.method)
        if not 0 <= self.alpha_start <= self.alpha_end < 1:
            raise AdaptError(f"need 0 <= alpha_start <= alpha_end < 1, got {self.alpha_start}, {self.alpha_end}")
        if self.n_labelled_batch + self.n_pseudo_batch != 8:
            raise AdaptError("the batch mix must total 8 samples")
        self.threshold()  # validates the policy

    def threshold(self) -> Optional[float]:
        """Fixed threshold value, or None when it is computed from the teacher."""
        p = str(self.threshold_policy).strip().lower()
        if p == "auto":
            return None
        if p in ("inf", "+inf", "infinity"):
            return math.inf
        try:
            v = float(p)
        except ValueError:
            raise AdaptError(f"threshold policy must be 'auto', 'inf' or a number, got {self.threshold_policy!r}") from None
        if not v >= 0:
            raise AdaptError(f"threshold must be non-negative, got {v}")
        return v

    def alpha(self, step: int) -> float:
        """Linear ramp from alpha_start to alpha_end over alpha_ramp_steps."""
        if self.alpha_ramp_steps <= 0:
            return self.alpha_end
        frac = min(max(step, 0) / self.alpha_ramp_steps, 1.0)
        return self.alpha_start + (self.alpha_end - self.alpha_start) * frac

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- teacher / student


@dataclass
class TeacherStudent:
    student: Params
    teacher: Params
    step: int = 0

    @classmethod
    def from_params(cls, params: Params) -> "TeacherStudent":
        return cls(copy_params(params), copy_params(params), 0)

    def check_layout(self) -> None:
        if set(self.student) != set(self.teacher):
            diff = sorted(set(self.student) ^ set(self.teacher))
            raise AdaptError(f"teacher and student parameter names differ: {diff[:5]}")
        for k, v in self.student.items():
            if v.shape != self.teacher[k].shape:
                raise AdaptError(f"parameter {k}: student {v.shape} vs teacher {self.teacher[k].shape}")


def ema_update(ts: TeacherStudent, alpha: float, names: Optional[Sequence[str]] = None) -> TeacherStudent:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place."""
    if not 0 <= alpha < 1:
        raise AdaptError(f"alpha must lie in [0, 1), got {alpha}")
    ts.check_layout()
    for k in names if names is not None else sorted(ts.student):
        t, s = ts.teacher[k].data, ts.student[k].data
        a = t.dtype.type(alpha)
        t *= a
        t += (t.dtype.type(1) - a) * s
    return ts


# ---------------------------------------------------------------- confidence filter


@dataclass
class PseudoSample:
    sample: Sample
    locs: np.ndarray  # (L, 2) image points in the unaugmented frame
    targets: np.ndarray  # (L, 3) teacher mean poses at those points
    uncertainty: float


def sample_uncertainties(d_u: Sequence[Sample], teacher: Params, cfg: BackboneConfig, top_k: int):
    """Per sample: (sample, top-k detections); samples without peaks get an empty list."""
    dets = batch_detect(list(d_u), teacher, cfg, top_k)
    return list(zip(d_u, dets))


def confidence_filter(
    d_u: Sequence[Sample], teacher: Params, cfg: BackboneConfig, threshold: float, top_k: int = 3, scored=None
) -> list[PseudoSample]:
    """Unlabelled samples whose mean m_uc over their top-k detections is below ``threshold``."""
    scored = scored if scored is not None else sample_uncertainties(d_u, teacher, cfg, top_k)
    out = []
    for s, dets in scored:
        dets = dets[:top_k]
        if not dets:
            continue
        u = float(np.mean([d.m_uc for d in dets]))
        if u < threshold:
            locs = np.array([[d.rect.x, d.rect.y] for d in dets], dtype=np.float64)
            targets = np.array([d.pose.mean_pose for d in dets], dtype=np.float64)
            out.append(PseudoSample(s, locs, targets, u))
    out.sort(key=lambda p: p.sample.id)
    return out


def auto_threshold(d_l: Sequence[Sample], teacher: Params, cfg: BackboneConfig) -> float:
    """Median teacher m_uc at the labelled annotation centers."""
    d_l = list(d_l)
    rgb, depth = stack_inputs(d_l, cfg)
    bi, xs, ys, _ = annotation_targets(d_l, cfg)
    with ad.no_grad():
        feats = encode(rgb, depth, teacher, cfg)
        stages = pose_heads(feats, bi, xs, ys, teacher, cfg)
    per = np.stack([s.data for s in stages], axis=1).astype(np.float64)
    return float(np.median(per.var(axis=1).sum(axis=1)))


# ---------------------------------------------------------------- consistency


def _back_to_common(pose: ad.Tensor, transforms: Sequence[Transform]) -> ad.Tensor:
    """Undo the flip on the angle component (shifts leave the pose unchanged)."""
    sign = np.ones((len(transforms), 3), dtype=pose.data.dtype)
    sign[:, 0] = [-1.0 if t.flip else 1.0 for t in transforms]
    return ad.mul(pose, ad.Tensor(sign))


def _draw(sample: Sample, rng: np.random.Generator, acfg: AdaptConfig) -> Sample:
    return augment(sample, int(rng.integers(2**31)), rotate=False, max_shift=acfg.max_shift,
                   photometric=acfg.photometric)


def _mapped_locs(locs: np.ndarray, t: Transform) -> np.ndarray:
    return np.array([t.map_point(x, y) for x, y in locs], dtype=np.float64).reshape(-1, 2)


def _inside(pts: np.ndarray, size: int) -> np.ndarray:
    return np.all((pts >= 0) & (pts < size), axis=1)


def consistency_loss(
    student: Params,
    teacher: Params,
    samples: Sequence[Sample],
    locs: Sequence[np.ndarray],
    cfg: BackboneConfig,
    student_views: Sequence[Sample],
    teacher_views: Sequence[Sample],
) -> ad.Tensor:
    """MSE between student and teacher mean poses at shared points, in the unaugmented frame.

    ``*_views`` are augmented copies of ``samples`` carrying their transforms.
    Points that leave either augmented frame are skipped; with none left the
    loss is an exact zero.
    """
    size = cfg.input_size
    bi, s_pts, t_pts, s_tf, t_tf = [], [], [], [], []
    for i, (loc, sv, tv) in enumerate(zip(locs, student_views, teacher_views)):
        sp = _mapped_locs(loc, sv.transform or Transform(size))
        tp = _mapped_locs(loc, tv.transform or Transform(size))
        keep = _inside(sp, size) & _inside(tp, size)
        for j in np.flatnonzero(keep):
            bi.append(i)
            s_pts.append(sp[j])
            t_pts.append(tp[j])
            s_tf.append(sv.transform or Transform(size))
            t_tf.append(tv.transform or Transform(size))
    if not bi:
        return ad.Tensor(np.zeros((), dtype=ad.DTYPE))
    bi = np.asarray(bi, dtype=np.int64)
    s_pts, t_pts = np.asarray(s_pts), np.asarray(t_pts)
    with ad.no_grad():
        t_rgb, t_depth = stack_inputs(teacher_views, cfg)
        t_feats = encode(t_rgb, t_depth, teacher, cfg)
        t_pose = _back_to_common(mean_pose(pose_heads(t_feats, bi, t_pts[:, 0], t_pts[:, 1], teacher, cfg)), t_tf)
        s_rgb, s_depth = stack_inputs(student_views, cfg)
        s_feats = [ad.Tensor(f.data) for f in encode(s_rgb, s_depth, student, cfg)]
    s_pose = _back_to_common(mean_pose(pose_heads(s_feats, bi, s_pts[:, 0], s_pts[:, 1], student, cfg)), s_tf)
    return ad.mse(s_pose, ad.Tensor(t_pose.data))


# ---------------------------------------------------------------- training loop


@dataclass
class StepReport:
    supervised: float
    consistency: float
    total: float
    alpha: float


def adapt_step(
    ts: TeacherStudent,
    labelled: Sequence[Sample],
    pseudo: Sequence[PseudoSample],
    cfg: BackboneConfig,
    acfg: AdaptConfig,
    opt,
    rng_l: np.random.Generator,
    rng_u: np.random.Generator,
) -> StepReport:
    """One optimizer step on the student's pose heads followed by the EMA update."""
    views = list(labelled)
    if acfg.augment_labelled:
        views = [_draw(s, rng_l, acfg) for s in labelled]
        views = [v if v.labelled else s for v, s in zip(views, labelled)]
    rgb, depth = stack_inputs(views, cfg)
    bi, xs, ys, tgt = annotation_targets(views, cfg)
    opt.zero_grad()
    with ad.no_grad():
        feats = [ad.Tensor(f.data) for f in encode(rgb, depth, ts.student, cfg)]
    sup = pose_loss(pose_heads(feats, bi, xs, ys, ts.student, cfg), tgt)
    total = sup
    cons_value = 0.0
    if pseudo and acfg.method != "direct" and acfg.consistency_weight != 0:
        samples = [p.sample for p in pseudo]
        s_views = [_draw(s, rng_u, acfg) for s in samples]
        t_views = [_draw(s, rng_u, acfg) for s in samples]
        cons = consistency_loss(ts.student, ts.teacher, samples, [p.locs for p in pseudo], cfg, s_views, t_views)
        cons_value = float(cons.data)
        total = ad.add(total, ad.scale(cons, acfg.consistency_weight))
    total.backward()
    opt.step()
    alpha = acfg.alpha(ts.step)
    ema_update(ts, alpha, opt.names)
    ts.step += 1
    return StepReport(float(sup.data), cons_value, float(total.data), alpha)


def eval_pose_losses(params: Params, feats_eval, d_eval: Sequence[Sample], cfg: BackboneConfig) -> tuple[float, float]:
    """(mean-pose loss, stage-averaged loss) at the ground-truth centers of ``d_eval``."""
    bi, xs, ys, tgt = annotation_targets(d_eval, cfg)
    with ad.no_grad():
        stages = pose_heads(feats_eval, bi, xs, ys, params, cfg)
    per = np.stack([s.data for s in stages], axis=1).astype(np.float64)  # L, 4, 3
    t = tgt.astype(np.float64)

    def sl1(p):
        d = np.abs(p - t)
        return np.where(d < 1, 0.5 * d * d, d - 0.5).mean()

    return float(sl1(per.mean(axis=1))), float(np.mean([sl1(per[:, k]) for k in range(per.shape[1])]))


def target_model(source_params: Params, cfg: BackboneConfig) -> tuple[Params, BackboneConfig]:
    """RGB-only configuration and parameters derived from a (possibly RGB-D) source model."""
    tcfg = replace(cfg, use_depth_branch=False)
    return copy_params(strip_depth_branch(source_params)), tcfg


def finetune_locnet(params: Params, d_loc: Sequence[Sample], cfg: BackboneConfig, acfg: AdaptConfig) -> Params:
    """Supervised heatmap fine-tuning on the labelled target samples."""
    if not d_loc or acfg.loc_epochs <= 0:
        return params
    tc = TrainConfig(epochs_loc=acfg.loc_epochs, seed=acfg.seed, augment=True, max_shift=acfg.max_shift,
                     batch_size=min(16, len(d_loc)), decay_every=max(acfg.loc_epochs, 1))
    return train_locnet(list(d_loc), params, cfg, tc).params


@dataclass
class AdaptResult:
    method: str
    curve: list[tuple] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = math.inf
    best_params: Optional[Params] = None
    final: Optional[TeacherStudent] = None
    threshold: float = math.inf
    train_losses: list[float] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [r[2] for r in self.curve]

    def write_csv(self, path) -> None:
        write_curve(path, self.curve)


def write_curve(path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for epoch, method, loss, pool, alpha, thr, loss_st in rows:
            w.writerow([epoch, method, fmt(loss), pool, fmt(alpha), fmt(thr), fmt(loss_st)])


def prepare_target(
    source_params: Params, cfg: BackboneConfig, d_loc: Sequence[Sample], acfg: AdaptConfig
) -> tuple[Params, BackboneConfig]:
    """Strip the depth branch and fine-tune the heatmap head: the shared starting point."""
    params, tcfg = target_model(source_params, cfg)
    return finetune_locnet(params, d_loc, tcfg, acfg), tcfg


def run_adaptation(
    params: Params,
    d_l: Sequence[Sample],
    d_u: Sequence[Sample],
    d_eval: Sequence[Sample],
    cfg: BackboneConfig,
    acfg: AdaptConfig,
) -> AdaptResult:
    """Adapt the pose heads of ``params`` (already matching ``cfg``) with the configured method."""
    d_l = sorted(d_l, key=lambda s: s.id)
    d_u = sorted(d_u, key=lambda s: s.id)
    d_eval = sorted(d_eval, key=lambda s: s.id)
    if not d_l:
        raise AdaptError("adaptation needs at least one labelled sample")
    ts = TeacherStudent.from_params(params)
    names = group(ts.student, "pose.")
    opt = make_optimizer(acfg.optimizer, ts.student, names, acfg.lr)
    rng_l = np.random.default_rng([acfg.seed, 10])
    rng_u = np.random.default_rng([acfg.seed, 11])

    with ad.no_grad():
        rgb, depth = stack_inputs(d_eval, cfg)
        feats_eval = [ad.Tensor(f.data) for f in encode(rgb, depth, params, cfg)]

    uses_pool = acfg.method != "direct" and acfg.consistency_weight != 0 and len(d_u) > 0
    if acfg.method == "mean_teacher":
        threshold = math.inf
    else:
        fixed = acfg.threshold()
        threshold = fixed if fixed is not None else auto_threshold(d_l, ts.teacher, cfg)
    res = AdaptResult(acfg.method, threshold=threshold)

    loss0, loss0_st = eval_pose_losses(ts.student, feats_eval, d_eval, cfg)
    res.curve.append((0, acfg.method, loss0, 0, acfg.alpha(0), threshold, loss0_st))
    res.best_epoch, res.best_loss, res.best_params = 0, loss0, copy_params(ts.student)

    for epoch in range(1, acfg.epochs + 1):
        pool: list[PseudoSample] = []
        if uses_pool:
            pool = confidence_filter(d_u, ts.teacher, cfg, threshold, acfg.top_k)
        step_losses = []
        for _ in range(acfg.steps_per_epoch):
            li = rng_l.choice(len(d_l), size=min(acfg.n_labelled_batch, len(d_l)), replace=False)
            labelled = [d_l[i] for i in sorted(li)]
            pseudo = []
            if pool:
                pi = rng_u.choice(len(pool), size=min(acfg.n_pseudo_batch, len(pool)), replace=False)
                pseudo = [pool[i] for i in sorted(pi)]
            step_losses.append(adapt_step(ts, labelled, pseudo, cfg, acfg, opt, rng_l, rng_u).supervised)
        res.train_losses.append(float(np.mean(step_losses)))
        loss, loss_st = eval_pose_losses(ts.student, feats_eval, d_eval, cfg)
        res.curve.append((epoch, acfg.method, loss, len(pool), acfg.alpha(ts.step), threshold, loss_st))
        log.info("%s epoch %d eval %.5f pool %d", acfg.method, epoch, loss, len(pool))
        if loss < res.best_loss:
            res.best_epoch, res.best_loss, res.best_params = epoch, loss, copy_params(ts.student)
    res.final = ts
    return res


def compare_methods(
    params: Params,
    d_l: Sequence[Sample],
    d_u: Sequence[Sample],
    d_eval: Sequence[Sample],
    cfg: BackboneConfig,
    acfg: AdaptConfig,
    methods: Sequence[str] = METHODS,
) -> dict[str, AdaptResult]:
    """The same run under each method; only the consistency handling differs."""
    return {m: run_adaptation(params, d_l, d_u, d_eval, cfg, replace(acfg, method=m)) for m in methods}
