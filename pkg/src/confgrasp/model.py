"""Two-branch pyramid encoder with a heatmap decoder and per-stage pose heads."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import GraspRect, Heatmap, nms_peaks

Params = dict[str, Tensor]

N_STAGES = 4
HEATMAP_STRIDE = 2


@dataclass
class BackboneConfig:
    input_size: int = 64
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    use_depth_branch: bool = True
    crop_cells: int = 3
    decoder_channels: int = 16
    head_hidden: int = 64
    r_ball: float = 3.0
    nms_threshold: float = 0.3
    nms_window: int = 3
    max_peaks: int = 10

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        if len(self.stage_channels) != N_STAGES:
            raise ValueError(f"need exactly {N_STAGES} stage channel counts, got {self.stage_channels}")
        if self.input_size % 16:
            raise ValueError(f"input_size must be divisible by 16, got {self.input_size}")
        if self.crop_cells % 2 == 0 or self.crop_cells > self.input_size // 16:
            raise ValueError(
                f"crop_cells must be odd and fit the coarsest stage "
                f"({self.input_size // 16} cells), got {self.crop_cells}"
            )

    @property
    def heatmap_size(self) -> int:
        return self.input_size // HEATMAP_STRIDE

    def to_json(self) -> str:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["heatmap_stride"] = HEATMAP_STRIDE
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        d = json.loads(text)
        d.pop("heatmap_stride", None)
        return cls(**d)

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        """288x288 input with wider stages, for full-resolution Cornell frames."""
        return cls(input_size=288, stage_channels=(32, 64, 128, 256), r_ball=8.0, crop_cells=5)


@dataclass
class PoseOutput:
    per_stage: np.ndarray  # (4, 3) normalized (theta/(pi/2), w/size, h/size)
    mean_pose: np.ndarray = field(init=False)
    m_uc: float = field(init=False)

    def __post_init__(self):
        self.per_stage = np.asarray(self.per_stage, dtype=np.float64)
        self.mean_pose = self.per_stage.mean(axis=0)
        self.m_uc = float(self.per_stage.var(axis=0).sum())


def uncertainty(per_stage: np.ndarray) -> float:
    """Sum over pose components of the population variance across stages."""
    return float(np.asarray(per_stage, dtype=np.float64).var(axis=0).sum())


@dataclass(frozen=True)
class Detection:
    rect: GraspRect
    location_score: float
    m_uc: float
    pose: Optional[PoseOutput] = field(default=None, compare=False, repr=False)


# ---------------------------------------------------------------- parameters


def _conv_param(rng, co, ci, k):
    return ad.he_normal(rng, (co, ci, k, k), ci * k * k), np.zeros(co, dtype=ad.DTYPE)


def init_params(cfg: BackboneConfig, seed: int = 0, zero_depth: bool = False) -> Params:
    rng = np.random.default_rng(seed)
    raw: dict[str, np.ndarray] = {}
    branches = ["rgb", "depth"] if cfg.use_depth_branch else ["rgb"]
    for branch in branches:
        cin = 3
        for k, c in enumerate(cfg.stage_channels, 1):
            for name, ci in (("conv1", cin), ("conv2", c)):
                w, b = _conv_param(rng, c, ci, 3)
                if branch == "depth" and zero_depth:
                    w[:] = 0
                raw[f"enc.{branch}.{k}.{name}.w"] = w
                raw[f"enc.{branch}.{k}.{name}.b"] = b
            cin = c
    d = cfg.decoder_channels
    for k, c in enumerate(cfg.stage_channels, 1):
        raw[f"loc.lat{k}.w"], raw[f"loc.lat{k}.b"] = _conv_param(rng, d, c, 1)
    for k in (3, 2, 1):
        raw[f"loc.dec{k}.w"], raw[f"loc.dec{k}.b"] = _conv_param(rng, d, d, 3)
    w, b = _conv_param(rng, 1, d, 3)
    raw["loc.out.w"] = w * 0.1
    raw["loc.out.b"] = b - 2.0
    cc = cfg.crop_cells
    for k, c in enumerate(cfg.stage_channels, 1):
        fan = c * cc * cc
        raw[f"pose.{k}.fc1.w"] = ad.he_normal(rng, (fan, cfg.head_hidden), fan)
        raw[f"pose.{k}.fc1.b"] = np.zeros(cfg.head_hidden, dtype=ad.DTYPE)
        raw[f"pose.{k}.fc2.w"] = (rng.standard_normal((cfg.head_hidden, 3)) * 0.01).astype(ad.DTYPE)
        raw[f"pose.{k}.fc2.b"] = np.zeros(3, dtype=ad.DTYPE)
    return {k: Tensor(v, requires_grad=True) for k, v in raw.items()}


def params_from_arrays(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(np.array(v, dtype=ad.DTYPE), requires_grad=True) for k, v in arrays.items()}


def params_to_arrays(params: Params) -> dict[str, np.ndarray]:
    return {k: v.data for k, v in params.items()}


def copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in params.items()}


def group(params: Params, prefix: str) -> list[str]:
    return sorted(k for k in params if k.startswith(prefix))


def check_params(params: Params, cfg: BackboneConfig) -> None:
    """Raise if ``params`` does not match the layout ``cfg`` would build."""
    ref = init_params(cfg)
    missing = sorted(set(ref) - set(params))
    extra = sorted(set(params) - set(ref))
    if missing or extra:
        raise ValueError(f"parameter layout mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in ref.items():
        if params[k].shape != v.shape:
            raise ValueError(f"parameter {k}: shape {params[k].shape} does not match config {v.shape}")


def strip_depth_branch(params: Params) -> Params:
    return {k: v for k, v in params.items() if not k.startswith("enc.depth.")}


# ---------------------------------------------------------------- forward


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=ad.DTYPE))
    if t.data.ndim == 3:
        t = ad.reshape(t, (1, *t.shape))
    return t


def _block(x: Tensor, params: Params, prefix: str) -> Tensor:
    x = ad.relu(ad.conv2d(x, params[prefix + "conv1.w"], params[prefix + "conv1.b"], stride=2))
    return ad.relu(ad.conv2d(x, params[prefix + "conv2.w"], params[prefix + "conv2.b"], stride=1))


def encode(rgb, depth, params: Params, cfg: BackboneConfig) -> list[Tensor]:
    """Fused pyramid features, one (N, C_k, H/2^k, W/2^k) tensor per stage."""
    xr = _as_batch(rgb)
    size = cfg.input_size
    if xr.shape[1:] != (3, size, size):
        raise ValueError(f"rgb shape {xr.shape[1:]} does not match config input (3, {size}, {size})")
    if (depth is not None) != cfg.use_depth_branch:
        raise ValueError(
            "depth input must be given exactly when the depth branch is enabled "
            f"(use_depth_branch={cfg.use_depth_branch}, depth given={depth is not None})"
        )
    xd = _as_batch(depth) if depth is not None else None
    if xd is not None and xd.shape != xr.shape:
        raise ValueError(f"depth shape {xd.shape} does not match rgb {xr.shape}")
    feats = []
    for k in range(1, N_STAGES + 1):
        xr = _block(xr, params, f"enc.rgb.{k}.")
        if xd is not None:
            xd = _block(xd, params, f"enc.depth.{k}.")
            feats.append(ad.add(xr, xd))
        else:
            feats.append(xr)
    return feats


def locnet_logits_input(feats: Sequence[Tensor], params: Params) -> Tensor:
    y = ad.conv2d(feats[3], params["loc.lat4.w"], params["loc.lat4.b"])
    for k in (3, 2, 1):
        lat = ad.conv2d(feats[k - 1], params[f"loc.lat{k}.w"], params[f"loc.lat{k}.b"])
        y = ad.add(ad.upsample2x(y), lat)
        y = ad.relu(ad.conv2d(y, params[f"loc.dec{k}.w"], params[f"loc.dec{k}.b"]))
    return ad.conv2d(y, params["loc.out.w"], params["loc.out.b"])


def locnet_forward(feats: Sequence[Tensor], params: Params) -> Tensor:
    """Heatmap probabilities, shape (N, 1, H/2, W/2)."""
    return ad.sigmoid(locnet_logits_input(feats, params))


def crop_origin(xs, ys, stage: int, grid: int, cells: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-left cell of the in-bounds crop window around image points at ``stage``."""
    s = 2**stage
    cx = np.clip(np.floor(np.asarray(xs, dtype=np.float64) / s).astype(np.int64), 0, grid - 1)
    cy = np.clip(np.floor(np.asarray(ys, dtype=np.float64) / s).astype(np.int64), 0, grid - 1)
    half = cells // 2
    return np.clip(cy - half, 0, grid - cells), np.clip(cx - half, 0, grid - cells)


def pose_heads(
    feats: Sequence[Tensor],
    batch_idx: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    params: Params,
    cfg: BackboneConfig,
) -> list[Tensor]:
    """Per-stage (L, 3) normalized pose predictions at the given image points."""
    cc = cfg.crop_cells
    out = []
    for k in range(1, N_STAGES + 1):
        f = feats[k - 1]
        top, left = crop_origin(xs, ys, k, f.shape[-1], cc)
        patch = ad.crop_windows(f, batch_idx, top, left, cc)
        flat = ad.reshape(patch, (patch.shape[0], -1))
        hid = ad.relu(ad.linear(flat, params[f"pose.{k}.fc1.w"], params[f"pose.{k}.fc1.b"]))
        z = ad.linear(hid, params[f"pose.{k}.fc2.w"], params[f"pose.{k}.fc2.b"])
        out.append(ad.pose_activation(z))
    return out


def mean_pose(stages: Sequence[Tensor]) -> Tensor:
    total = stages[0]
    for s in stages[1:]:
        total = ad.add(total, s)
    return ad.scale(total, 1.0 / len(stages))


def stage_outputs(stages: Sequence[Tensor]) -> list[PoseOutput]:
    arr = np.stack([s.data for s in stages], axis=1)  # L, 4, 3
    return [PoseOutput(a) for a in arr]


def posenet_forward(
    feats: Sequence[Tensor], locs: Sequence[tuple[float, float]], params: Params, cfg: BackboneConfig
) -> list[PoseOutput]:
    """Pose outputs for points on a single image (batch entry 0)."""
    if not len(locs):
        return []
    pts = np.asarray(locs, dtype=np.float64)
    size = cfg.input_size
    if np.any(pts < 0) or np.any(pts >= size):
        raise ValueError(f"locations must lie inside the {size}x{size} image")
    with ad.no_grad():
        stages = pose_heads(feats, np.zeros(len(pts), dtype=np.int64), pts[:, 0], pts[:, 1], params, cfg)
    return stage_outputs(stages)


def denormalize(pose: np.ndarray, cfg: BackboneConfig) -> tuple[float, float, float]:
    theta = float(pose[0]) * math.pi / 2
    w = max(float(pose[1]) * cfg.input_size, 1e-3)
    h = max(float(pose[2]) * cfg.input_size, 1e-3)
    return theta, w, h


def normalize_rect(r: GraspRect, cfg: BackboneConfig) -> np.ndarray:
    return np.array([r.theta / (math.pi / 2), r.w / cfg.input_size, r.h / cfg.input_size], dtype=ad.DTYPE)


def detect(rgb, depth, params: Params, cfg: BackboneConfig, top_n: int = 5) -> list[Detection]:
    """Peaks of the heatmap, posed and ranked by ascending uncertainty."""
    with ad.no_grad():
        feats = encode(rgb, depth, params, cfg)
        heat = locnet_forward(feats, params).data[0, 0]
    return detections_from(feats, heat, params, cfg, top_n)


def detections_from(feats, heat: np.ndarray, params: Params, cfg: BackboneConfig, top_n: int) -> list[Detection]:
    peaks = nms_peaks(Heatmap(heat, HEATMAP_STRIDE), cfg.nms_threshold, cfg.nms_window, cfg.max_peaks)
    if not peaks:
        return []
    outs = posenet_forward(feats, [(x, y) for x, y, _ in peaks], params, cfg)
    dets = []
    for (x, y, score), po in zip(peaks, outs):
        theta, w, h = denormalize(po.mean_pose, cfg)
        dets.append(Detection(GraspRect(x, y, theta, w, h), score, po.m_uc, po))
    dets.sort(key=lambda d: (d.m_uc, -d.location_score))
    return dets[:top_n]
